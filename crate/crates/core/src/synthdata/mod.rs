//! Synthetic scene-text corpus: bitmap-font rendering, masking, partial
//! annotation, batching, and the OCR-manifest confidence filter.

mod annotate;
mod corpus;
mod font;
mod manifest;
mod render;

pub use annotate::{check_fraction, make_batch, mask_at, mask_instance, subset_annotations, Batch};
pub use corpus::{fnv1a64, parse_sample, read_corpus, write_corpus, write_sample};
pub use font::{GlyphFont, ADVANCE, GLYPH_H, GLYPH_W};
pub use manifest::{
    filter_manifest, filter_manifest_stream, read_manifest, write_manifest, FilterSummary,
    ManifestRecord,
};
pub use render::{
    glyph_pixels, render_corpus, render_sample, sample_seed, GenConfig, GlyphBox, Sample,
    TextInstance,
};
