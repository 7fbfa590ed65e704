use serde::{Deserialize, Serialize};

use super::font::{GlyphFont, ADVANCE, GLYPH_H, GLYPH_W};
use crate::error::{OclipError, Result};
use crate::model::DEFAULT_ALPHABET;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const INK: u8 = 255;
const MAX_PLACEMENT_RETRIES: usize = 100;

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Background noise amplitude as a fraction of full scale, in [0, 1).
    pub noise_amplitude: f64,
    pub alphabet: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_instances: 2,
            max_instances: 4,
            min_len: 3,
            max_len: 8,
            noise_amplitude: 0.1,
            alphabet: DEFAULT_ALPHABET.to_string(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(OclipError::Contract(format!("gen config: {m}")));
        if self.min_instances > self.max_instances {
            return fail("min_instances > max_instances");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail("need 1 <= min_len <= max_len");
        }
        if self.max_len * ADVANCE - 1 > self.image_size || GLYPH_H > self.image_size {
            return fail("max_len text does not fit the canvas at scale 1");
        }
        if !(0.0..1.0).contains(&self.noise_amplitude) {
            return fail("noise_amplitude must lie in [0, 1)");
        }
        if self.alphabet.is_empty() || !GlyphFont::builtin().covers(&self.alphabet) {
            return fail("alphabet has symbols without glyphs");
        }
        Ok(())
    }
}

/// Axis-aligned box `[x0, y0, x1, y1)` in pixels.
pub type GlyphBox = [usize; 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstance {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: GlyphBox,
}

/// One grayscale canvas with its text instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub seed: u64,
    pub size: usize,
    /// Row-major gray levels; pixel value is `level / 255`.
    pub pixels: Vec<u8>,
    pub instances: Vec<TextInstance>,
}

impl Sample {
    /// `[1, H, W]` tensor with pixels in [0, 1].
    pub fn image_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::new(vec![1, self.size, self.size], data).expect("square canvas")
    }
}

fn text_extent(len: usize, scale: usize) -> (usize, usize) {
    (len * ADVANCE * scale - scale, GLYPH_H * scale)
}

/// Whether two boxes overlap once each is grown by a 1 px margin.
fn too_close(a: &GlyphBox, b: &GlyphBox) -> bool {
    a[0] < b[2] + 1 && b[0] < a[2] + 1 && a[1] < b[3] + 1 && b[1] < a[3] + 1
}

/// Ink pixels of `text` drawn at `(x0, y0)` with integer `scale`.
pub fn glyph_pixels(text: &str, x0: usize, y0: usize, scale: usize) -> Vec<(usize, usize)> {
    let font = GlyphFont::builtin();
    let mut out = Vec::new();
    for (i, c) in text.chars().enumerate() {
        let Some(bitmap) = font.glyph(c) else {
            continue;
        };
        let cx = x0 + i * ADVANCE * scale;
        for (gy, row) in bitmap.iter().enumerate() {
            for (gx, &on) in row.iter().enumerate().take(GLYPH_W) {
                if !on {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        out.push((cx + gx * scale + dx, y0 + gy * scale + dy));
                    }
                }
            }
        }
    }
    out
}

/// Renders one sample; a pure function of `seed` and `config`.
pub fn render_sample(seed: u64, config: &GenConfig) -> Result<Sample> {
    config.validate()?;
    let size = config.image_size;
    let symbols: Vec<char> = config.alphabet.chars().collect();
    let mut rng = SplitMix64::new(seed);

    let target = rng.range_inclusive(config.min_instances, config.max_instances);
    let mut placed: Vec<(TextInstance, usize)> = Vec::with_capacity(target);
    let mut failures = 0;
    while placed.len() < target && failures < MAX_PLACEMENT_RETRIES {
        let len = rng.range_inclusive(config.min_len, config.max_len);
        let text: String = (0..len)
            .map(|_| symbols[rng.below(symbols.len() as u64) as usize])
            .collect();
        let mut scale = rng.range_inclusive(1, 2);
        let (mut w, mut h) = text_extent(len, scale);
        if w > size || h > size {
            scale = 1;
            (w, h) = text_extent(len, 1);
        }
        let x0 = rng.range_inclusive(0, size - w);
        let y0 = rng.range_inclusive(0, size - h);
        let bbox = [x0, y0, x0 + w, y0 + h];
        if placed.iter().any(|(p, _)| too_close(&p.bbox, &bbox)) {
            failures += 1;
            continue;
        }
        placed.push((TextInstance { text, bbox }, scale));
    }

    let noise_max = (config.noise_amplitude * 255.0).round() as u64;
    let mut pixels: Vec<u8> = (0..size * size)
        .map(|_| {
            if noise_max == 0 {
                0
            } else {
                rng.below(noise_max + 1) as u8
            }
        })
        .collect();
    for (inst, scale) in &placed {
        for (x, y) in glyph_pixels(&inst.text, inst.bbox[0], inst.bbox[1], *scale) {
            pixels[y * size + x] = INK;
        }
    }
    Ok(Sample {
        seed,
        size,
        pixels,
        instances: placed.into_iter().map(|(i, _)| i).collect(),
    })
}

/// Per-sample seed: `corpus_seed XOR index`.
pub fn sample_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed ^ index as u64
}

pub fn render_corpus(corpus_seed: u64, count: usize, config: &GenConfig) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| render_sample(sample_seed(corpus_seed, i), config))
        .collect()
}
