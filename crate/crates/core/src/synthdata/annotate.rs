use super::render::Sample;
use crate::error::{OclipError, Result};
use crate::model::{CharVocab, ModelInput, TextInstanceEncoding, MASK, PAD};
use crate::rng::SplitMix64;

/// Encodes `text` into `k_max` PAD-filled slots and replaces one uniformly
/// chosen character with MASK.
pub fn mask_instance(
    text: &str,
    vocab: &CharVocab,
    k_max: usize,
    rng: &mut SplitMix64,
) -> Result<TextInstanceEncoding> {
    let pos = {
        let len = text.chars().count();
        if len == 0 {
            return Err(OclipError::Contract("cannot mask an empty string".into()));
        }
        rng.below(len as u64) as usize
    };
    mask_at(text, vocab, k_max, pos)
}

/// Like [`mask_instance`] with the masked position given.
pub fn mask_at(
    text: &str,
    vocab: &CharVocab,
    k_max: usize,
    pos: usize,
) -> Result<TextInstanceEncoding> {
    let ids = vocab.encode(text)?;
    if ids.is_empty() || ids.len() > k_max {
        return Err(OclipError::Contract(format!(
            "text length {} outside [1, {k_max}]",
            ids.len()
        )));
    }
    if pos >= ids.len() {
        return Err(OclipError::Index {
            op: "mask_at",
            index: pos,
            bound: ids.len(),
        });
    }
    let mut char_ids = vec![PAD; k_max];
    char_ids[..ids.len()].copy_from_slice(&ids);
    char_ids[pos] = MASK;
    Ok(TextInstanceEncoding {
        char_ids,
        valid_len: ids.len(),
        mask_pos: Some(pos),
        mask_target: Some(ids[pos]),
    })
}

/// Keeps `ceil(fraction * n)` uniformly chosen instances (at least one),
/// in their original order. Pixels are untouched, so dropped instances stay
/// visible but unannotated.
pub fn subset_annotations(sample: &Sample, fraction: f64, rng: &mut SplitMix64) -> Result<Sample> {
    check_fraction(fraction)?;
    let n = sample.instances.len();
    let keep = ((fraction * n as f64).ceil() as usize).clamp(n.min(1), n);
    let idx = rng.choose_indices(n, keep);
    Ok(Sample {
        instances: idx
            .into_iter()
            .map(|i| sample.instances[i].clone())
            .collect(),
        ..sample.clone()
    })
}

pub fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(OclipError::Usage(format!(
            "annotation fraction {fraction} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Model inputs for `N` samples; image `a` is paired with text set `a`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<ModelInput>,
    /// Kept annotations per sample, parallel to `inputs[a].instances`.
    pub texts: Vec<Vec<String>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn mask_targets(&self) -> Vec<Vec<usize>> {
        self.inputs
            .iter()
            .map(|i| i.instances.iter().filter_map(|t| t.mask_target).collect())
            .collect()
    }
}

/// Subsets each sample's annotations by `fraction`, then masks every kept
/// instance.
pub fn make_batch(
    samples: &[&Sample],
    fraction: f64,
    rng: &mut SplitMix64,
    vocab: &CharVocab,
    k_max: usize,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(OclipError::Contract(
            "make_batch needs at least one sample".into(),
        ));
    }
    let mut inputs = Vec::with_capacity(samples.len());
    let mut texts = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.instances.is_empty() {
            return Err(OclipError::Contract(format!(
                "sample {} has no text instances",
                sample.seed
            )));
        }
        let kept = subset_annotations(sample, fraction, rng)?;
        let instances = kept
            .instances
            .iter()
            .map(|t| mask_instance(&t.text, vocab, k_max, rng))
            .collect::<Result<Vec<_>>>()?;
        inputs.push(ModelInput {
            image: sample.image_tensor(),
            instances,
        });
        texts.push(kept.instances.into_iter().map(|t| t.text).collect());
    }
    Ok(Batch { inputs, texts })
}
