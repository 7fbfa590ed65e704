//! Evaluation of trained parameters: masked-character accuracy, top-1
//! image/text retrieval, and decoder attention maps with box locality.

use crate::error::{OclipError, Result};
use crate::model::{
    decode, encode_image, encode_text, forward_sample, pool_for_contrastive, predict_masked,
    CharVocab, ForwardOptions, ModelConfig, ModelInput, ModelParams, TextInstanceEncoding,
};
use crate::objectives::argmax_rows;
use crate::rng::SplitMix64;
use crate::synthdata::{mask_at, mask_instance, GlyphBox, Sample};
use crate::tensor::{Tape, Tensor};

/// Correct / total over masked-character queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Predicted class of every query in `instances` against `image`.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor,
    instances: Vec<TextInstanceEncoding>,
    options: ForwardOptions,
) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let input = ModelInput {
        image: image.clone(),
        instances,
    };
    let out = forward_sample(&input, &bound, config, options)?;
    Ok(argmax_rows(&out.masked_logits.value()))
}

/// Masked-character accuracy with every position of every instance masked
/// in turn. Queries never see each other, so each prediction equals the
/// one made for that instance alone.
pub fn masked_accuracy(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    options: ForwardOptions,
) -> Result<Tally> {
    let vocab = CharVocab::new(&config.alphabet)?;
    let mut tally = Tally::default();
    for sample in samples {
        let mut queries = Vec::new();
        for inst in &sample.instances {
            for pos in 0..inst.text.chars().count() {
                queries.push(mask_at(&inst.text, &vocab, config.k_max, pos)?);
            }
        }
        if queries.is_empty() {
            continue;
        }
        let targets: Vec<usize> = queries.iter().filter_map(|q| q.mask_target).collect();
        let preds = predict(params, config, &sample.image_tensor(), queries, options)?;
        tally.total += targets.len();
        tally.correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    }
    Ok(tally)
}

/// Top-1 retrieval accuracy in both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub batches: usize,
    pub pairs: usize,
}

/// Splits `samples` into consecutive batches of `batch_size` (a trailing
/// batch of one is dropped as trivially correct) and scores how often the
/// diagonal pair wins each row and column of the similarity matrix. Text
/// sets carry one random mask per instance, drawn from `mask_seed`.
pub fn retrieval_accuracy(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    batch_size: usize,
    mask_seed: u64,
) -> Result<Retrieval> {
    if batch_size < 2 {
        return Err(OclipError::Usage(
            "retrieval batch size must be at least 2".into(),
        ));
    }
    let vocab = CharVocab::new(&config.alphabet)?;
    let mut rng = SplitMix64::new(mask_seed);
    let (mut i2t, mut t2i, mut pairs, mut batches) = (0usize, 0usize, 0usize, 0usize);
    for chunk in samples.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut img = Vec::with_capacity(chunk.len());
        let mut txt = Vec::with_capacity(chunk.len());
        for sample in chunk {
            let instances = sample
                .instances
                .iter()
                .map(|t| mask_instance(&t.text, &vocab, config.k_max, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let tape = Tape::new();
            let bound = params.bind(&tape, false);
            let image = encode_image(&sample.image_tensor(), &bound, config)?;
            let te = encode_text(&instances, &bound, config)?;
            let (iv, tv) = pool_for_contrastive(&image.ie, &te)?;
            img.push(iv.value().data().to_vec());
            txt.push(tv.value().data().to_vec());
        }
        let n = chunk.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sim: Vec<Vec<f64>> = img
            .iter()
            .map(|a| txt.iter().map(|b| dot(a, b)).collect())
            .collect();
        let best = |vals: &mut dyn Iterator<Item = f64>| {
            vals.enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, v)| if v > b.1 { (i, v) } else { b },
                )
                .0
        };
        for (a, row) in sim.iter().enumerate() {
            i2t += usize::from(best(&mut row.iter().copied()) == a);
            t2i += usize::from(best(&mut (0..n).map(|r| sim[r][a])) == a);
        }
        pairs += n;
        batches += 1;
    }
    if pairs == 0 {
        return Err(OclipError::Usage(
            "corpus too small for one retrieval batch".into(),
        ));
    }
    Ok(Retrieval {
        image_to_text: i2t as f64 / pairs as f64,
        text_to_image: t2i as f64 / pairs as f64,
        batches,
        pairs,
    })
}

/// Which decoder attention to visualize.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnSelect {
    /// Decoder layer; the last one when `None`.
    pub layer: Option<usize>,
    /// Single head; the mean over heads when `None`.
    pub head: Option<usize>,
}

/// Decoder cross-attention of one query over the image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `[g, g]` patch weights; sums to 1.
    pub grid: Tensor,
    /// `[H, W]` nearest-neighbor upsampling with each cell's weight spread
    /// evenly over its pixels, so it also sums to 1.
    pub pixels: Tensor,
}

impl AttentionMap {
    /// Attention mass inside `[x0, y0, x1, y1)`.
    pub fn mass_in(&self, bbox: &GlyphBox) -> f64 {
        let w = self.pixels.shape()[1];
        (bbox[1]..bbox[3])
            .map(|y| {
                self.pixels.data()[y * w + bbox[0]..y * w + bbox[2]]
                    .iter()
                    .sum::<f64>()
            })
            .sum()
    }

    /// Mass inside `bbox` divided by the box's share of the image area.
    pub fn locality_ratio(&self, bbox: &GlyphBox) -> f64 {
        let (h, w) = (self.pixels.shape()[0], self.pixels.shape()[1]);
        let area = ((bbox[2] - bbox[0]) * (bbox[3] - bbox[1])) as f64 / (h * w) as f64;
        self.mass_in(bbox) / area
    }

    /// Binary graymap (P5), linearly stretched so the map's maximum is 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, w) = (self.pixels.shape()[0], self.pixels.shape()[1]);
        let levels = normalize_levels(self.pixels.data());
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(levels);
        out
    }
}

/// Maps `[min, max]` linearly onto `[0, 255]`.
pub fn normalize_levels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary graymap of raw gray levels.
pub fn pgm(width: usize, height: usize, levels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    out
}

/// Decoder result for one sample: per-query maps and predictions.
pub struct Inspection {
    pub maps: Vec<AttentionMap>,
    pub predicted: Vec<usize>,
}

pub fn inspect_attention(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor,
    instances: &[TextInstanceEncoding],
    select: AttnSelect,
) -> Result<Inspection> {
    let layer = select.layer.unwrap_or(config.n_dec_layers - 1);
    if layer >= config.n_dec_layers {
        return Err(OclipError::Index {
            op: "attention layer",
            index: layer,
            bound: config.n_dec_layers,
        });
    }
    if let Some(h) = select.head {
        if h >= config.n_heads {
            return Err(OclipError::Index {
                op: "attention head",
                index: h,
                bound: config.n_heads,
            });
        }
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let ie = encode_image(image, &bound, config)?.ie;
    let te = encode_text(instances, &bound, config)?;
    let dec = decode(&te, &ie, &bound, config)?;
    let predicted = argmax_rows(&predict_masked(&dec.dec_out, &bound)?.value());

    let (heads, n, s) = (config.n_heads, instances.len(), config.num_patches());
    let g = config.grid_side();
    let p = config.patch_size;
    let side = config.image_size;
    let attn = dec.attn.data();
    let mut maps = Vec::with_capacity(n);
    for q in 0..n {
        let mut grid = vec![0.0; s];
        let chosen: Vec<usize> = select.head.map_or((0..heads).collect(), |h| vec![h]);
        for &h in &chosen {
            let base = ((layer * heads + h) * n + q) * s;
            for (c, w) in grid.iter_mut().zip(&attn[base..base + s]) {
                *c += w / chosen.len() as f64;
            }
        }
        let cell = 1.0 / (p * p) as f64;
        let mut pixels = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                pixels[y * side + x] = grid[(y / p) * g + x / p] * cell;
            }
        }
        maps.push(AttentionMap {
            grid: Tensor::new(vec![g, g], grid)?,
            pixels: Tensor::new(vec![side, side], pixels)?,
        });
    }
    Ok(Inspection { maps, predicted })
}

/// Mean locality ratio over every instance of `samples`, each queried with
/// one random mask drawn from `mask_seed`.
pub fn mean_locality(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    select: AttnSelect,
    mask_seed: u64,
) -> Result<(f64, usize)> {
    let vocab = CharVocab::new(&config.alphabet)?;
    let mut rng = SplitMix64::new(mask_seed);
    let (mut sum, mut count) = (0.0, 0);
    for sample in samples {
        if sample.instances.is_empty() {
            continue;
        }
        let queries = sample
            .instances
            .iter()
            .map(|t| mask_instance(&t.text, &vocab, config.k_max, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let found = inspect_attention(params, config, &sample.image_tensor(), &queries, select)?;
        for (map, inst) in found.maps.iter().zip(&sample.instances) {
            sum += map.locality_ratio(&inst.bbox);
            count += 1;
        }
    }
    if count == 0 {
        return Err(OclipError::Usage("no instances to measure".into()));
    }
    Ok((sum / count as f64, count))
}
