//! The three networks and the assembled pre-training forward pass.
//!
//! * image encoder: patch projection + learnt positional table, one
//!   pre-norm self-attention/FFN block, final norm -> `ie: [S, d]`
//! * character-aware text encoder: per-instance transformer over the
//!   `k_max` character slots with PAD keys masked out, mean-pooled over the
//!   valid characters -> `te: [n, d]`
//! * visual-textual decoder: stacked cross-attention/FFN layers where each
//!   instance embedding queries the image embeddings. There is no
//!   query-query attention, so row `i` of the output depends only on
//!   instance `i` and the image.

mod config;
mod params;
mod vocab;

pub use config::{ModelConfig, DEFAULT_ALPHABET};
pub use params::{decays, BoundParams, ModelParams, TEMPERATURE, TEMPERATURE_MAX, TEMPERATURE_MIN};
pub use vocab::{CharVocab, MASK, PAD};

use crate::error::{OclipError, Result};
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
/// Additive score for masked attention slots; exp underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;

/// One text instance as the text encoder sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextInstanceEncoding {
    /// `k_max` ids, PAD beyond `valid_len`.
    pub char_ids: Vec<usize>,
    pub valid_len: usize,
    pub mask_pos: Option<usize>,
    pub mask_target: Option<usize>,
}

impl TextInstanceEncoding {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |m: &str| Err(OclipError::Contract(format!("text instance: {m}")));
        if self.char_ids.len() != config.k_max {
            return bad("char_ids must have k_max entries");
        }
        if self.valid_len == 0 || self.valid_len > config.k_max {
            return bad("valid_len out of range");
        }
        if self.char_ids.iter().any(|&c| c >= config.vocab_size) {
            return bad("id outside vocabulary");
        }
        match (self.mask_pos, self.mask_target) {
            (Some(p), Some(t)) => {
                if p >= self.valid_len
                    || self.char_ids[p] != MASK
                    || t < 2
                    || t >= config.vocab_size
                {
                    return bad("inconsistent mask");
                }
            }
            (None, None) => {}
            _ => return bad("mask_pos and mask_target must be set together"),
        }
        Ok(())
    }
}

/// One image plus the (possibly partial) instances annotated on it.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `[C, H, W]`, pixels in [0, 1].
    pub image: Tensor,
    pub instances: Vec<TextInstanceEncoding>,
}

#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub ie: Var,
    /// `[n_heads, S, S]` weights of the image self-attention layer, off the tape.
    pub attn: Tensor,
}

pub struct Decoded {
    pub dec_out: Var,
    /// `[n_dec_layers, n_heads, n, S]` post-softmax cross-attention weights.
    pub attn: Tensor,
}

pub struct SampleOutput {
    pub masked_logits: Var,
    pub img_vec: Var,
    pub txt_vec: Var,
    /// `[n_dec_layers, n_heads, n, S]`; `None` when the decoder is bypassed.
    pub attn: Option<Tensor>,
    pub te: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// When false, masked characters are classified from `te` directly.
    pub use_decoder: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { use_decoder: true }
    }
}

fn linear(p: &BoundParams, prefix: &str, x: &Var) -> Result<Var> {
    x.matmul(p.var(&format!("{prefix}.weight"))?)?
        .add_row(p.var(&format!("{prefix}.bias"))?)
}

fn norm(p: &BoundParams, prefix: &str, x: &Var) -> Result<Var> {
    x.layer_norm(
        p.var(&format!("{prefix}.gain"))?,
        p.var(&format!("{prefix}.bias"))?,
        LN_EPS,
    )
}

fn ffn(p: &BoundParams, prefix: &str, x: &Var) -> Result<Var> {
    let h = linear(p, &format!("{prefix}.fc1"), x)?.gelu();
    linear(p, &format!("{prefix}.fc2"), &h)
}

/// Scaled dot-product attention over already-projected `q: [n, d]` and
/// `k, v: [m, d]`, split into `n_heads` column groups. `mask` is an additive
/// `[n, m]` constant. Returns the concatenated head outputs and the
/// `[n_heads, n, m]` weights.
fn attend(
    q: &Var,
    k: &Var,
    v: &Var,
    n_heads: usize,
    mask: Option<&Var>,
) -> Result<(Var, Vec<f64>)> {
    let d = q.shape()[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::new();
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                q.narrow(1, h * dh, dh)?,
                k.narrow(1, h * dh, dh)?,
                v.narrow(1, h * dh, dh)?,
            )
        };
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let a = scores.softmax(1)?;
        weights.extend_from_slice(a.value().data());
        heads.push(a.matmul(&vh)?);
    }
    let out = if n_heads == 1 {
        heads.pop().expect("one head")
    } else {
        Var::concat(&heads, 1)?
    };
    Ok((out, weights))
}

/// Splits a `[C, H, W]` image into row-major `[S, P*P*C]` patch vectors.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if image.shape() != [c, s, s] {
        return Err(OclipError::Dimension {
            op: "encode_image",
            lhs: image.shape().to_vec(),
            rhs: vec![c, s, s],
        });
    }
    let g = s / p;
    let mut data = Vec::with_capacity(image.numel());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * s + gy * p + y) * s + gx * p;
                    data.extend_from_slice(&image.data()[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, p * p * c], data)
}

pub fn encode_image(image: &Tensor, p: &BoundParams, config: &ModelConfig) -> Result<EncodedImage> {
    let patches = p.tape().constant(patchify(image, config)?);
    let x = linear(p, "image.patch_proj", &patches)?.add(p.var("image.pos_embed")?)?;
    let h = norm(p, "image.block.ln_attn", &x)?;
    let q = linear(p, "image.block.attn.q", &h)?;
    let k = linear(p, "image.block.attn.k", &h)?;
    let v = linear(p, "image.block.attn.v", &h)?;
    let (a, weights) = attend(&q, &k, &v, config.n_heads, None)?;
    let x = x.add(&linear(p, "image.block.attn.o", &a)?)?;
    let h = norm(p, "image.block.ln_ffn", &x)?;
    let x = x.add(&ffn(p, "image.block.ffn", &h)?)?;
    let ie = norm(p, "image.ln_final", &x)?;
    let s = config.num_patches();
    Ok(EncodedImage {
        ie,
        attn: Tensor::new(vec![config.n_heads, s, s], weights)?,
    })
}

/// Additive key mask hiding PAD slots of one instance: `[k_max, k_max]`.
fn pad_mask(valid_len: usize, k_max: usize) -> Tensor {
    let mut m = Tensor::zeros(&[k_max, k_max]);
    for row in m.data_mut().chunks_mut(k_max) {
        row[valid_len..].iter_mut().for_each(|v| *v = MASKED_SCORE);
    }
    m
}

pub fn encode_text(
    instances: &[TextInstanceEncoding],
    p: &BoundParams,
    config: &ModelConfig,
) -> Result<Var> {
    if instances.is_empty() {
        return Err(OclipError::Contract(
            "encode_text needs at least one instance".into(),
        ));
    }
    for inst in instances {
        inst.validate(config)?;
    }
    let (n, k) = (instances.len(), config.k_max);
    let tape = p.tape();

    let ids: Vec<usize> = instances
        .iter()
        .flat_map(|i| i.char_ids.iter().copied())
        .collect();
    let chars = p.var("text.char_embed")?.embedding_gather(&ids)?;
    let pe = p.var("text.pos_embed")?;
    let pe_tiled = if n == 1 {
        pe.clone()
    } else {
        Var::concat(&vec![pe.clone(); n], 0)?
    };
    let mut x = chars.add(&pe_tiled)?;

    let masks: Vec<Var> = instances
        .iter()
        .map(|i| tape.constant(pad_mask(i.valid_len, k)))
        .collect();
    for l in 0..config.n_enc_layers {
        let pre = format!("text.layer{l}");
        let h = norm(p, &format!("{pre}.ln_attn"), &x)?;
        let q = linear(p, &format!("{pre}.attn.q"), &h)?;
        let kk = linear(p, &format!("{pre}.attn.k"), &h)?;
        let v = linear(p, &format!("{pre}.attn.v"), &h)?;
        let mut per_instance = Vec::with_capacity(n);
        for (i, mask) in masks.iter().enumerate() {
            let rows = |t: &Var| t.narrow(0, i * k, k);
            let (a, _) = attend(
                &rows(&q)?,
                &rows(&kk)?,
                &rows(&v)?,
                config.n_heads,
                Some(mask),
            )?;
            per_instance.push(a);
        }
        let a = if n == 1 {
            per_instance.pop().expect("one instance")
        } else {
            Var::concat(&per_instance, 0)?
        };
        x = x.add(&linear(p, &format!("{pre}.attn.o"), &a)?)?;
        let h = norm(p, &format!("{pre}.ln_ffn"), &x)?;
        x = x.add(&ffn(p, &format!("{pre}.ffn"), &h)?)?;
    }
    let x = norm(p, "text.ln_final", &x)?;

    // Mean over each instance's valid character slots.
    let mut pool = Tensor::zeros(&[n, n * k]);
    for (i, inst) in instances.iter().enumerate() {
        let w = 1.0 / inst.valid_len as f64;
        pool.data_mut()[i * n * k + i * k..i * n * k + i * k + inst.valid_len]
            .iter_mut()
            .for_each(|v| *v = w);
    }
    tape.constant(pool).matmul(&x)
}

pub fn decode(te: &Var, ie: &Var, p: &BoundParams, config: &ModelConfig) -> Result<Decoded> {
    let (n, s) = (te.shape()[0], ie.shape()[0]);
    if te.shape()[1] != config.d_model || ie.shape()[1] != config.d_model {
        return Err(OclipError::Dimension {
            op: "decode",
            lhs: te.shape(),
            rhs: ie.shape(),
        });
    }
    let mut x = te.clone();
    let mut weights = Vec::with_capacity(config.n_dec_layers * config.n_heads * n * s);
    for l in 0..config.n_dec_layers {
        let pre = format!("decoder.layer{l}");
        let h = norm(p, &format!("{pre}.ln_attn"), &x)?;
        let q = linear(p, &format!("{pre}.attn.q"), &h)?;
        let k = linear(p, &format!("{pre}.attn.k"), ie)?;
        let v = linear(p, &format!("{pre}.attn.v"), ie)?;
        let (a, w) = attend(&q, &k, &v, config.n_heads, None)?;
        weights.extend(w);
        x = x.add(&linear(p, &format!("{pre}.attn.o"), &a)?)?;
        let h = norm(p, &format!("{pre}.ln_ffn"), &x)?;
        x = x.add(&ffn(p, &format!("{pre}.ffn"), &h)?)?;
    }
    Ok(Decoded {
        dec_out: norm(p, "decoder.ln_final", &x)?,
        attn: Tensor::new(vec![config.n_dec_layers, config.n_heads, n, s], weights)?,
    })
}

/// Affine masked-character head: `[n, d] -> [n, vocab_size]`.
pub fn predict_masked(dec_out: &Var, p: &BoundParams) -> Result<Var> {
    linear(p, "head", dec_out)
}

/// Unit-norm image and text-set vectors for the contrastive loss: the mean
/// image embedding and the mean instance embedding, each L2-normalized.
pub fn pool_for_contrastive(ie: &Var, te: &Var) -> Result<(Var, Var)> {
    Ok((ie.mean(0)?.l2_normalize(0)?, te.mean(0)?.l2_normalize(0)?))
}

pub fn forward_sample(
    input: &ModelInput,
    p: &BoundParams,
    config: &ModelConfig,
    options: ForwardOptions,
) -> Result<SampleOutput> {
    let image = encode_image(&input.image, p, config)?;
    let te = encode_text(&input.instances, p, config)?;
    let (masked_logits, attn) = if options.use_decoder {
        let dec = decode(&te, &image.ie, p, config)?;
        (predict_masked(&dec.dec_out, p)?, Some(dec.attn))
    } else {
        (predict_masked(&te, p)?, None)
    };
    let (img_vec, txt_vec) = pool_for_contrastive(&image.ie, &te)?;
    Ok(SampleOutput {
        masked_logits,
        img_vec,
        txt_vec,
        attn,
        te,
    })
}

/// Forward pass over `N` (image, instance-set) pairs on one tape.
pub fn forward(
    batch: &[ModelInput],
    p: &BoundParams,
    config: &ModelConfig,
    options: ForwardOptions,
) -> Result<Vec<SampleOutput>> {
    if batch.is_empty() {
        return Err(OclipError::Contract(
            "forward needs a nonempty batch".into(),
        ));
    }
    batch
        .iter()
        .map(|input| {
            if input.instances.iter().any(|i| i.mask_pos.is_none()) {
                return Err(OclipError::Contract(
                    "every instance must carry exactly one mask".into(),
                ));
            }
            forward_sample(input, p, config, options)
        })
        .collect()
}

#[cfg(test)]
mod tests;
