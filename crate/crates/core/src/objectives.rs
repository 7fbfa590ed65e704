//! Training losses: masked-character cross-entropy, the symmetric batch
//! contrastive loss over image/text-set similarities, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{OclipError, Result};
use crate::tensor::{Tensor, Var};

/// Loss values of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_bc: f64,
    pub total: f64,
    /// Per masked instance: whether argmax of its logits hit the target.
    pub correct: Vec<bool>,
}

impl LossBreakdown {
    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            return 0.0;
        }
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }
}

/// Sum of the two loss values; a non-finite input means training diverged.
pub fn total_loss(l_cls: f64, l_bc: f64) -> Result<LossBreakdown> {
    if !l_cls.is_finite() {
        return Err(OclipError::Divergence("l_cls".into()));
    }
    if !l_bc.is_finite() {
        return Err(OclipError::Divergence("l_bc".into()));
    }
    Ok(LossBreakdown {
        l_cls,
        l_bc,
        total: l_cls + l_bc,
        correct: Vec::new(),
    })
}

/// Mean cross-entropy over every masked instance of the batch, each
/// instance weighted equally regardless of which image it belongs to.
pub fn masked_char_loss(logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    if logits.len() != targets.len() {
        return Err(OclipError::Contract(format!(
            "{} logit blocks for {} target lists",
            logits.len(),
            targets.len()
        )));
    }
    let flat: Vec<usize> = targets.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Err(OclipError::Contract(
            "masked_char_loss over zero instances".into(),
        ));
    }
    let stacked = if logits.len() == 1 {
        logits[0].clone()
    } else {
        Var::concat(logits, 0)?
    };
    stacked.cross_entropy(&flat)
}

/// `logits[a][b] = img[a] · txt[b] / temperature`. Row `a` softmaxed gives
/// image-to-text probabilities; column `b` softmaxed gives text-to-image.
pub fn similarity_matrix(img_vecs: &Var, txt_vecs: &Var, temperature: &Var) -> Result<Var> {
    let t = temperature.value();
    if !t.is_scalar() || !(t.item() > 0.0) {
        return Err(OclipError::Contract(format!(
            "temperature must be a positive scalar, got {:?}",
            t.data()
        )));
    }
    img_vecs
        .matmul(&txt_vecs.transpose()?)?
        .div_scalar(temperature)
}

/// Symmetric InfoNCE with the diagonal as the positive pairs: image-to-text
/// cross-entropy plus text-to-image cross-entropy, each averaged over the
/// batch.
pub fn batch_contrastive_loss(img_vecs: &Var, txt_vecs: &Var, temperature: &Var) -> Result<Var> {
    let logits = similarity_matrix(img_vecs, txt_vecs, temperature)?;
    let n = logits.shape()[0];
    let diag: Vec<usize> = (0..n).collect();
    let i2t = logits.cross_entropy(&diag)?;
    let t2i = logits.transpose()?.cross_entropy(&diag)?;
    i2t.add(&t2i)
}

/// Recorded total objective plus its breakdown.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds `L = L_cls + L_bc` on the tape. With `l_bc = None` (contrastive
/// term disabled) the contrastive part is a constant zero.
pub fn combine(l_cls: &Var, l_bc: Option<&Var>, correct: Vec<bool>) -> Result<Objective> {
    let l_bc = match l_bc {
        Some(v) => v.clone(),
        None => l_cls.tape().constant(Tensor::scalar(0.0)),
    };
    let total = l_cls.add(&l_bc)?;
    let mut breakdown = total_loss(l_cls.item(), l_bc.item())?;
    breakdown.total = total.item();
    breakdown.correct = correct;
    Ok(Objective { total, breakdown })
}

/// Argmax of each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
