use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamHyper, OptimState};
use super::checkpoint::Checkpoint;
use super::schedule::cosine_lr;
use crate::error::{OclipError, Result};
use crate::model::{forward, CharVocab, ForwardOptions, ModelConfig, ModelParams, TEMPERATURE};
use crate::objectives::{argmax_rows, batch_contrastive_loss, combine, masked_char_loss};
use crate::rng::SplitMix64;
use crate::synthdata::{check_fraction, make_batch, subset_annotations, Sample};
use crate::tensor::{Tape, Var};

/// Optimization hyperparameters. Desk-scale defaults: batch 8, 500 steps
/// (the reference recipe uses batch 640 for 100 epochs on 8 GPUs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Fraction of each sample's instances that stay annotated.
    pub fraction: f64,
    pub use_bcl: bool,
    pub use_decoder: bool,
    /// Seeds parameter init, then batch selection and masking.
    pub seed: u64,
    pub lr_min: f64,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            fraction: 1.0,
            use_bcl: true,
            use_decoder: true,
            seed: 0,
            lr_min: 0.0,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.fraction)?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(OclipError::Usage(
                "steps and batch size must be positive".into(),
            ));
        }
        if !(self.adam.lr_init >= 0.0) || !(self.lr_min >= 0.0) {
            return Err(OclipError::Usage(
                "learning rates must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

const ANNOTATION_SALT: u64 = 0xA11_0CA7E;

/// The annotated subset of `sample` that a run with `seed` trains on. The
/// subset is fixed for the whole run, so with `fraction < 1` the remaining
/// instances never receive supervision.
pub fn annotated_view(sample: &Sample, fraction: f64, seed: u64) -> Result<Sample> {
    check_fraction(fraction)?;
    if fraction >= 1.0 {
        return Ok(sample.clone());
    }
    let mut rng = SplitMix64::new(seed ^ sample.seed.rotate_left(32) ^ ANNOTATION_SALT);
    subset_annotations(sample, fraction, &mut rng)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_cls: f64,
    pub l_bc: f64,
    pub total: f64,
    pub acc: f64,
    pub lr: f64,
}

pub struct Trainer {
    model: ModelConfig,
    train: TrainConfig,
    params: ModelParams,
    optim: OptimState,
    rng: SplitMix64,
    step: usize,
    vocab: CharVocab,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let mut rng = SplitMix64::new(train.seed);
        let params = ModelParams::init(&model, &mut rng)?;
        let optim = OptimState::new(&params, train.adam.clone());
        Ok(Self {
            vocab: CharVocab::new(&model.alphabet)?,
            model,
            train,
            params,
            optim,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        Ok(Self {
            vocab: CharVocab::new(&ck.model.alphabet)?,
            model: ck.model,
            train: ck.train,
            params: ck.params,
            optim: ck.optim,
            rng: SplitMix64::new(ck.rng_state),
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng_state: self.rng.state(),
            params: self.params.clone(),
            optim: self.optim.clone(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    /// Completed steps.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.train.steps
    }

    /// Draws a batch, computes the objective, backpropagates and applies one
    /// AdamW update. On error the parameters and optimizer are untouched.
    pub fn step(&mut self, corpus: &[Sample]) -> Result<StepMetrics> {
        if corpus.is_empty() {
            return Err(OclipError::Contract("training corpus is empty".into()));
        }
        if self.is_done() {
            return Err(OclipError::Contract(format!(
                "all {} steps already taken",
                self.train.steps
            )));
        }
        let lr = cosine_lr(
            self.step,
            self.train.steps,
            self.train.adam.lr_init,
            self.train.lr_min,
        )?;

        let mut rng = self.rng;
        let picked: Vec<&Sample> = if corpus.len() <= self.train.batch_size {
            corpus.iter().collect()
        } else {
            rng.choose_indices(corpus.len(), self.train.batch_size)
                .into_iter()
                .map(|i| &corpus[i])
                .collect()
        };
        let batch = make_batch(
            &picked,
            self.train.fraction,
            &mut rng,
            &self.vocab,
            self.model.k_max,
        )?;

        let tape = Tape::new();
        let bound = self.params.bind(&tape, true);
        let options = ForwardOptions {
            use_decoder: self.train.use_decoder,
        };
        let outs = forward(&batch.inputs, &bound, &self.model, options)?;
        let targets = batch.mask_targets();
        let logits: Vec<Var> = outs.iter().map(|o| o.masked_logits.clone()).collect();
        let correct = logits
            .iter()
            .zip(&targets)
            .flat_map(|(l, t)| {
                argmax_rows(&l.value())
                    .into_iter()
                    .zip(t.clone())
                    .map(|(p, t)| p == t)
                    .collect::<Vec<_>>()
            })
            .collect();
        let l_cls = masked_char_loss(&logits, &targets)?;
        let l_bc = if self.train.use_bcl {
            let d = self.model.d_model;
            let stack = |vs: Vec<&Var>| -> Result<Var> {
                let rows = vs
                    .iter()
                    .map(|v| v.reshape(&[1, d]))
                    .collect::<Result<Vec<_>>>()?;
                Var::concat(&rows, 0)
            };
            let img = stack(outs.iter().map(|o| &o.img_vec).collect())?;
            let txt = stack(outs.iter().map(|o| &o.txt_vec).collect())?;
            Some(batch_contrastive_loss(&img, &txt, bound.var(TEMPERATURE)?)?)
        } else {
            None
        };
        let objective = combine(&l_cls, l_bc.as_ref(), correct)?;
        let grads = tape.backward(&objective.total)?;
        let grads: Vec<_> = bound.vars().iter().map(|v| grads.get_or_zeros(v)).collect();
        adamw_step(&mut self.params, &grads, &mut self.optim, lr)?;

        self.rng = rng;
        let metrics = StepMetrics {
            step: self.step,
            l_cls: objective.breakdown.l_cls,
            l_bc: objective.breakdown.l_bc,
            total: objective.breakdown.total,
            acc: objective.breakdown.accuracy(),
            lr,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Save a checkpoint every `k` steps (and always at the end).
    pub checkpoint_every: Option<usize>,
}

impl RunOutputs {
    /// `model.ckpt` and `metrics.jsonl` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("model.ckpt"),
            metrics: dir.join("metrics.jsonl"),
            checkpoint_every: None,
        }
    }
}

/// Runs `trainer` to completion, writing one JSON line per step to the
/// metrics file. If a step diverges, the state before that step is saved
/// and the divergence error is returned.
pub fn run_training(
    trainer: &mut Trainer,
    corpus: &[Sample],
    out: &RunOutputs,
) -> Result<Vec<StepMetrics>> {
    // A fresh run starts a fresh log; a resumed one appends.
    let fresh = trainer.step_index() == 0;
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&out.metrics)?,
    );
    let mut history = Vec::new();
    while !trainer.is_done() {
        let metrics = match trainer.step(corpus) {
            Ok(m) => m,
            Err(e @ OclipError::Divergence(_)) => {
                log.flush()?;
                trainer.checkpoint().save(&out.checkpoint)?;
                log::error!("diverged at step {}: {e}", trainer.step_index());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        serde_json::to_writer(&mut log, &metrics)?;
        log.write_all(b"\n")?;
        log::debug!(
            "step {} total {:.4} acc {:.3} lr {:.2e}",
            metrics.step,
            metrics.total,
            metrics.acc,
            metrics.lr
        );
        history.push(metrics);
        if let Some(k) = out.checkpoint_every {
            if k > 0 && trainer.step_index().is_multiple_of(k) && !trainer.is_done() {
                trainer.checkpoint().save(&out.checkpoint)?;
            }
        }
    }
    log.flush()?;
    trainer.checkpoint().save(&out.checkpoint)?;
    Ok(history)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
