//! Finite-difference verification of the full training objective.

use crate::error::{OclipError, Result};
use crate::model::{forward, CharVocab, ForwardOptions, ModelConfig, ModelParams, TEMPERATURE};
use crate::objectives::{batch_contrastive_loss, combine, masked_char_loss};
use crate::rng::SplitMix64;
use crate::synthdata::{make_batch, render_corpus, Batch, GenConfig};
use crate::tensor::{relative_error, Tape, Tensor, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative error over one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn objective(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Batch,
    tape: &Tape,
    grad: bool,
) -> Result<(Var, Vec<Var>)> {
    let bound = params.bind(tape, grad);
    let outs = forward(&batch.inputs, &bound, config, ForwardOptions::default())?;
    let logits: Vec<Var> = outs.iter().map(|o| o.masked_logits.clone()).collect();
    let l_cls = masked_char_loss(&logits, &batch.mask_targets())?;
    let d = config.d_model;
    let stack = |vs: Vec<&Var>| -> Result<Var> {
        let rows = vs
            .iter()
            .map(|v| v.reshape(&[1, d]))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&rows, 0)
    };
    let img = stack(outs.iter().map(|o| &o.img_vec).collect())?;
    let txt = stack(outs.iter().map(|o| &o.txt_vec).collect())?;
    let l_bc = batch_contrastive_loss(&img, &txt, bound.var(TEMPERATURE)?)?;
    let total = combine(&l_cls, Some(&l_bc), Vec::new())?.total;
    Ok((total, bound.vars().to_vec()))
}

/// Two rendered samples sized for `config`, every instance masked once.
pub fn check_batch(config: &ModelConfig, seed: u64) -> Result<Batch> {
    let gen = GenConfig {
        image_size: config.image_size,
        max_instances: 3,
        max_len: 4.min(config.k_max),
        min_len: 2.min(config.k_max),
        alphabet: config.alphabet.clone(),
        ..GenConfig::default()
    };
    let samples = render_corpus(seed, 2, &gen)?;
    let refs: Vec<_> = samples.iter().collect();
    let vocab = CharVocab::new(&config.alphabet)?;
    make_batch(&refs, 1.0, &mut SplitMix64::new(seed), &vocab, config.k_max)
}

/// Compares the backpropagated gradient of the total loss against central
/// differences for every scalar of every parameter tensor.
pub fn grad_check_model(
    config: &ModelConfig,
    seed: u64,
    tolerance: f64,
) -> Result<Vec<GroupReport>> {
    config.validate()?;
    if !(tolerance > 0.0) {
        return Err(OclipError::Usage("tolerance must be positive".into()));
    }
    let params = ModelParams::init(config, &mut SplitMix64::new(seed))?;
    let batch = check_batch(config, seed)?;

    let tape = Tape::new();
    let (loss, vars) = objective(&params, config, &batch, &tape, true)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |p: &ModelParams| -> Result<f64> {
        let tape = Tape::new();
        Ok(objective(p, config, &batch, &tape, false)?.0.item())
    };
    let mut work = params.clone();
    let mut reports = Vec::with_capacity(params.len());
    for (i, name) in params.names().iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..params.tensors()[i].numel() {
            let orig = params.tensors()[i].data()[j];
            work.tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
        reports.push(GroupReport {
            name: name.clone(),
            numel: params.tensors()[i].numel(),
            max_rel_err: worst,
            passed: worst <= tolerance,
        });
    }
    Ok(reports)
}
