use std::collections::HashMap;

use super::ModelConfig;
use crate::error::{OclipError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

pub const TEMPERATURE: &str = "temperature";
pub const TEMPERATURE_MIN: f64 = 5e-3;
pub const TEMPERATURE_MAX: f64 = 5.0;

#[derive(Clone, Copy)]
enum Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = rows.
    Projection,
    /// normal(0, 0.02).
    Embedding,
    Zeros,
    Ones,
    Const(f64),
}

/// Named parameter tensors in a fixed, deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Shapes (and init rules) for every parameter of `config`, in storage order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let f = d * config.ffn_mult;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, i: usize, o: usize| {
        push(format!("{p}.weight"), vec![i, o], Init::Projection);
        push(format!("{p}.bias"), vec![o], Init::Zeros);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.gain"), vec![d], Init::Ones);
        push(format!("{p}.bias"), vec![d], Init::Zeros);
    };
    let block = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        norm(push, &format!("{p}.ln_attn"));
        for proj in ["q", "k", "v", "o"] {
            linear(push, &format!("{p}.attn.{proj}"), d, d);
        }
        norm(push, &format!("{p}.ln_ffn"));
        linear(push, &format!("{p}.ffn.fc1"), d, f);
        linear(push, &format!("{p}.ffn.fc2"), f, d);
    };

    linear(&mut push, "image.patch_proj", config.patch_dim(), d);
    push(
        "image.pos_embed".into(),
        vec![config.num_patches(), d],
        Init::Embedding,
    );
    block(&mut push, "image.block");
    norm(&mut push, "image.ln_final");

    push(
        "text.char_embed".into(),
        vec![config.vocab_size, d],
        Init::Embedding,
    );
    push(
        "text.pos_embed".into(),
        vec![config.k_max, d],
        Init::Embedding,
    );
    for l in 0..config.n_enc_layers {
        block(&mut push, &format!("text.layer{l}"));
    }
    norm(&mut push, "text.ln_final");

    for l in 0..config.n_dec_layers {
        block(&mut push, &format!("decoder.layer{l}"));
    }
    norm(&mut push, "decoder.ln_final");

    linear(&mut push, "head", d, config.vocab_size);
    push(
        TEMPERATURE.into(),
        vec![1],
        Init::Const(config.temperature_init),
    );
    out
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Projection => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.uniform(-bound, bound)).collect()
                }
                Init::Embedding => (0..n).map(|_| 0.02 * rng.normal()).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self::from_parts(names, tensors))
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            names,
            tensors,
            index,
        }
    }

    /// Builds parameters from named arrays, checking that exactly the names
    /// and shapes `config` expects are present.
    pub fn from_named(config: &ModelConfig, mut named: HashMap<String, Tensor>) -> Result<Self> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in layout(config) {
            let t = named
                .remove(&name)
                .ok_or_else(|| OclipError::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(OclipError::ShapeMismatch {
                    name,
                    stored: t.shape().to_vec(),
                    expected: shape,
                });
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(OclipError::Format(format!("unexpected parameter {extra}")));
        }
        Ok(Self::from_parts(names, tensors))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn temperature(&self) -> f64 {
        self.get(TEMPERATURE).map_or(f64::NAN, Tensor::item)
    }

    /// Pulls the temperature back into its allowed range.
    pub fn clamp_temperature(&mut self) {
        if let Some(t) = self.get_mut(TEMPERATURE) {
            let v = &mut t.data_mut()[0];
            *v = v.clamp(TEMPERATURE_MIN, TEMPERATURE_MAX);
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
            tape: tape.clone(),
        }
    }
}

/// Whether weight decay applies: everything except normalization gains,
/// biases, and the temperature.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain") || name == TEMPERATURE)
}

/// Parameters recorded on a tape, addressable by name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
    tape: Tape,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<&Var> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| OclipError::Contract(format!("no parameter named {name}")))
    }

    /// Vars in parameter storage order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}
