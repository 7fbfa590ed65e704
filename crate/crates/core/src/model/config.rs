use serde::{Deserialize, Serialize};

use crate::error::{OclipError, Result};

/// Default printable alphabet: upper-case Latin letters and digits.
pub const DEFAULT_ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Architectural hyperparameters.
///
/// Desk-scale defaults. The reference-scale setup uses a ResNet-50 backbone
/// on 512x512 inputs; here the backbone is a patch projection (`backbone:
/// "patch"`) on 64x64 grayscale canvases. Decoder depth (6) and the maximum
/// instance length (25) keep their reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub k_max: usize,
    pub alphabet: String,
    pub vocab_size: usize,
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub ffn_mult: usize,
    pub temperature_init: f64,
    pub backbone: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 6,
            k_max: 25,
            alphabet: DEFAULT_ALPHABET.to_string(),
            vocab_size: DEFAULT_ALPHABET.chars().count() + 2,
            channels: 1,
            image_size: 64,
            patch_size: 8,
            ffn_mult: 4,
            temperature_init: 0.07,
            backbone: "patch".to_string(),
        }
    }
}

impl ModelConfig {
    /// The gradient-check configuration: width 8, one head, two decoder
    /// layers, 32x32 canvases.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 1,
            n_enc_layers: 1,
            n_dec_layers: 2,
            image_size: 32,
            ffn_mult: 2,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of image embeddings, one per patch.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(OclipError::Contract(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.k_max == 0 || self.n_dec_layers == 0 || self.ffn_mult == 0 || self.channels == 0 {
            return fail("k_max, n_dec_layers, ffn_mult and channels must be positive".into());
        }
        if self.vocab_size != self.alphabet.chars().count() + 2 {
            return fail(format!(
                "vocab_size {} != alphabet size + 2 specials",
                self.vocab_size
            ));
        }
        if !(self.temperature_init > 0.0) {
            return fail("temperature_init must be positive".into());
        }
        if self.backbone != "patch" {
            return fail(format!("unsupported backbone {:?}", self.backbone));
        }
        Ok(())
    }
}
