//! C ABI over `oclip-core`.
//!
//! Every fallible function returns an [`OclipStatus`]; on failure the
//! message is kept per thread and can be copied out with
//! [`oclip_last_error`]. Models are opaque handles released with
//! [`oclip_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use oclip_core::eval::predict;
use oclip_core::model::{
    encode_image, encode_text, pool_for_contrastive, CharVocab, ForwardOptions, ModelConfig,
    ModelParams, TextInstanceEncoding, PAD,
};
use oclip_core::rng::SplitMix64;
use oclip_core::synthdata::{
    filter_manifest_stream, fnv1a64, mask_at, render_corpus, write_corpus, GenConfig,
};
use oclip_core::tensor::{Tape, Tensor};
use oclip_core::trainer::{cosine_lr, Checkpoint};
use oclip_core::OclipError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OclipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Version = 5,
    Truncated = 6,
    ShapeMismatch = 7,
    Divergence = 8,
    Contract = 9,
    Panic = 10,
}

/// Loaded model parameters.
pub struct OclipModel {
    config: ModelConfig,
    params: ModelParams,
    vocab: CharVocab,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OclipFilterSummary {
    pub kept: usize,
    pub dropped: usize,
    pub malformed: usize,
    pub images_kept: usize,
    pub images_dropped: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &OclipError) -> OclipStatus {
    match err {
        OclipError::Io(_) => OclipStatus::Io,
        OclipError::Format(_) | OclipError::Json(_) => OclipStatus::Format,
        OclipError::Version { .. } => OclipStatus::Version,
        OclipError::Truncated(_) => OclipStatus::Truncated,
        OclipError::ShapeMismatch { .. } => OclipStatus::ShapeMismatch,
        OclipError::Divergence(_) => OclipStatus::Divergence,
        OclipError::Usage(_) | OclipError::Index { .. } | OclipError::Dimension { .. } => {
            OclipStatus::InvalidArgument
        }
        OclipError::Contract(_) => OclipStatus::Contract,
    }
}

enum Failure {
    Null(&'static str),
    Core(OclipError),
}

impl From<OclipError> for Failure {
    fn from(e: OclipError) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OclipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OclipStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OclipStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            OclipStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(OclipError::Usage(format!("{what} is not UTF-8"))))
}

unsafe fn model_ref<'a>(m: *const OclipModel) -> Result<&'a OclipModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn image_from(
    model: &OclipModel,
    pixels: *const f64,
    len: usize,
) -> Result<Tensor, Failure> {
    if pixels.is_null() {
        return Err(Failure::Null("pixels"));
    }
    let c = &model.config;
    let shape = vec![c.channels, c.image_size, c.image_size];
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    Ok(Tensor::new(shape, data)?)
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn oclip_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oclip_model_load(
    path: *const c_char,
    out: *mut *mut OclipModel,
) -> OclipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = PathBuf::from(c_str(path, "path")?);
        let ck = Checkpoint::load(&path)?;
        let vocab = CharVocab::new(&ck.model.alphabet)?;
        *out = Box::into_raw(Box::new(OclipModel {
            config: ck.model,
            params: ck.params,
            vocab,
        }));
        Ok(())
    })
}

/// Freshly initialized default model for the given canvas size.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oclip_model_init(
    seed: u64,
    image_size: usize,
    out: *mut *mut OclipModel,
) -> OclipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let config = ModelConfig {
            image_size,
            ..ModelConfig::default()
        };
        config.validate()?;
        let params = ModelParams::init(&config, &mut SplitMix64::new(seed))?;
        let vocab = CharVocab::new(&config.alphabet)?;
        *out = Box::into_raw(Box::new(OclipModel {
            config,
            params,
            vocab,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn oclip_model_free(model: *mut OclipModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn oclip_model_vocab_size(model: *const OclipModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.vocab_size)
}

/// Side length in pixels of the square images the model expects.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn oclip_model_image_size(model: *const OclipModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.image_size)
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn oclip_model_embed_dim(model: *const OclipModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.d_model)
}

/// Masks character `mask_pos` of `text` and predicts it from the image.
/// `pixels` holds `image_size * image_size` gray values in [0, 1]. The
/// prediction is written as a Unicode scalar value, or 0 for PAD/MASK.
///
/// # Safety
/// Pointers must be valid; `pixels` must hold `n_pixels` values.
#[no_mangle]
pub unsafe extern "C" fn oclip_predict_masked(
    model: *const OclipModel,
    pixels: *const f64,
    n_pixels: usize,
    text: *const c_char,
    mask_pos: usize,
    out_symbol: *mut u32,
) -> OclipStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out_symbol.is_null() {
            return Err(Failure::Null("out_symbol"));
        }
        let image = image_from(m, pixels, n_pixels)?;
        let query = mask_at(c_str(text, "text")?, &m.vocab, m.config.k_max, mask_pos)?;
        let pred = predict(
            &m.params,
            &m.config,
            &image,
            vec![query],
            ForwardOptions::default(),
        )?;
        *out_symbol = match pred[0] {
            PAD => 0,
            id => m.vocab.symbol(id).map_or(0, u32::from),
        };
        Ok(())
    })
}

/// Unit-norm image vector and text-set vector (unmasked texts) used by the
/// contrastive loss. Both outputs need `oclip_model_embed_dim` slots.
///
/// # Safety
/// `texts` must point to `n_texts` NUL-terminated strings; outputs must be
/// writable for the embedding dimension.
#[no_mangle]
pub unsafe extern "C" fn oclip_embed(
    model: *const OclipModel,
    pixels: *const f64,
    n_pixels: usize,
    texts: *const *const c_char,
    n_texts: usize,
    image_vec: *mut f64,
    text_vec: *mut f64,
) -> OclipStatus {
    guard(|| {
        let m = model_ref(model)?;
        if texts.is_null() {
            return Err(Failure::Null("texts"));
        }
        if image_vec.is_null() || text_vec.is_null() {
            return Err(Failure::Null("output vector"));
        }
        let image = image_from(m, pixels, n_pixels)?;
        let mut instances = Vec::with_capacity(n_texts);
        for i in 0..n_texts {
            let s = c_str(*texts.add(i), "text")?;
            let ids = m.vocab.encode(s)?;
            if ids.is_empty() || ids.len() > m.config.k_max {
                return Err(OclipError::Usage(format!(
                    "text {i} length outside [1, {}]",
                    m.config.k_max
                ))
                .into());
            }
            let mut char_ids = vec![PAD; m.config.k_max];
            char_ids[..ids.len()].copy_from_slice(&ids);
            instances.push(TextInstanceEncoding {
                char_ids,
                valid_len: ids.len(),
                mask_pos: None,
                mask_target: None,
            });
        }
        let tape = Tape::new();
        let bound = m.params.bind(&tape, false);
        let ie = encode_image(&image, &bound, &m.config)?.ie;
        let te = encode_text(&instances, &bound, &m.config)?;
        let (iv, tv) = pool_for_contrastive(&ie, &te)?;
        let d = m.config.d_model;
        std::ptr::copy_nonoverlapping(iv.value().data().as_ptr(), image_vec, d);
        std::ptr::copy_nonoverlapping(tv.value().data().as_ptr(), text_vec, d);
        Ok(())
    })
}

/// Cosine-decayed learning rate at `step` of `total_steps`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oclip_cosine_lr(
    step: usize,
    total_steps: usize,
    lr_init: f64,
    lr_min: f64,
    out: *mut f64,
) -> OclipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = cosine_lr(step, total_steps, lr_init, lr_min)?;
        Ok(())
    })
}

/// Renders `count` samples with default generator settings at
/// `image_size` and writes the corpus file. The FNV-1a digest of the file
/// bytes goes to `out_digest` when it is not null.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn oclip_generate_corpus(
    seed: u64,
    count: usize,
    image_size: usize,
    path: *const c_char,
    out_digest: *mut u64,
) -> OclipStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let config = GenConfig {
            image_size,
            ..GenConfig::default()
        };
        config.validate()?;
        let samples = render_corpus(seed, count, &config)?;
        let mut bytes = Vec::new();
        write_corpus(&mut bytes, &samples)?;
        std::fs::write(path, &bytes).map_err(OclipError::from)?;
        if !out_digest.is_null() {
            *out_digest = fnv1a64(&bytes);
        }
        Ok(())
    })
}

/// Filters a manifest file by detection and recognition confidence.
///
/// # Safety
/// Paths must be NUL-terminated strings; `summary` null or writable.
#[no_mangle]
pub unsafe extern "C" fn oclip_filter_manifest(
    in_path: *const c_char,
    out_path: *const c_char,
    det_thresh: f64,
    rec_thresh: f64,
    summary: *mut OclipFilterSummary,
) -> OclipStatus {
    guard(|| {
        let input = File::open(c_str(in_path, "in_path")?).map_err(OclipError::from)?;
        let output = File::create(c_str(out_path, "out_path")?).map_err(OclipError::from)?;
        let s = filter_manifest_stream(
            BufReader::new(input),
            BufWriter::new(output),
            det_thresh,
            rec_thresh,
        )?;
        if !summary.is_null() {
            *summary = OclipFilterSummary {
                kept: s.kept,
                dropped: s.dropped,
                malformed: s.malformed,
                images_kept: s.images_kept,
                images_dropped: s.images_dropped,
            };
        }
        Ok(())
    })
}
