//! Command-line front end. Every command is a plain function over parsed
//! arguments so the binary stays a thin shell.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{OclipError, Result};
use crate::eval::{inspect_attention, normalize_levels, pgm, retrieval_accuracy, AttnSelect};
use crate::gradcheck::grad_check_model;
use crate::model::{CharVocab, ModelConfig, DEFAULT_ALPHABET, PAD};
use crate::rng::SplitMix64;
use crate::synthdata::{
    filter_manifest_stream, fnv1a64, mask_instance, read_corpus, render_corpus, write_corpus,
    GenConfig, Sample,
};
use crate::trainer::{run_training, Checkpoint, RunOutputs, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "oclip",
    version,
    about = "Scene-text vision-language pre-training at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus and print its digest.
    GenData(GenDataArgs),
    /// Train from scratch on a corpus.
    Pretrain(PretrainArgs),
    /// Compare backpropagated gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Write decoder attention heatmaps for one sample.
    InspectAttn(InspectArgs),
    /// Top-1 image/text retrieval accuracy.
    EvalRetrieval(RetrievalArgs),
    /// Drop low-confidence records from an OCR manifest.
    FilterManifest(FilterArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Instances per image, `MIN-MAX` or a single count.
    #[arg(long, default_value = "2-4")]
    pub instances: String,
    #[arg(long, default_value = DEFAULT_ALPHABET)]
    pub alphabet: String,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Drop the batch contrastive loss.
    #[arg(long)]
    pub no_bcl: bool,
    /// Bypass the decoder and classify from the text embeddings.
    #[arg(long)]
    pub no_vtd: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `model.ckpt` and `metrics.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    /// JSON model config; the image size always follows the corpus.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// JSON model config; defaults to the tiny preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Decoder layer; the last one by default.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Single head; the mean over heads by default.
    #[arg(long)]
    pub head: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub det_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    pub rec_thresh: f64,
}

/// Process exit status for an error: 2 for bad invocations, 1 otherwise.
pub fn exit_code(err: &OclipError) -> i32 {
    match err {
        OclipError::Usage(_) => 2,
        _ => 1,
    }
}

/// Runs one command, writing results to `out`. Returns whether the
/// command's postcondition held.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Pretrain(a) => pretrain(&a, out),
        Command::GradCheck(a) => grad_check(&a, out),
        Command::InspectAttn(a) => inspect_attn(&a, out),
        Command::EvalRetrieval(a) => eval_retrieval(&a, out),
        Command::FilterManifest(a) => filter_manifest(&a, out),
    }
}

fn parse_range(spec: &str) -> Result<(usize, usize)> {
    let bad = || OclipError::Usage(format!("--instances expects N or MIN-MAX, got {spec:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    match spec.split_once('-') {
        Some((lo, hi)) => Ok((num(lo)?, num(hi)?)),
        None => {
            let n = num(spec)?;
            Ok((n, n))
        }
    }
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<bool> {
    let (min_instances, max_instances) = parse_range(&a.instances)?;
    let config = GenConfig {
        image_size: a.image_size,
        min_instances,
        max_instances,
        alphabet: a.alphabet.clone(),
        ..GenConfig::default()
    };
    config
        .validate()
        .map_err(|e| OclipError::Usage(e.to_string()))?;
    let samples = render_corpus(a.seed, a.count, &config)?;
    let mut bytes = Vec::new();
    write_corpus(&mut bytes, &samples)?;
    std::fs::write(&a.out, &bytes)?;
    writeln!(out, "samples {}", samples.len())?;
    writeln!(out, "digest {:016x}", fnv1a64(&bytes))?;
    Ok(true)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    read_corpus(BufReader::new(File::open(path)?))
}

fn read_model_config(path: Option<&Path>, fallback: ModelConfig) -> Result<ModelConfig> {
    match path {
        Some(p) => Ok(serde_json::from_reader(BufReader::new(File::open(p)?))?),
        None => Ok(fallback),
    }
}

fn pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<bool> {
    let corpus = load_corpus(&a.corpus)?;
    let first = corpus
        .first()
        .ok_or_else(|| OclipError::Usage("corpus is empty".into()))?;
    let mut model = read_model_config(a.config.as_deref(), ModelConfig::default())?;
    model.image_size = first.size;
    if corpus.iter().any(|s| s.size != first.size) {
        return Err(OclipError::Usage("corpus mixes image sizes".into()));
    }
    model
        .validate()
        .map_err(|e| OclipError::Usage(e.to_string()))?;

    let mut train = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        fraction: a.fraction,
        use_bcl: !a.no_bcl,
        use_decoder: !a.no_vtd,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(lr) = a.lr {
        train.adam.lr_init = lr;
    }
    train.validate()?;

    std::fs::create_dir_all(&a.out)?;
    let outputs = RunOutputs {
        checkpoint_every: Some(a.checkpoint_every),
        ..RunOutputs::in_dir(&a.out)
    };
    let mut trainer = Trainer::new(model, train)?;
    log::info!("training {} steps on {} samples", a.steps, corpus.len());
    let history = run_training(&mut trainer, &corpus, &outputs)?;
    let last = history.last().expect("at least one step");
    writeln!(out, "steps {}", history.len())?;
    writeln!(
        out,
        "final l_cls {:.6} l_bc {:.6} total {:.6} acc {:.4}",
        last.l_cls, last.l_bc, last.total, last.acc
    )?;
    writeln!(out, "checkpoint {}", outputs.checkpoint.display())?;
    writeln!(out, "metrics {}", outputs.metrics.display())?;
    Ok(true)
}

fn grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<bool> {
    let config = read_model_config(a.config.as_deref(), ModelConfig::tiny())?;
    let reports = grad_check_model(&config, a.seed, a.tolerance)?;
    let mut failed = 0;
    for r in &reports {
        writeln!(
            out,
            "{} {} max_rel_err {:.3e} ({} values)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.numel
        )?;
        failed += usize::from(!r.passed);
    }
    writeln!(
        out,
        "{} of {} groups within tolerance {:e}",
        reports.len() - failed,
        reports.len(),
        a.tolerance
    )?;
    Ok(failed == 0)
}

fn load_for_eval(checkpoint: &Path, corpus: &Path) -> Result<(Checkpoint, Vec<Sample>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let samples = load_corpus(corpus)?;
    if let Some(s) = samples.iter().find(|s| s.size != ck.model.image_size) {
        return Err(OclipError::Usage(format!(
            "corpus image size {} does not match the model's {}",
            s.size, ck.model.image_size
        )));
    }
    Ok((ck, samples))
}

fn inspect_attn(a: &InspectArgs, out: &mut dyn Write) -> Result<bool> {
    let (ck, samples) = load_for_eval(&a.checkpoint, &a.corpus)?;
    let sample = samples.get(a.sample).ok_or_else(|| {
        OclipError::Usage(format!(
            "sample {} out of range (corpus has {})",
            a.sample,
            samples.len()
        ))
    })?;
    let config = &ck.model;
    let vocab = CharVocab::new(&config.alphabet)?;
    // Each instance draws its mask from its own text, so its output does
    // not depend on which other instances are present.
    let queries = sample
        .instances
        .iter()
        .map(|t| {
            let mut rng = SplitMix64::new(a.mask_seed ^ fnv1a64(t.text.as_bytes()));
            mask_instance(&t.text, &vocab, config.k_max, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let select = AttnSelect {
        layer: a.layer,
        head: a.head,
    };
    let found = inspect_attention(&ck.params, config, &sample.image_tensor(), &queries, select)
        .map_err(|e| match e {
            OclipError::Index { .. } => OclipError::Usage(e.to_string()),
            other => other,
        })?;

    std::fs::create_dir_all(&a.out_dir)?;
    let side = sample.size;
    let mut panels = vec![sample.pixels.clone()];
    for (i, ((map, q), inst)) in found
        .maps
        .iter()
        .zip(&queries)
        .zip(&sample.instances)
        .enumerate()
    {
        std::fs::write(a.out_dir.join(format!("instance_{i}.pgm")), map.to_pgm())?;
        let pos = q.mask_pos.expect("masked query");
        let target = symbol_name(&vocab, q.mask_target.expect("masked query"));
        let predicted = symbol_name(&vocab, found.predicted[i]);
        let mut side_car =
            BufWriter::new(File::create(a.out_dir.join(format!("instance_{i}.txt")))?);
        writeln!(side_car, "text {}", inst.text)?;
        writeln!(
            side_car,
            "masked {}",
            vocab.decode(&q.char_ids[..q.valid_len])
        )?;
        writeln!(side_car, "mask_pos {pos}")?;
        writeln!(side_car, "target {target}")?;
        writeln!(side_car, "predicted {predicted}")?;
        writeln!(side_car, "box {:?}", inst.bbox)?;
        writeln!(side_car, "mass_in_box {:.6}", map.mass_in(&inst.bbox))?;
        writeln!(
            side_car,
            "locality_ratio {:.6}",
            map.locality_ratio(&inst.bbox)
        )?;
        side_car.flush()?;
        writeln!(
            out,
            "instance {i} {} masked@{pos} target {target} predicted {predicted} locality {:.3}",
            inst.text,
            map.locality_ratio(&inst.bbox)
        )?;
        panels.push(normalize_levels(map.pixels.data()));
    }

    // Image followed by every heatmap, left to right.
    let width = side * panels.len();
    let mut composite = vec![0u8; width * side];
    for (k, panel) in panels.iter().enumerate() {
        for y in 0..side {
            composite[y * width + k * side..y * width + (k + 1) * side]
                .copy_from_slice(&panel[y * side..(y + 1) * side]);
        }
    }
    std::fs::write(
        a.out_dir.join("composite.pgm"),
        pgm(width, side, &composite),
    )?;
    Ok(true)
}

fn symbol_name(vocab: &CharVocab, id: usize) -> String {
    match vocab.symbol(id) {
        Some(c) => c.to_string(),
        None if id == PAD => "[PAD]".into(),
        None => "[MASK]".into(),
    }
}

fn eval_retrieval(a: &RetrievalArgs, out: &mut dyn Write) -> Result<bool> {
    let (ck, samples) = load_for_eval(&a.checkpoint, &a.corpus)?;
    let r = retrieval_accuracy(&ck.params, &ck.model, &samples, a.batch, a.mask_seed)?;
    writeln!(out, "batches {} pairs {}", r.batches, r.pairs)?;
    writeln!(out, "i2t {:.6}", r.image_to_text)?;
    writeln!(out, "t2i {:.6}", r.text_to_image)?;
    Ok(true)
}

fn filter_manifest(a: &FilterArgs, out: &mut dyn Write) -> Result<bool> {
    let reader = BufReader::new(File::open(&a.input)?);
    let writer = BufWriter::new(File::create(&a.out)?);
    let s = filter_manifest_stream(reader, writer, a.det_thresh, a.rec_thresh)?;
    writeln!(out, "kept {}", s.kept)?;
    writeln!(out, "dropped {}", s.dropped)?;
    writeln!(out, "malformed {}", s.malformed)?;
    writeln!(out, "images_kept {}", s.images_kept)?;
    writeln!(out, "images_dropped {}", s.images_dropped)?;
    Ok(true)
}
