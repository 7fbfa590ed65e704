//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Runs without the libtest harness so the lines are always visible:
//! `cargo test -p oclip-core --test acceptance`.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use oclip_core::error::Result;
use oclip_core::eval::{masked_accuracy, mean_locality, retrieval_accuracy, AttnSelect};
use oclip_core::gradcheck::grad_check_model;
use oclip_core::model::{
    decode, encode_image, encode_text, predict_masked, CharVocab, ForwardOptions, ModelConfig,
    ModelParams, TextInstanceEncoding,
};
use oclip_core::objectives::{batch_contrastive_loss, combine, masked_char_loss};
use oclip_core::rng::SplitMix64;
use oclip_core::synthdata::{
    filter_manifest, fnv1a64, mask_instance, render_corpus, write_corpus, GenConfig,
    ManifestRecord, Sample,
};
use oclip_core::tensor::{finite_diff_check, Tape, Tensor, Var};
use oclip_core::trainer::{
    adamw_step, annotated_view, cosine_lr, AdamHyper, Checkpoint, OptimState, StepMetrics,
    TrainConfig, Trainer,
};

/// Outcome of one criterion.
struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn random_tensor(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| scale * rng.normal()).collect(),
    )
    .unwrap()
}

fn random_text(rng: &mut SplitMix64, alphabet: &[char], max_len: usize) -> String {
    let len = rng.range_inclusive(1, max_len);
    (0..len)
        .map(|_| alphabet[rng.below(alphabet.len() as u64) as usize])
        .collect()
}

/// Weighted sum, turning any op output into a scalar for gradient checks.
fn contract(v: &Var, weights: &Tensor) -> Result<Var> {
    let w = v.tape().constant(weights.clone());
    Ok(v.mul(&w)?.sum())
}

// 1. Finite-difference gradient checks.
fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let mut rng = SplitMix64::new(101);
    let x = random_tensor(&mut rng, &[3, 4], 1.0);
    let w = random_tensor(&mut rng, &[3, 4], 1.0);
    let w_row = random_tensor(&mut rng, &[4], 1.0);
    let other = random_tensor(&mut rng, &[4, 5], 1.0);
    let w_mm = random_tensor(&mut rng, &[3, 5], 1.0);
    let gain = random_tensor(&mut rng, &[4], 1.0);
    let bias = random_tensor(&mut rng, &[4], 1.0);
    let table = random_tensor(&mut rng, &[6, 4], 1.0);
    let w_gather = random_tensor(&mut rng, &[5, 4], 1.0);

    type Check = Box<dyn Fn(&Var) -> Result<Var>>;
    let ops: Vec<(&str, Tensor, Check)> = vec![
        ("matmul", x.clone(), {
            let (o, w) = (other.clone(), w_mm.clone());
            Box::new(move |v| contract(&v.matmul(&v.tape().constant(o.clone()))?, &w))
        }),
        ("softmax", x.clone(), {
            let w = w.clone();
            Box::new(move |v| contract(&v.softmax(1)?, &w))
        }),
        ("layer_norm", x.clone(), {
            let (g, b, w) = (gain.clone(), bias.clone(), w.clone());
            Box::new(move |v| {
                let t = v.tape();
                contract(
                    &v.layer_norm(&t.constant(g.clone()), &t.constant(b.clone()), 1e-5)?,
                    &w,
                )
            })
        }),
        (
            "cross_entropy",
            x.clone(),
            Box::new(|v| v.cross_entropy(&[0, 3, 1])),
        ),
        ("gelu", x.clone(), {
            let w = w.clone();
            Box::new(move |v| contract(&v.gelu(), &w))
        }),
        ("l2_normalize", x.clone(), {
            let w = w.clone();
            Box::new(move |v| contract(&v.l2_normalize(1)?, &w))
        }),
        ("mean", x.clone(), {
            let w = w_row.clone();
            Box::new(move |v| contract(&v.mean(0)?, &w))
        }),
        ("transpose+add_row", x.clone(), {
            let (b, w) = (bias.clone(), w.clone());
            Box::new(move |v| {
                let t = v.transpose()?.transpose()?;
                contract(&t.add_row(&v.tape().constant(b.clone()))?, &w)
            })
        }),
        ("concat+narrow", x.clone(), {
            let w = w.clone();
            Box::new(move |v| {
                let c = Var::concat(&[v.clone(), v.scale(2.0)], 0)?;
                contract(&c.narrow(0, 2, 3)?, &w)
            })
        }),
        ("div_scalar", Tensor::scalar(0.7), {
            let (xx, w) = (x.clone(), w.clone());
            Box::new(move |v| contract(&v.tape().constant(xx.clone()).div_scalar(v)?, &w))
        }),
        ("embedding_gather", table.clone(), {
            let w = w_gather.clone();
            Box::new(move |v| contract(&v.embedding_gather(&[1, 0, 5, 1, 3])?, &w))
        }),
    ];
    let mut worst_op: f64 = 0.0;
    let mut worst_name = "";
    for (name, input, f) in &ops {
        let err = finite_diff_check(f, input, 1e-5).unwrap();
        if err > worst_op {
            worst_op = err;
            worst_name = name;
        }
    }

    let reports = grad_check_model(&ModelConfig::tiny(), 0, 1e-4).unwrap();
    let worst_model = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let all_groups = reports.iter().all(|r| r.passed);
    let elapsed = started.elapsed();
    verdict(
        worst_op <= 1e-6 && all_groups && elapsed < Duration::from_secs(120),
        format!(
            "{} groups, model max rel err {worst_model:.2e} (<= 1e-4); ops max {worst_op:.2e} at {worst_name} (<= 1e-6); {:.1}s (< 120s)",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn random_instances(
    rng: &mut SplitMix64,
    vocab: &CharVocab,
    config: &ModelConfig,
    n: usize,
) -> Vec<TextInstanceEncoding> {
    (0..n)
        .map(|_| {
            let text = random_text(rng, vocab.symbols(), config.k_max);
            mask_instance(&text, vocab, config.k_max, rng).unwrap()
        })
        .collect()
}

fn setup_model(seed: u64) -> (ModelConfig, ModelParams, CharVocab) {
    let config = ModelConfig::default();
    let params = ModelParams::init(&config, &mut SplitMix64::new(seed)).unwrap();
    let vocab = CharVocab::new(&config.alphabet).unwrap();
    (config, params, vocab)
}

// 2. Decoder rows do not see each other.
fn query_independence() -> Verdict {
    let (config, params, vocab) = setup_model(7);
    let mut rng = SplitMix64::new(202);
    let side = config.image_size;
    let mut mismatches = 0;
    let mut rows = 0;
    for _ in 0..100 {
        let image = Tensor::new(
            vec![1, side, side],
            (0..side * side).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let n = rng.range_inclusive(2, 5);
        let instances = random_instances(&mut rng, &vocab, &config, n);

        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let ie = encode_image(&image, &p, &config).unwrap().ie;
        let te = encode_text(&instances, &p, &config).unwrap();
        let full = decode(&te, &ie, &p, &config).unwrap().dec_out.value();
        for (i, inst) in instances.iter().enumerate() {
            let te_i = encode_text(std::slice::from_ref(inst), &p, &config).unwrap();
            let alone = decode(&te_i, &ie, &p, &config).unwrap().dec_out.value();
            rows += 1;
            if full.row(i) != alone.row(0) {
                mismatches += 1;
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("100 inputs, {rows} query rows, {mismatches} not bit-identical to single-query decoding"),
    )
}

// 3. Mutating other instances leaves te_i and its prediction unchanged.
fn instance_independence() -> Verdict {
    let (config, params, vocab) = setup_model(8);
    let mut rng = SplitMix64::new(303);
    let side = config.image_size;
    let mut mismatches = 0;
    let trials = 100;
    for _ in 0..trials {
        let image = Tensor::new(
            vec![1, side, side],
            (0..side * side).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let n = rng.range_inclusive(2, 5);
        let mut instances = random_instances(&mut rng, &vocab, &config, n);
        let i = rng.below(n as u64) as usize;

        let run = |instances: &[TextInstanceEncoding]| {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let ie = encode_image(&image, &p, &config).unwrap().ie;
            let te = encode_text(instances, &p, &config).unwrap();
            let dec = decode(&te, &ie, &p, &config).unwrap();
            let logits = predict_masked(&dec.dec_out, &p).unwrap().value();
            (te.value().row(i).to_vec(), logits.row(i).to_vec())
        };
        let before = run(&instances);
        for (j, other) in instances.iter_mut().enumerate() {
            if j != i {
                *other = random_instances(&mut rng, &vocab, &config, 1)
                    .pop()
                    .unwrap();
            }
        }
        if run(&instances) != before {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{trials} mutations of sibling instances, {mismatches} changed te_i or its logits"),
    )
}

// 4. Loss structure.
fn loss_structure(corpus: &[Sample]) -> Verdict {
    let config = ModelConfig::default();
    let ln_v = (config.vocab_size as f64).ln();
    let mut trainer = Trainer::new(config.clone(), TrainConfig::default()).unwrap();
    let m = trainer.step(corpus).unwrap();
    let exact_sum = m.total == m.l_cls + m.l_bc;
    let untrained = (m.l_cls - ln_v).abs() <= 0.1 * ln_v;

    // Identical rows on both sides make every similarity equal.
    let tape = Tape::new();
    let n = 8;
    let same = tape.constant(Tensor::full(&[n, 4], 0.5));
    let temp = tape.constant(Tensor::scalar(0.07));
    let uniform = batch_contrastive_loss(&same, &same, &temp).unwrap().item();
    let uniform_err = (uniform - 2.0 * (n as f64).ln()).abs();

    let one = tape.constant(Tensor::new(vec![1, 3], vec![0.6, 0.8, 0.0]).unwrap());
    let single = batch_contrastive_loss(&one, &one, &temp).unwrap().item();

    let logits = tape.constant(random_tensor(&mut SplitMix64::new(5), &[3, 38], 1.0));
    let l_cls = masked_char_loss(&[logits], &[vec![2, 7, 30]]).unwrap();
    let l_bc = batch_contrastive_loss(&one, &one, &temp).unwrap();
    let obj = combine(&l_cls, Some(&l_bc), Vec::new()).unwrap();
    let combined_exact = obj.total.item() == l_cls.item() + l_bc.item();

    verdict(
        exact_sum && untrained && uniform_err <= 1e-9 && single == 0.0 && combined_exact,
        format!(
            "total == l_cls + l_bc: {}; untrained l_cls {:.4} vs ln V {:.4} (within 10%); uniform l_bc err {uniform_err:.1e} (<= 1e-9); N=1 l_bc {single}",
            exact_sum && combined_exact,
            m.l_cls,
            ln_v
        ),
    )
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Run {
    params: ModelParams,
    log: Vec<StepMetrics>,
    elapsed: Duration,
    masked_acc: f64,
}

fn overfit(corpus: &[Sample], fraction: f64) -> Run {
    let config = ModelConfig::default();
    let train = TrainConfig {
        fraction,
        ..TrainConfig::default()
    };
    let seed = train.seed;
    let started = Instant::now();
    let mut trainer = Trainer::new(config.clone(), train).unwrap();
    let mut log = Vec::new();
    while !trainer.is_done() {
        log.push(trainer.step(corpus).unwrap());
    }
    let elapsed = started.elapsed();
    let views: Vec<Sample> = corpus
        .iter()
        .map(|s| annotated_view(s, fraction, seed).unwrap())
        .collect();
    let masked_acc = masked_accuracy(trainer.params(), &config, &views, ForwardOptions::default())
        .unwrap()
        .accuracy();
    Run {
        params: trainer.params().clone(),
        log,
        elapsed,
        masked_acc,
    }
}

fn loss_decreases(log: &[StepMetrics]) -> (bool, f64, f64) {
    let totals: Vec<f64> = log.iter().map(|m| m.total).collect();
    let early = median(&totals[..50]);
    let late = median(&totals[400..]);
    (late < early, early, late)
}

// 5. Overfit run.
fn overfit_run(corpus: &[Sample], run: &Run) -> Verdict {
    let config = ModelConfig::default();
    let r = retrieval_accuracy(&run.params, &config, corpus, 8, 0).unwrap();
    verdict(
        run.masked_acc >= 0.99
            && r.image_to_text == 1.0
            && r.text_to_image == 1.0
            && run.elapsed < Duration::from_secs(600),
        format!(
            "masked acc {:.4} (>= 0.99); retrieval i2t {:.4} t2i {:.4} (== 1.0); {} steps in {:.1}s (< 600s)",
            run.masked_acc,
            r.image_to_text,
            r.text_to_image,
            run.log.len(),
            run.elapsed.as_secs_f64()
        ),
    )
}

// 6. Partial annotation.
fn weak_supervision(full: &Run, partial: &[(f64, Run)]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    let (dec, early, late) = loss_decreases(&full.log);
    ok &= dec;
    parts.push(format!("1.0: loss {early:.3}->{late:.3}"));
    for (fraction, run) in partial {
        let (dec, early, late) = loss_decreases(&run.log);
        ok &= dec && run.masked_acc >= 0.95;
        parts.push(format!(
            "{fraction}: acc {:.4} (>= 0.95), loss {early:.3}->{late:.3}",
            run.masked_acc
        ));
    }
    verdict(ok, parts.join("; "))
}

// 7. Decoder attention concentrates on the queried instance.
fn attention_locality(corpus: &[Sample], run: &Run) -> Verdict {
    let config = ModelConfig::default();
    let (ratio, count) =
        mean_locality(&run.params, &config, corpus, AttnSelect::default(), 0).unwrap();
    verdict(
        ratio >= 2.0 && count >= 32,
        format!("mean in-box mass / box area fraction {ratio:.3} (>= 2.0) over {count} instances (>= 32)"),
    )
}

fn random_manifest(rng: &mut SplitMix64, n: usize) -> Vec<ManifestRecord> {
    (0..n)
        .map(|i| {
            // Coarse grid so that ties with the thresholds actually occur.
            let conf = |rng: &mut SplitMix64| rng.below(21) as f64 / 20.0;
            ManifestRecord {
                image_id: format!("img{}", rng.below(200)),
                text: format!("t{i}"),
                det_conf: conf(rng),
                rec_conf: conf(rng),
            }
        })
        .collect()
}

// 8. Filter oracle and reproducibility.
fn pipeline_oracle() -> Verdict {
    let mut rng = SplitMix64::new(808);
    let mut filter_ok = true;
    for _ in 0..20 {
        let records = random_manifest(&mut rng, 1000);
        let det = rng.below(21) as f64 / 20.0;
        let rec = rng.below(21) as f64 / 20.0;
        let got: BTreeSet<String> = filter_manifest(&records, det, rec)
            .unwrap()
            .into_iter()
            .map(|r| r.text)
            .collect();
        let mut want = BTreeSet::new();
        for r in &records {
            if r.det_conf >= det && r.rec_conf >= rec {
                want.insert(r.text.clone());
            }
        }
        filter_ok &= got == want;
    }

    let gen = GenConfig::default();
    let digest = |seed| {
        let mut bytes = Vec::new();
        write_corpus(&mut bytes, &render_corpus(seed, 64, &gen).unwrap()).unwrap();
        fnv1a64(&bytes)
    };
    let corpus_ok = digest(0) == digest(0) && digest(0) != digest(1);

    let corpus = render_corpus(0, 16, &gen).unwrap();
    let model = ModelConfig {
        image_size: 64,
        ..ModelConfig::tiny()
    };
    let train = TrainConfig {
        steps: 30,
        ..TrainConfig::default()
    };
    let full_run = || {
        let mut t = Trainer::new(model.clone(), train.clone()).unwrap();
        let log: Vec<StepMetrics> = (0..30).map(|_| t.step(&corpus).unwrap()).collect();
        (log, t.checkpoint().to_bytes().unwrap())
    };
    let (log_a, ck_a) = full_run();
    let (log_b, ck_b) = full_run();
    let mut first = Trainer::new(model.clone(), train.clone()).unwrap();
    let mut log_c: Vec<StepMetrics> = (0..15).map(|_| first.step(&corpus).unwrap()).collect();
    let saved = first.checkpoint().to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&saved).unwrap();
    let resave_identical = restored.to_bytes().unwrap() == saved;
    let mut second = Trainer::from_checkpoint(restored).unwrap();
    log_c.extend((0..15).map(|_| second.step(&corpus).unwrap()));
    let ck_c = second.checkpoint().to_bytes().unwrap();
    let train_ok = log_a == log_b && ck_a == ck_b;
    let resume_ok = log_c == log_a && ck_c == ck_a && resave_identical;

    verdict(
        filter_ok && corpus_ok && train_ok && resume_ok,
        format!(
            "filter == brute force on 20x1000 records: {filter_ok}; corpus digest reproducible: {corpus_ok}; training bit-reproducible: {train_ok}; save/resume bit-identical: {resume_ok}"
        ),
    )
}

// 9. Schedule and optimizer identities.
fn schedule_and_optimizer() -> Verdict {
    let mut sched_err: f64 = 0.0;
    for &(lr_init, lr_min, total) in &[(1e-4, 0.0, 500), (2e-3, 1e-5, 1000), (0.5, 0.1, 2)] {
        sched_err = sched_err.max((cosine_lr(0, total, lr_init, lr_min).unwrap() - lr_init).abs());
        sched_err =
            sched_err.max((cosine_lr(total, total, lr_init, lr_min).unwrap() - lr_min).abs());
        let mid = cosine_lr(total / 2, total, lr_init, lr_min).unwrap();
        sched_err = sched_err.max((mid - (lr_init + lr_min) / 2.0).abs());
    }

    // One AdamW step on every scalar against the recurrence written out by hand.
    let config = ModelConfig::tiny();
    let mut rng = SplitMix64::new(909);
    let mut params = ModelParams::init(&config, &mut rng).unwrap();
    let start = params.clone();
    let grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| random_tensor(&mut rng, t.shape(), 1.0))
        .collect();
    let hyper = AdamHyper::default();
    let mut state = OptimState::new(&params, hyper.clone());
    let lr = 1e-3;
    adamw_step(&mut params, &grads, &mut state, lr).unwrap();
    let mut adam_err: f64 = 0.0;
    for (i, (name, p0)) in start.iter().enumerate() {
        let decay = if oclip_core::model::decays(name) {
            hyper.weight_decay
        } else {
            0.0
        };
        for j in 0..p0.numel() {
            let g = grads[i].data()[j];
            let m = (1.0 - hyper.beta1) * g;
            let v = (1.0 - hyper.beta2) * g * g;
            let m_hat = m / (1.0 - hyper.beta1);
            let v_hat = v / (1.0 - hyper.beta2);
            let theta = p0.data()[j];
            let mut want = theta - lr * decay * theta - lr * m_hat / (v_hat.sqrt() + hyper.eps);
            if name == oclip_core::model::TEMPERATURE {
                want = want.clamp(
                    oclip_core::model::TEMPERATURE_MIN,
                    oclip_core::model::TEMPERATURE_MAX,
                );
            }
            adam_err = adam_err.max((params.tensors()[i].data()[j] - want).abs());
        }
    }

    let mut frozen = start.clone();
    let mut state = OptimState::new(&frozen, hyper);
    adamw_step(&mut frozen, &grads, &mut state, 0.0).unwrap();
    let noop = frozen == start;

    verdict(
        sched_err <= 1e-12 && adam_err <= 1e-12 && noop,
        format!("cosine identities err {sched_err:.1e} (<= 1e-12); AdamW vs hand recurrence {adam_err:.1e} (<= 1e-12); lr=0 no-op: {noop}"),
    )
}

fn main() {
    let started = Instant::now();
    let corpus = render_corpus(0, 64, &GenConfig::default()).unwrap();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!(
            "{} criterion {n} ({name}): {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v));
    };

    report(1, "gradient correctness", gradient_correctness());
    report(2, "query independence", query_independence());
    report(3, "instance independence", instance_independence());
    report(4, "loss structure", loss_structure(&corpus));
    let full = overfit(&corpus, 1.0);
    report(5, "overfit run", overfit_run(&corpus, &full));
    let partial: Vec<(f64, Run)> = [0.5, 0.25]
        .iter()
        .map(|&f| (f, overfit(&corpus, f)))
        .collect();
    report(6, "weak supervision", weak_supervision(&full, &partial));
    report(7, "attention locality", attention_locality(&corpus, &full));
    report(8, "pipeline oracle", pipeline_oracle());
    report(9, "schedule and optimizer", schedule_and_optimizer());

    let failed: Vec<u32> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
