use super::*;
use crate::rng::SplitMix64;
use crate::tensor::Tape;

fn encoding(config: &ModelConfig, chars: &[usize], mask_pos: usize) -> TextInstanceEncoding {
    let mut ids = vec![PAD; config.k_max];
    ids[..chars.len()].copy_from_slice(chars);
    let target = ids[mask_pos];
    ids[mask_pos] = MASK;
    TextInstanceEncoding {
        char_ids: ids,
        valid_len: chars.len(),
        mask_pos: Some(mask_pos),
        mask_target: Some(target),
    }
}

fn random_instance(config: &ModelConfig, rng: &mut SplitMix64) -> TextInstanceEncoding {
    let len = rng.range_inclusive(1, 8);
    let chars: Vec<usize> = (0..len)
        .map(|_| rng.range_inclusive(2, config.vocab_size - 1))
        .collect();
    let pos = rng.below(len as u64) as usize;
    encoding(config, &chars, pos)
}

fn random_image(config: &ModelConfig, rng: &mut SplitMix64) -> Tensor {
    let s = config.image_size;
    Tensor::new(
        vec![config.channels, s, s],
        (0..config.channels * s * s)
            .map(|_| rng.next_f64())
            .collect(),
    )
    .unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 6,
        image_size: 32,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

fn setup(config: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(config, &mut SplitMix64::new(seed)).unwrap()
}

fn te_of(params: &ModelParams, config: &ModelConfig, inst: &[TextInstanceEncoding]) -> Tensor {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    (*encode_text(inst, &p, config).unwrap().value()).clone()
}

#[test]
fn encode_image_shape_and_determinism() {
    let config = ModelConfig::default();
    let params = setup(&config, 0);
    let mut rng = SplitMix64::new(1);
    let img = random_image(&config, &mut rng);
    let run = || {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        (*encode_image(&img, &p, &config).unwrap().ie.value()).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[64, 64]);
    assert_eq!(a, run());
}

#[test]
fn encode_image_rejects_wrong_size() {
    let config = small_config();
    let params = setup(&config, 0);
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let img = Tensor::zeros(&[1, 16, 16]);
    assert!(matches!(
        encode_image(&img, &p, &config),
        Err(OclipError::Dimension { .. })
    ));
}

#[test]
fn zero_image_sees_only_positional_table() {
    let config = small_config();
    let params = setup(&config, 3);
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let zero = Tensor::zeros(&[1, 32, 32]);
    let ie = encode_image(&zero, &p, &config).unwrap().ie.value();
    assert!(ie.is_finite());
    // With zero patches (and zero-initialized projection bias) the block
    // input is exactly the positional table.
    let patches = tape.constant(patchify(&zero, &config).unwrap());
    let x = linear(&p, "image.patch_proj", &patches).unwrap();
    assert!(x.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn patchify_is_row_major_over_patches() {
    let config = ModelConfig {
        image_size: 4,
        patch_size: 2,
        ..small_config()
    };
    let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let p = patchify(&img, &config).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn encode_text_shape_permutation_and_mutation() {
    let config = ModelConfig::default();
    let params = setup(&config, 5);
    let mut rng = SplitMix64::new(9);
    let inst: Vec<_> = (0..3).map(|_| random_instance(&config, &mut rng)).collect();
    let te = te_of(&params, &config, &inst);
    assert_eq!(te.shape(), &[3, 64]);

    let permuted = vec![inst[2].clone(), inst[0].clone(), inst[1].clone()];
    let tp = te_of(&params, &config, &permuted);
    assert_eq!(tp.row(0), te.row(2));
    assert_eq!(tp.row(1), te.row(0));
    assert_eq!(tp.row(2), te.row(1));

    let mut mutated = inst.clone();
    mutated[2] = encoding(&config, &[5, 6, 7, 8, 9, 10], 3);
    let tm = te_of(&params, &config, &mutated);
    assert_eq!(tm.row(0), te.row(0));
    assert_eq!(tm.row(1), te.row(1));
    assert_ne!(tm.row(2), te.row(2));
}

#[test]
fn encode_text_rejects_empty() {
    let config = small_config();
    let params = setup(&config, 0);
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    assert!(matches!(
        encode_text(&[], &p, &config),
        Err(OclipError::Contract(_))
    ));
}

#[test]
fn pad_slots_are_opaque() {
    let config = small_config();
    let params = setup(&config, 2);
    let base = encoding(&config, &[4, 5, 6], 1);
    let te = te_of(&params, &config, std::slice::from_ref(&base));
    let mut junk = base.clone();
    for (j, id) in junk.char_ids.iter_mut().enumerate().skip(3) {
        *id = 2 + j % 30;
    }
    let tj = te_of(&params, &config, &[junk]);
    for (a, b) in te.data().iter().zip(tj.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decode_rows_are_query_independent() {
    let config = small_config();
    let params = setup(&config, 8);
    let mut rng = SplitMix64::new(4);
    for _ in 0..5 {
        let img = random_image(&config, &mut rng);
        let inst: Vec<_> = (0..4).map(|_| random_instance(&config, &mut rng)).collect();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let ie = encode_image(&img, &p, &config).unwrap().ie;
        let te = encode_text(&inst, &p, &config).unwrap();
        let full = decode(&te, &ie, &p, &config).unwrap();
        assert_eq!(full.attn.shape(), &[6, 2, 4, 16]);
        for i in 0..4 {
            let single = decode(&te.narrow(0, i, 1).unwrap(), &ie, &p, &config).unwrap();
            assert_eq!(single.dec_out.value().row(0), full.dec_out.value().row(i));
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let config = ModelConfig::default();
    let params = setup(&config, 1);
    let mut rng = SplitMix64::new(2);
    let input = ModelInput {
        image: random_image(&config, &mut rng),
        instances: vec![random_instance(&config, &mut rng)],
    };
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = forward(
        std::slice::from_ref(&input),
        &p,
        &config,
        ForwardOptions::default(),
    )
    .unwrap();
    let attn = out[0].attn.as_ref().unwrap();
    assert_eq!(attn.shape(), &[6, 4, 1, 64]);
    for row in attn.data().chunks(64) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let enc = encode_image(&input.image, &p, &config).unwrap().attn;
    for row in enc.data().chunks(64) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn predict_masked_shape_and_bias() {
    let config = small_config();
    let params = setup(&config, 0);
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let zero = tape.constant(Tensor::zeros(&[4, config.d_model]));
    let logits = predict_masked(&zero, &p).unwrap().value();
    assert_eq!(logits.shape(), &[4, config.vocab_size]);
    let bias = params.get("head.bias").unwrap();
    for r in 0..4 {
        assert_eq!(logits.row(r), bias.data());
    }
}

#[test]
fn contrastive_pooling_is_unit_norm() {
    let config = small_config();
    let params = setup(&config, 0);
    let mut rng = SplitMix64::new(6);
    let img = random_image(&config, &mut rng);
    let inst = random_instance(&config, &mut rng);
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let ie = encode_image(&img, &p, &config).unwrap().ie;
    let te = encode_text(&[inst], &p, &config).unwrap();
    let (iv, tv) = pool_for_contrastive(&ie, &te).unwrap();
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm(&iv.value()) - 1.0).abs() < 1e-12);
    assert!((norm(&tv.value()) - 1.0).abs() < 1e-12);
    let direct = te.l2_normalize(1).unwrap().value();
    for (a, b) in tv.value().data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let cos: f64 = iv
        .value()
        .data()
        .iter()
        .zip(tv.value().data())
        .map(|(a, b)| a * b)
        .sum();
    assert!((-1.0..=1.0).contains(&cos));
}

#[test]
fn forward_shapes_and_duplicate_determinism() {
    let config = small_config();
    let params = setup(&config, 0);
    let mut rng = SplitMix64::new(10);
    let mk = |rng: &mut SplitMix64| ModelInput {
        image: random_image(&config, rng),
        instances: (0..3).map(|_| random_instance(&config, rng)).collect(),
    };
    let a = mk(&mut rng);
    let b = mk(&mut rng);
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = forward(&[a.clone(), b, a], &p, &config, ForwardOptions::default()).unwrap();
    assert_eq!(out[0].masked_logits.shape(), vec![3, config.vocab_size]);
    assert_eq!(out[1].masked_logits.shape(), vec![3, config.vocab_size]);
    assert_eq!(*out[0].masked_logits.value(), *out[2].masked_logits.value());
    assert_eq!(*out[0].img_vec.value(), *out[2].img_vec.value());
}

#[test]
fn forward_requires_masks() {
    let config = small_config();
    let params = setup(&config, 0);
    let mut inst = encoding(&config, &[3, 4], 0);
    inst.char_ids[0] = 3;
    inst.mask_pos = None;
    inst.mask_target = None;
    let input = ModelInput {
        image: Tensor::zeros(&[1, 32, 32]),
        instances: vec![inst],
    };
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    assert!(forward(&[input], &p, &config, ForwardOptions::default()).is_err());
}

#[test]
fn instance_validation() {
    let config = small_config();
    let good = encoding(&config, &[3, 4], 1);
    good.validate(&config).unwrap();
    let mut bad = good.clone();
    bad.char_ids[1] = 3;
    assert!(bad.validate(&config).is_err());
    let mut bad = good.clone();
    bad.mask_pos = Some(2);
    assert!(bad.validate(&config).is_err());
    let mut bad = good;
    bad.char_ids.pop();
    assert!(bad.validate(&config).is_err());
}
