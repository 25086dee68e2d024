use super::*;
use crate::decoding::{LabelSpace, SOP};
use crate::numerics::{grad_check, layer_norm};
use alloc::vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

fn set(model: &mut Model, name: &str, value: f64) {
    model.param_by_name_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = value);
}

#[test]
fn sinusoid_values() {
    let pos = sinusoidal_positions(16, 6).unwrap();
    assert_eq!(pos.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((pos.at(1, 0) - 0.841471).abs() < 1e-6);
    assert!(pos.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(sinusoidal_positions(4, 5).is_err());
}

#[test]
fn embed_zero_input_gives_positions() {
    let model = Model::new(ModelConfig::tiny(Mode::Hierarchical), 1).unwrap();
    let y = model.embed(&Tensor::zeros(&[3, 6])).unwrap();
    let pos = sinusoidal_positions(3, 8).unwrap();
    assert_eq!(y, pos);
}

#[test]
fn embed_hand_example() {
    let mut config = ModelConfig::tiny(Mode::Hierarchical);
    config.input_dim = 2;
    config.model_dim = 2;
    config.head_dim = 1;
    config.num_heads = 1;
    let mut model = Model::new(config.clone(), 1).unwrap();
    *model.param_by_name_mut("embed.W").unwrap() = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, -1.0]]).unwrap();
    *model.param_by_name_mut("embed.b").unwrap() = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
    let x = Tensor::from_rows(&[&[1.0, 1.0], &[2.0, -1.0]]).unwrap();
    let y = model.embed(&x).unwrap();
    // W·x_0 = [3, -1], W·x_1 = [0, 1]; pos_0 = [0, 1], pos_1 = [sin 1, cos 1]
    let expect = [3.5, 0.25, 0.5 + 1f64.sin(), 1.25 + 1f64.cos()];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }

    config.positional_encoding = false;
    let mut plain = Model::new(config, 1).unwrap();
    plain.params_mut().clone_from_slice(model.params());
    assert_eq!(plain.embed(&x).unwrap().data(), &[3.5, -0.75, 0.5, 1.25]);
}

#[test]
fn embed_rejects_long_input() {
    let model = Model::new(ModelConfig::tiny(Mode::Hierarchical), 1).unwrap();
    let err = model.embed(&Tensor::zeros(&[33, 6])).unwrap_err();
    assert!(format!("{err}").contains("max_len"));
    assert!(model.embed(&Tensor::zeros(&[3, 5])).is_err());
}

fn single_encoder(config: &mut ModelConfig) {
    config.enc_layers = 1;
    config.positional_encoding = false;
    config.mode = Mode::Classification;
    config.dec_layers = 0;
}

#[test]
fn encoder_layer_residual_only_path() {
    let mut config = ModelConfig::tiny(Mode::Classification);
    single_encoder(&mut config);
    let mut model = Model::new(config, 3).unwrap();
    for name in ["encoder.0.self_attn.Wc", "encoder.0.ffn.W1", "encoder.0.ffn.W2"] {
        set(&mut model, name, 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[4, 6], &mut rng);
    let y = model.embed(&x).unwrap();
    let r = model.encode(&x).unwrap();
    let ones = Tensor::full(&[8], 1.0);
    let zeros = Tensor::zeros(&[8]);
    let once = layer_norm(&y, &ones, &zeros, 1e-6).unwrap();
    let twice = layer_norm(&once, &ones, &zeros, 1e-6).unwrap();
    assert_eq!(r, twice);
    // Norm is idempotent up to the epsilon inside the square root.
    for (a, b) in r.data().iter().zip(once.data()) {
        assert!((a - b).abs() < 1e-3);
    }
}

fn ln_oracle(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

#[test]
fn encoder_layer_single_frame_matches_straight_line() {
    let mut config = ModelConfig::tiny(Mode::Classification);
    single_encoder(&mut config);
    let mut model = Model::new(config, 5).unwrap();
    randomize(&mut model, 5);
    for i in [1, 2] {
        set(&mut model, &format!("encoder.0.norm{i}.gain"), 1.0);
        set(&mut model, &format!("encoder.0.norm{i}.bias"), 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[1, 6], &mut rng);
    let y = model.embed(&x).unwrap().row(0).to_vec();
    let p = |n: &str| model.param_by_name(n).unwrap().clone();
    // One frame attends only to itself, so each head outputs W^v·y.
    let mut joined = vec![];
    for h in 0..2 {
        let wv = p(&format!("encoder.0.self_attn.head.{h}.Wv"));
        for r in 0..4 {
            joined.push((0..8).map(|c| wv.at(r, c) * y[c]).sum::<f64>());
        }
    }
    let wc = p("encoder.0.self_attn.Wc");
    let z: Vec<f64> = (0..8).map(|r| (0..8).map(|c| wc.at(r, c) * joined[c]).sum()).collect();
    let h = ln_oracle(&z.iter().zip(&y).map(|(a, b)| a + b).collect::<Vec<_>>(), 1e-6);
    let (w1, b1, w2, b2) = (p("encoder.0.ffn.W1"), p("encoder.0.ffn.b1"), p("encoder.0.ffn.W2"), p("encoder.0.ffn.b2"));
    let a: Vec<f64> = (0..12)
        .map(|j| ((0..8).map(|i| h[i] * w1.at(i, j)).sum::<f64>() + b1.data()[j]).max(0.0))
        .collect();
    let s: Vec<f64> = (0..8)
        .map(|j| (0..12).map(|i| a[i] * w2.at(i, j)).sum::<f64>() + b2.data()[j])
        .collect();
    let r = ln_oracle(&s.iter().zip(&h).map(|(a, b)| a + b).collect::<Vec<_>>(), 1e-6);
    let got = model.encode(&x).unwrap();
    for (a, b) in got.data().iter().zip(&r) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn encode_is_deterministic_and_finite_at_full_size() {
    let model = Model::new(ModelConfig::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[12, 320], &mut rng);
    let a = model.encode(&x).unwrap();
    let b = model.encode(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[12, 128]);
    assert!(a.is_all_finite());
}

#[test]
fn trace_records_named_activations() {
    let model = Model::new(ModelConfig::tiny(Mode::Hierarchical), 2).unwrap();
    let x = Tensor::full(&[3, 6], 0.1);
    let mut trace = ActivationTrace::enabled();
    let enc = model.encode_traced(&x, &mut trace).unwrap();
    for name in ["embed.y", "encoder.0.self_attn.head.1.q", "encoder.0.self_attn.head.0.alpha", "encoder.0.z", "encoder.0.h", "encoder.0.s"] {
        assert!(trace.get(name).is_some(), "{name}");
    }
    assert_eq!(trace.get("encoder.0.r").unwrap(), &enc);
    assert_eq!(trace.get("encoder.0.self_attn.head.0.alpha").unwrap().shape(), &[3, 3]);
    let mut off = ActivationTrace::disabled();
    model.encode_traced(&x, &mut off).unwrap();
    assert!(off.is_empty());
}

fn tiny_pair(seed: u64) -> (Model, Tensor) {
    let mut model = Model::new(ModelConfig::tiny(Mode::Hierarchical), seed).unwrap();
    randomize(&mut model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let enc = random(&[3, 8], &mut rng);
    (model, enc)
}

#[test]
fn single_target_attends_to_itself() {
    let (model, enc) = tiny_pair(3);
    let mut trace = ActivationTrace::enabled();
    model.decoder_logits_traced(&enc, &[SOP], &mut trace).unwrap();
    let alpha = trace.get("decoder.0.self_attn.head.0.alpha").unwrap();
    assert_eq!(alpha.data(), &[1.0]);
}

#[test]
fn decoder_causality_and_cross_attention() {
    let (model, enc) = tiny_pair(6);
    let base = model.decoder_logits(&enc, &[SOP, 3, 5]).unwrap();
    let changed = model.decoder_logits(&enc, &[SOP, 3, 6]).unwrap();
    assert_eq!(base.row(0), changed.row(0));
    assert_eq!(base.row(1), changed.row(1));
    assert_ne!(base.row(2), changed.row(2));
    let mut enc2 = enc.clone();
    enc2.data_mut()[4] += 0.5;
    let moved = model.decoder_logits(&enc2, &[SOP, 3, 5]).unwrap();
    for i in 0..3 {
        assert_ne!(base.row(i), moved.row(i));
    }
}

#[test]
fn stepwise_equals_full_pass() {
    let (model, enc) = tiny_pair(8);
    let tokens = [SOP, 2, 4, 6];
    let full = model.decoder_logits(&enc, &tokens).unwrap();
    for i in 0..tokens.len() {
        let step = model.decode_step(&tokens[..=i], &enc).unwrap();
        for (a, b) in step.iter().zip(full.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert!(model.decode_step(&[2], &enc).is_err());
    assert!(model.decode_step(&[SOP, 7], &enc).is_err());
}

fn pooled_model(positional: bool) -> Model {
    let mut config = ModelConfig::tiny(Mode::Classification);
    config.dec_layers = 0;
    config.positional_encoding = positional;
    let mut model = Model::new(config, 12).unwrap();
    randomize(&mut model, 12);
    model
}

#[test]
fn pooled_head_duplicated_frames() {
    let model = pooled_model(false);
    let enc = Tensor::from_rows(&[&[0.1, -0.2, 0.3, 0.0, 0.5, 0.6, -0.7, 0.8]]).unwrap();
    let twice = Tensor::from_rows(&[enc.row(0), enc.row(0)]).unwrap();
    assert_eq!(model.class_logits(&enc).unwrap(), model.class_logits(&twice).unwrap());
}

#[test]
fn pooled_head_hand_oracle() {
    let model = pooled_model(false);
    let enc = Tensor::from_rows(&[&[0.1, -0.2, 0.3, 0.0, 0.5, 0.6, -0.7, 0.8], &[0.3, 0.2, -0.1, 0.4, 0.0, 0.2, 0.1, -0.8]]).unwrap();
    let p = |n: &str| model.param_by_name(n).unwrap().clone();
    let (w, b, wo, bo) = (p("head.W"), p("head.b"), p("output.W"), p("output.b"));
    let mean: Vec<f64> = (0..8).map(|c| (enc.at(0, c) + enc.at(1, c)) / 2.0).collect();
    let h: Vec<f64> = (0..8)
        .map(|j| ((0..8).map(|i| mean[i] * w.at(i, j)).sum::<f64>() + b.data()[j]).max(0.0))
        .collect();
    let got = model.class_logits(&enc).unwrap();
    assert_eq!(got.len(), 6);
    for (j, g) in got.iter().enumerate() {
        let expect = (0..8).map(|i| h[i] * wo.at(i, j)).sum::<f64>() + bo.data()[j];
        assert!((g - expect).abs() < 1e-14);
    }
}

#[test]
fn frame_order_matters_only_with_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[4, 6], &mut rng);
    let rev: Vec<&[f64]> = (0..4).rev().map(|i| x.row(i)).collect();
    let xr = Tensor::from_rows(&rev).unwrap();
    let plain = pooled_model(false);
    let a = plain.class_logits(&plain.encode(&x).unwrap()).unwrap();
    let b = plain.class_logits(&plain.encode(&xr).unwrap()).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-9);
    }
    let posed = pooled_model(true);
    let a = posed.class_logits(&posed.encode(&x).unwrap()).unwrap();
    let b = posed.class_logits(&posed.encode(&xr).unwrap()).unwrap();
    assert!(a.iter().zip(&b).any(|(u, v)| (u - v).abs() > 1e-6));
}

#[test]
fn mode_mismatch_is_an_error() {
    let (model, enc) = tiny_pair(1);
    assert!(model.class_logits(&enc).is_err());
    let cls = Model::new(ModelConfig::tiny(Mode::Classification), 1).unwrap();
    assert!(cls.decoder_logits(&enc, &[SOP]).is_err());
}

#[test]
fn hand_enumerated_parameter_count() {
    let config = ModelConfig {
        input_dim: 3,
        model_dim: 2,
        head_dim: 1,
        num_heads: 1,
        enc_layers: 1,
        dec_layers: 1,
        ffn_inner: 4,
        label_space: LabelSpace::with_cardinalities(1, 1, &[]).unwrap(),
        ..ModelConfig::default()
    };
    let embed = 2 * 3 + 2;
    let attention = 3 * (1 * 2) + 2 * 1;
    let ffn = 2 * 4 + 4 + 4 * 2 + 2;
    let norm = 2 + 2;
    let encoder = attention + norm + ffn + norm;
    let decoder = attention + norm + attention + norm + ffn + norm;
    let head = 4 * 2 + 2 * 4 + 4;
    assert_eq!(embed + encoder + decoder + head, 116);
    assert_eq!(parameter_count(&config).unwrap(), 116);
    assert_eq!(Model::new(config, 0).unwrap().num_parameters(), 116);
}

#[test]
fn parameter_count_matches_census() {
    let mut configs = vec![ModelConfig::default(), ModelConfig::default().with_mode(Mode::Classification)];
    for mode in [Mode::Classification, Mode::Hierarchical] {
        configs.push(ModelConfig::tiny(mode));
        configs.push(ModelConfig::desk(mode));
    }
    let mut pooled = ModelConfig::tiny(Mode::Classification);
    pooled.dec_layers = 0;
    configs.push(pooled);
    for c in configs {
        let model = Model::new(c.clone(), 0).unwrap();
        assert_eq!(parameter_count(&c).unwrap(), model.num_parameters());
        assert_eq!(model.names().len(), model.params().len());
    }
}

#[test]
fn default_parameter_counts() {
    let cls = parameter_count(&ModelConfig::default().with_mode(Mode::Classification)).unwrap();
    assert_eq!(cls, 1_538_424);
    let hier = parameter_count(&ModelConfig::default()).unwrap();
    assert_eq!(hier, 1_526_928);
}

#[test]
fn from_named_round_trip_and_errors() {
    let config = ModelConfig::tiny(Mode::Hierarchical);
    let model = Model::new(config.clone(), 4).unwrap();
    let named: Vec<(String, Tensor)> = model.named_params().map(|(n, t)| (n.into(), t.clone())).collect();
    let back = Model::from_named(config.clone(), named.clone()).unwrap();
    assert_eq!(back.params(), model.params());
    assert!(Model::from_named(config.clone(), named[1..].to_vec()).is_err());
    let mut dup = named.clone();
    dup.push(named[0].clone());
    assert!(Model::from_named(config.clone(), dup).is_err());
    let mut bad = named;
    bad[0].1 = Tensor::zeros(&[1]);
    assert!(Model::from_named(config, bad).is_err());
}

#[test]
fn tiny_full_model_gradients() {
    for mode in [Mode::Hierarchical, Mode::Classification] {
        let mut config = ModelConfig::tiny(mode);
        config.dropout = 0.0;
        let mut model = Model::new(config, 17).unwrap();
        let network = model.network().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(&[3, 6], &mut rng);
        let label = LabelVector::new(1, 2, vec![]);
        let trainable = vec![true; model.params().len()];
        let report = grad_check(model.params_mut(), &trainable, 1e-5, |g| network.loss(g, &x, &label)).unwrap();
        assert!(report.passed(), "{mode:?}: {}", report.rel_error());
    }
}
