use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::layers::ParamStore;
use crate::tensor::{grad_check, GradCheckTolerance};

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn small(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(3, 4).with_variant(variant);
    c.w = 16;
    c.hidden = 6;
    c
}

fn zero_params(config: &ModelConfig) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in config.param_specs() {
        store.insert(spec.name, Tensor::zeros(&spec.shape)).unwrap();
    }
    store
}

fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
    let t = store.get_mut(name).unwrap();
    t.data_mut().copy_from_slice(&data);
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Matrix-vector product written out.
fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..rows).map(|i| (0..cols).map(|j| m.at(&[i, j]) * x[j]).sum()).collect()
}

fn dense(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let y = matvec(store.get(&format!("{prefix}.weight")).unwrap(), x);
    y.iter().zip(store.get(&format!("{prefix}.bias")).unwrap().data()).map(|(a, b)| a + b).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Straight-line TAM for one `[F, w]` map.
fn reference_tam(store: &ParamStore, h: &Tensor) -> Vec<f64> {
    let (f, w) = (h.shape()[0], h.shape()[1]);
    let q1: Vec<f64> = (0..w).map(|t| (0..f).map(|i| h.at(&[i, t])).sum::<f64>() / f as f64).collect();
    let q2: Vec<f64> = (0..w)
        .map(|t| ((0..f).map(|i| (h.at(&[i, t]) - q1[t]).powi(2)).sum::<f64>() / f as f64).sqrt())
        .collect();
    let p1 = dense(store, "tam.fc2", &relu(dense(store, "tam.fc1", &q1)));
    let p2 = dense(store, "tam.fc4", &relu(dense(store, "tam.fc3", &q2)));
    let k = store.get("tam.conv.kernel").unwrap();
    let beta = store.get("tam.conv.bias").unwrap().data()[0];
    (0..w)
        .map(|t| {
            let mut acc = beta;
            for (c, p) in [&p1, &p2].into_iter().enumerate() {
                for j in 0..3 {
                    let s = t as isize + j as isize - 1;
                    if s >= 0 && (s as usize) < w {
                        acc += k.at(&[0, c, j]) * p[s as usize];
                    }
                }
            }
            acc.max(0.0)
        })
        .collect()
}

fn reference_se(store: &ParamStore, h: &Tensor) -> Vec<f64> {
    let (f, w) = (h.shape()[0], h.shape()[1]);
    let q: Vec<f64> = (0..w).map(|t| (0..f).map(|i| h.at(&[i, t])).sum::<f64>() / f as f64).collect();
    let e = dense(store, "se.fc_b", &relu(dense(store, "se.fc_a", &q)));
    e.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

fn attention_of(store: &ParamStore, h: &Tensor, se: bool) -> Tensor {
    let tape = Tape::new();
    let vars = store.attach(&tape, false);
    let hv = tape.constant(h.clone());
    let a = if se { se_block(&vars, hv) } else { temporal_attention(&vars, hv) };
    (*a.unwrap().value()).clone()
}

#[test]
fn te_shaped_feature_map_is_hidden_by_window() {
    let mut r = rng();
    let model = Amtfnet::new(ModelConfig::new(52, 20), 1).unwrap();
    let tape = Tape::new();
    let vars = model.params().attach(&tape, false);
    let x = tape.constant(random(&[52, 64], 1.0, &mut r));
    assert_eq!(feature_extract(&vars, x, model.config()).unwrap().shape(), vec![100, 64]);
    let out = model.forward(&vars, x, false, &mut r).unwrap();
    assert_eq!(out.probs.shape(), vec![20]);
}

#[test]
fn zero_input_and_zero_gru_give_zero_trajectory() {
    let config = small(Variant::Full);
    let mut store = Amtfnet::new(config.clone(), 3).unwrap().into_params();
    for name in GruParams::names("gru") {
        store.get_mut(&name).unwrap().data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let vars = store.attach(&tape, false);
    let x = tape.constant(Tensor::zeros(&[3, 16]));
    let h = feature_extract(&vars, x, &config).unwrap().value();
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn depthwise_stage_has_bounded_receptive_field() {
    // Instance norm pools each row over the whole window, so locality holds
    // before normalization, not after it.
    let config = small(Variant::Full);
    let model = Amtfnet::new(config.clone(), 4).unwrap();
    let mut r = rng();
    let x0 = random(&[3, 16], 1.0, &mut r);
    for t in [0usize, 5, 15] {
        let mut x1 = x0.clone();
        for c in 0..3 {
            x1.data_mut()[c * 16 + t] += 0.7;
        }
        for &n in &config.kernel_sizes {
            let tape = Tape::new();
            let vars = model.params().attach(&tape, false);
            let (k, b) = (vars.get(&format!("dc{n}.kernel")).unwrap(), vars.get(&format!("dc{n}.bias")).unwrap());
            let y0 = depthwise_conv1d(tape.constant(x0.clone()), k, b).unwrap().value();
            let y1 = depthwise_conv1d(tape.constant(x1.clone()), k, b).unwrap().value();
            for c in 0..3 {
                for s in 0..16usize {
                    if s.abs_diff(t) > 4 {
                        assert_eq!(y0.at(&[c, s]), y1.at(&[c, s]), "n={n} t={t} s={s}");
                    }
                }
            }
        }
    }
}

#[test]
fn perturbing_one_column_reaches_every_normalized_column() {
    let config = small(Variant::Full);
    let model = Amtfnet::new(config.clone(), 4).unwrap();
    let x0 = random(&[3, 16], 1.0, &mut rng());
    let mut x1 = x0.clone();
    x1.data_mut()[0] += 0.7;
    let tape = Tape::new();
    let vars = model.params().attach(&tape, false);
    let b0 = msdc(&vars, tape.constant(x0), &config).unwrap().value();
    let b1 = msdc(&vars, tape.constant(x1), &config).unwrap().value();
    assert!((10..16).any(|s| b0.at(&[0, s]) != b1.at(&[0, s])));
}

#[test]
fn attention_with_zero_weights_is_the_gated_bias() {
    let config = small(Variant::Full);
    let h = random(&[6, 16], 1.0, &mut rng());
    let mut store = zero_params(&config);
    set(&mut store, "tam.conv.bias", vec![0.4]);
    assert_eq!(attention_of(&store, &h, false).data(), &[0.4; 16]);
    set(&mut store, "tam.conv.bias", vec![-0.4]);
    assert_eq!(attention_of(&store, &h, false).data(), &[0.0; 16]);
}

#[test]
fn attention_matches_straight_line_reference() {
    let mut r = rng();
    let config = small(Variant::Full);
    for seed in 0..20 {
        let store = Amtfnet::new(config.clone(), seed).unwrap().into_params();
        let mut store = store;
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
        let h = random(&[6, 16], 1.0, &mut r);
        let got = attention_of(&store, &h, false);
        let want = reference_tam(&store, &h);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn squeeze_excitation_examples_and_reference() {
    let config = small(Variant::A6);
    let mut r = rng();
    let h = random(&[6, 16], 1.0, &mut r);
    assert_eq!(attention_of(&zero_params(&config), &h, true).data(), &[0.5; 16]);
    for _ in 0..20 {
        let mut store = zero_params(&config);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        }
        let h = random(&[6, 16], 2.0, &mut r);
        let got = attention_of(&store, &h, true);
        assert!(got.data().iter().all(|&a| a > 0.0 && a < 1.0));
        for (a, b) in got.data().iter().zip(reference_se(&store, &h)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn fuse_examples() {
    let tape = Tape::new();
    let h = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(fuse(h, a).unwrap().value().data(), &[1.0, 2.0]);

    let hv = random(&[4, 5], 1.0, &mut rng());
    let h = tape.constant(hv.clone());
    let mut onehot = vec![0.0; 5];
    onehot[3] = 1.0;
    let f = fuse(h, tape.constant(Tensor::vector(onehot))).unwrap().value();
    for i in 0..4 {
        assert_eq!(f.data()[i], hv.at(&[i, 3]));
    }
    let mean = fuse(h, tape.constant(Tensor::full(&[5], 0.2))).unwrap().value();
    let temporal = h.mean(1).unwrap().value();
    assert!(mean.max_abs_diff(&temporal) < 1e-15);

    assert!(fuse(h, tape.constant(Tensor::zeros(&[4]))).is_err());
}

#[test]
fn fuse_and_model_gradients() {
    let mut r = rng();
    for _ in 0..5 {
        let inputs = [random(&[2, 4, 6], 1.0, &mut r), random(&[2, 6], 1.0, &mut r)];
        let rep = grad_check(|_, v| Ok(fuse(v[0], v[1])?.tanh().sum_all()), &inputs, GradCheckTolerance::default()).unwrap();
        assert!(rep.passed(), "{}", rep.max_error);
    }
}

#[test]
fn classifier_with_zero_weights_is_uniform() {
    let config = small(Variant::A5);
    let mut store = Amtfnet::new(config.clone(), 2).unwrap().into_params();
    store.get_mut("cls.weight").unwrap().data_mut().fill(0.0);
    let model = Amtfnet::from_params(config, store).unwrap();
    let p = model.predict(&random(&[3, 3, 16], 1.0, &mut rng())).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn forward_is_deterministic_in_eval_mode_and_normalized() {
    let mut r = rng();
    for variant in Variant::ALL {
        let model = Amtfnet::new(small(variant), 8).unwrap();
        let x = random(&[5, 3, 16], 2.0, &mut r);
        let p1 = model.predict(&x).unwrap();
        let p2 = model.predict(&x).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.shape(), &[5, 4]);
        for row in p1.data().chunks(4) {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // batched and single-window passes agree
        let tape = Tape::new();
        let vars = model.params().attach(&tape, false);
        let one = tape.constant(Tensor::new(vec![3, 16], x.data()[48..96].to_vec()).unwrap());
        let single = model.forward(&vars, one, false, &mut r).unwrap().probs.value();
        for l in 0..4 {
            assert!((single.data()[l] - p1.at(&[1, l])).abs() < 1e-14, "{variant}");
        }
    }
}

#[test]
fn argmax_follows_logits() {
    let model = Amtfnet::new(small(Variant::Full), 5).unwrap();
    let tape = Tape::new();
    let vars = model.params().attach(&tape, false);
    let x = tape.constant(random(&[8, 3, 16], 1.0, &mut rng()));
    let out = model.forward(&vars, x, false, &mut rng()).unwrap();
    let argmax = |row: &[f64]| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let (lv, pv) = (out.logits.value(), out.probs.value());
    for (l, p) in lv.data().chunks(4).zip(pv.data().chunks(4)) {
        assert_eq!(argmax(l), argmax(p));
    }
}

#[test]
fn crafted_one_hot_attention_selects_a_hidden_column() {
    let config = small(Variant::Full);
    let t0 = 9;
    let mut store = Amtfnet::new(config.clone(), 6).unwrap().into_params();
    for name in ["tam.fc1", "tam.fc2", "tam.fc3", "tam.fc4"] {
        store.get_mut(&format!("{name}.weight")).unwrap().data_mut().fill(0.0);
        store.get_mut(&format!("{name}.bias")).unwrap().data_mut().fill(0.0);
    }
    store.get_mut("tam.fc2.bias").unwrap().data_mut()[t0] = 1.0;
    set(&mut store, "tam.conv.kernel", vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    set(&mut store, "tam.conv.bias", vec![0.0]);
    let model = Amtfnet::from_params(config.clone(), store).unwrap();

    let tape = Tape::new();
    let vars = model.params().attach(&tape, false);
    let x = tape.constant(random(&[3, 16], 1.0, &mut rng()));
    let full = model.forward(&vars, x, false, &mut rng()).unwrap().probs.value();

    let h = feature_extract(&vars, x, &config).unwrap();
    let column = h.narrow(1, t0, 1).unwrap().reshape(&[6]).unwrap();
    let logits = linear(column, vars.get("cls.weight").unwrap(), vars.get("cls.bias").unwrap()).unwrap();
    let direct = logits.softmax(0).unwrap().value();
    assert_eq!(*full, *direct);
}

#[test]
fn parameter_counts() {
    for variant in Variant::ALL {
        for (v, l) in [(52, 20), (24, 5), (3, 3), (8, 5)] {
            let config = ModelConfig::new(v, l).with_variant(variant);
            let enumerated: usize = config.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum();
            assert_eq!(count_parameters(&config), enumerated, "{variant} v={v}");
        }
        let config = small(variant);
        assert_eq!(Amtfnet::new(config.clone(), 0).unwrap().parameter_count(), count_parameters(&config));
    }
    assert_eq!(count_parameters(&ModelConfig::new(52, 20)), 100_439);
    assert_eq!(count_parameters(&ModelConfig::new(24, 5)), 64_540);
    let count = |v: Variant| count_parameters(&ModelConfig::new(52, 20).with_variant(v));
    assert!(count(Variant::A1) < count(Variant::A3));
    assert!(count(Variant::A5) < count(Variant::Full));
}

#[test]
fn reduced_width_rounds_up() {
    let mut c = ModelConfig::new(2, 2);
    c.w = 10;
    c.kernel_sizes = vec![3];
    assert_eq!(c.reduced_width(), 3);
    c.reduction = 64;
    assert_eq!(c.reduced_width(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::new(4, 1);
    assert!(c.validate().is_err());
    c.num_classes = 3;
    c.kernel_sizes = vec![3, 4];
    assert!(c.validate().is_err());
    c.kernel_sizes = vec![65];
    assert!(c.validate().is_err());
    c.kernel_sizes = vec![3];
    c.dropout_rate = 1.0;
    assert!(c.validate().is_err());
    assert!("full".parse::<Variant>().is_ok());
    assert!("A7".parse::<Variant>().is_err());
    let json = r#"{"v": 4, "num_classes": 3, "colour": 1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
}

#[test]
fn from_params_checks_shapes() {
    let config = small(Variant::Full);
    let mut store = zero_params(&config);
    assert!(Amtfnet::from_params(config.clone(), store.clone()).is_ok());
    *store.get_mut("cls.bias").unwrap() = Tensor::zeros(&[5]);
    assert!(Amtfnet::from_params(config.clone(), store).is_err());
    assert!(Amtfnet::from_params(small(Variant::A1), zero_params(&config)).is_err());
}

#[test]
fn wrong_window_shape_is_rejected() {
    let model = Amtfnet::new(small(Variant::Full), 0).unwrap();
    assert!(model.predict(&Tensor::zeros(&[2, 4, 16])).is_err());
    assert!(model.predict(&Tensor::zeros(&[2, 3, 15])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_is_non_negative(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let config = small(Variant::Full);
        let mut store = zero_params(&config);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-scale..scale));
        }
        let h = random(&[6, 16], scale, &mut r);
        prop_assert!(attention_of(&store, &h, false).data().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn fuse_is_linear_in_weights(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let h = tape.constant(random(&[5, 7], 1.0, &mut r));
        let a = random(&[7], 1.0, &mut r);
        let b = random(&[7], 1.0, &mut r);
        let sum = Tensor::new(vec![7], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let scaled = Tensor::new(vec![7], a.data().iter().map(|x| alpha * x).collect()).unwrap();
        let f = |w: Tensor| fuse(h, tape.constant(w)).unwrap().value();
        let (fa, fb, fs, fsc) = (f(a), f(b), f(sum), f(scaled));
        for i in 0..5 {
            prop_assert!((fs.data()[i] - fa.data()[i] - fb.data()[i]).abs() < 1e-12);
            prop_assert!((fsc.data()[i] - alpha * fa.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_normalized(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let model = Amtfnet::new(small(Variant::Full), seed).unwrap();
        let p = model.predict(&random(&[2, 3, 16], scale, &mut r)).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn rel_change(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / a.norm()
}

fn offset_rows(x: &Tensor, offsets: &[f64]) -> Tensor {
    let w = x.shape()[x.rank() - 1];
    let rows = offsets.len();
    Tensor::new(x.shape().to_vec(), x.data().iter().enumerate().map(|(k, v)| v + offsets[(k / w) % rows]).collect()).unwrap()
}

#[test]
fn normalization_stage_absorbs_mode_offsets() {
    let config = ModelConfig::new(8, 5);
    let model = Amtfnet::new(config.clone(), 1).unwrap();
    let mut r = rng();
    for scale in [0.1, 1.0, 10.0] {
        let x = random(&[8, 64], 1.0, &mut r);
        let offsets: Vec<f64> = (0..8).map(|_| r.random_range(-scale..scale)).collect();
        let tape = Tape::new();
        let vars = model.params().attach(&tape, false);
        let xv = tape.constant(x);
        let mut maps = [Vec::new(), Vec::new()];
        for &n in &config.kernel_sizes {
            let y = depthwise_conv1d(xv, vars.get(&format!("dc{n}.kernel")).unwrap(), vars.get(&format!("dc{n}.bias")).unwrap()).unwrap();
            let shifted = tape.constant(offset_rows(&y.value(), &offsets));
            maps[0].push(instance_norm(y, INSTANCE_NORM_EPS).relu());
            maps[1].push(instance_norm(shifted, INSTANCE_NORM_EPS).relu());
        }
        let b0 = concat(&maps[0], 0).unwrap().value();
        let b1 = concat(&maps[1], 0).unwrap().value();
        assert!(rel_change(&b0, &b1) < 1e-3, "scale {scale}");
    }
}

#[test]
fn zero_padding_leaks_input_offsets_at_the_borders() {
    // A constant offset reaches the convolution output with full weight in the
    // interior but only partial weight within a half-kernel of either end, so
    // the MSDC map is not exactly offset-invariant.
    let config = ModelConfig::new(8, 5);
    let model = Amtfnet::new(config.clone(), 1).unwrap();
    let x = random(&[8, 64], 1.0, &mut rng());
    let tape = Tape::new();
    let vars = model.params().attach(&tape, false);
    let change = |c: f64| {
        let b0 = msdc(&vars, tape.constant(x.clone()), &config).unwrap().value();
        let b1 = msdc(&vars, tape.constant(offset_rows(&x, &[c; 8])), &config).unwrap().value();
        rel_change(&b0, &b1)
    };
    let (small, large) = (change(1e-4), change(1.0));
    assert!(small < 1e-3);
    assert!(large > small * 100.0);
}
