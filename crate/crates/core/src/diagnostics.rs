//! Finite-difference gradient-check suite over every differentiable
//! operation and the end-to-end loss of a tiny network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    conv1d, depthwise_conv1d, dropout, gru_sequence, gru_step, instance_norm, linear, GruParams,
    INSTANCE_NORM_EPS,
};
use crate::model::{fuse, se_block, temporal_attention, Amtfnet, ModelConfig, Variant};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{concat, grad_check, GradCheckTolerance, Tensor, Var};
use crate::train::cross_entropy;

/// Points drawn per layer check.
pub const POINTS: usize = 5;
pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst error over all points.
    pub max_error: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tol
    }
}

/// The shape of the end-to-end check network: v = 3, w = 8, H = 5, L = 3.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(3, 3).with_variant(variant);
    c.w = 8;
    c.hidden = 5;
    c.kernel_sizes = vec![3, 5, 7];
    c
}

type Check = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("valid shape")
}

fn gru<'t>(v: &[Var<'t>]) -> GruParams<'t> {
    GruParams {
        w_r: v[0],
        w_z: v[1],
        w_h: v[2],
        u_r: v[3],
        u_z: v[4],
        u_h: v[5],
        b_r: v[6],
        b_z: v[7],
        b_h: v[8],
    }
}

fn gru_shapes(d: usize, h: usize) -> Vec<Vec<usize>> {
    let mut s = vec![vec![h, d]; 3];
    s.extend(vec![vec![h, h]; 3]);
    s.extend(vec![vec![h]; 3]);
    s
}

const TAM_NAMES: [&str; 10] = [
    "tam.fc1.weight",
    "tam.fc1.bias",
    "tam.fc2.weight",
    "tam.fc2.bias",
    "tam.fc3.weight",
    "tam.fc3.bias",
    "tam.fc4.weight",
    "tam.fc4.bias",
    "tam.conv.kernel",
    "tam.conv.bias",
];
const SE_NAMES: [&str; 4] = ["se.fc_a.weight", "se.fc_a.bias", "se.fc_b.weight", "se.fc_b.bias"];

/// Bind `v[1..]` to attention parameter names on the same tape (keeping the
/// gradient link) and apply `f` to the map `v[0]`.
fn with_attention<'t>(
    v: &[Var<'t>],
    names: &[&str],
    f: impl Fn(&crate::layers::ParamVars<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    let vars = crate::layers::ParamVars::from_pairs(names.iter().zip(&v[1..]).map(|(n, x)| (n.to_string(), *x)));
    f(&vars, v[0])
}

fn layer_checks() -> Vec<(&'static str, Vec<Vec<usize>>, Check)> {
    let mut checks: Vec<(&'static str, Vec<Vec<usize>>, Check)> = vec![
        ("add", vec![vec![3, 4], vec![4]], |v| Ok(v[0].add(v[1])?.tanh().sum_all())),
        ("sub", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].sub(v[1])?.tanh().sum_all())),
        ("mul", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].mul(v[1])?.sum_all())),
        ("relu", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].relu().mul(v[1])?.sum_all())),
        ("sigmoid", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].sigmoid().mul(v[1])?.sum_all())),
        ("tanh", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].tanh().mul(v[1])?.sum_all())),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |v| Ok(v[0].matmul(v[1])?.tanh().sum_all())),
        ("sum", vec![vec![3, 4], vec![4]], |v| Ok(v[0].sum(0)?.mul(v[1])?.sum_all())),
        ("mean", vec![vec![3, 4], vec![3]], |v| Ok(v[0].mean(1)?.mul(v[1])?.sum_all())),
        ("std", vec![vec![3, 4], vec![4]], |v| Ok(v[0].std(0)?.mul(v[1])?.sum_all())),
        ("softmax", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].softmax(1)?.mul(v[1])?.sum_all())),
        ("concat", vec![vec![2, 4], vec![3, 4], vec![5, 4]], |v| {
            Ok(concat(&[v[0], v[1]], 0)?.mul(v[2])?.sum_all())
        }),
        ("depthwise_conv1d", vec![vec![2, 3, 9], vec![3, 5], vec![3]], |v| {
            Ok(depthwise_conv1d(v[0], v[1], v[2])?.tanh().sum_all())
        }),
        ("instance_norm", vec![vec![2, 3, 9], vec![2, 3, 9]], |v| {
            Ok(instance_norm(v[0], INSTANCE_NORM_EPS).mul(v[1])?.sum_all())
        }),
        ("conv1d", vec![vec![2, 2, 8], vec![1, 2, 3], vec![1]], |v| Ok(conv1d(v[0], v[1], v[2])?.tanh().sum_all())),
        ("linear", vec![vec![4, 6], vec![3, 6], vec![3]], |v| Ok(linear(v[0], v[1], v[2])?.tanh().sum_all())),
        ("dropout", vec![vec![4, 6]], |v| {
            let mut mask = ChaCha8Rng::seed_from_u64(17);
            Ok(dropout(v[0], 0.5, true, &mut mask)?.tanh().sum_all())
        }),
        ("fuse", vec![vec![2, 5, 8], vec![2, 8]], |v| Ok(fuse(v[0], v[1])?.tanh().sum_all())),
    ];
    let mut step_shapes = vec![vec![2, 3], vec![2, 5]];
    step_shapes.extend(gru_shapes(3, 5));
    checks.push(("gru_step", step_shapes, |v| Ok(gru_step(v[0], v[1], &gru(&v[2..]))?.tanh().sum_all())));
    let mut seq_shapes = vec![vec![2, 3, 4], vec![2, 5]];
    seq_shapes.extend(gru_shapes(3, 5));
    checks.push(("gru_sequence", seq_shapes, |v| {
        Ok(gru_sequence(v[0], Some(v[1]), &gru(&v[2..]))?.tanh().sum_all())
    }));
    let tam_shapes = vec![
        vec![2, 5, 8],
        vec![2, 8],
        vec![2],
        vec![8, 2],
        vec![8],
        vec![2, 8],
        vec![2],
        vec![8, 2],
        vec![8],
        vec![1, 2, 3],
        vec![1],
    ];
    checks.push(("temporal_attention", tam_shapes, |v| {
        with_attention(v, &TAM_NAMES, |vars, h| Ok(temporal_attention(vars, h)?.tanh().sum_all()))
    }));
    let se_shapes = vec![vec![2, 5, 8], vec![2, 8], vec![2], vec![8, 2], vec![8]];
    checks.push(("se_block", se_shapes, |v| {
        with_attention(v, &SE_NAMES, |vars, h| Ok(se_block(vars, h)?.tanh().sum_all()))
    }));
    checks
}

/// A sigmoid whose backward rule is off by a factor of two; used as the
/// negative control.
fn corrupted_sigmoid(x: Var<'_>) -> Var<'_> {
    let out = {
        let v = x.value();
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect())
            .expect("same shape")
    };
    x.tape().custom(&[x], out, |ctx| {
        let g = ctx.output.data().iter().zip(ctx.grad).map(|(s, g)| 2.0 * g * s * (1.0 - s)).collect();
        vec![Some(g)]
    })
}

/// End-to-end loss of `model` on a fixed batch with all parameters and the
/// input as free variables.
fn end_to_end(model: &Amtfnet, rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = model.config().clone();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    inputs.push(uniform(&[2, config.v, config.w], 1.5, rng));
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..config.num_classes)).collect();
    let report = grad_check(
        |_, v| {
            let (params, x) = v.split_at(names.len());
            let vars = crate::layers::ParamVars::from_pairs(names.iter().cloned().zip(params.iter().copied()));
            let mut mask = ChaCha8Rng::seed_from_u64(3);
            let out = model.forward(&vars, x[0], true, &mut mask)?;
            cross_entropy(out.probs, &labels)
        },
        &inputs,
        GradCheckTolerance { eps: 1e-5, tol: END_TO_END_TOL },
    )?;
    Ok(report.max_error)
}

/// Run every check. Points are drawn from the gradient-check stream of
/// `seed`; `corrupt` appends the negative-control check, which must fail.
pub fn gradient_suite(seed: u64, corrupt: bool) -> Result<Vec<CheckResult>> {
    let mut rng = stream_rng(seed, Stream::GradCheck);
    let tol = GradCheckTolerance { eps: 1e-5, tol: LAYER_TOL };
    let mut results = Vec::new();
    for (name, shapes, f) in layer_checks() {
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, 1.0, &mut rng)).collect();
            let report = grad_check(|_, v| f(v), &inputs, tol)?;
            worst = worst.max(report.max_error);
        }
        results.push(CheckResult { name: name.to_string(), max_error: worst, tol: LAYER_TOL });
    }
    if corrupt {
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let inputs = [uniform(&[3, 4], 1.0, &mut rng)];
            let report = grad_check(|_, v| Ok(corrupted_sigmoid(v[0]).sum_all()), &inputs, tol)?;
            worst = worst.max(report.max_error);
        }
        results.push(CheckResult { name: "corrupted_sigmoid".into(), max_error: worst, tol: LAYER_TOL });
    }
    for variant in Variant::ALL {
        let model = Amtfnet::new(tiny_config(variant), rng.random())?;
        let max_error = end_to_end(&model, &mut rng)?;
        results.push(CheckResult {
            name: format!("end_to_end_{variant}"),
            max_error,
            tol: END_TO_END_TOL,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_negative_control_fails() {
        let results = gradient_suite(7, true).unwrap();
        for r in &results {
            if r.name == "corrupted_sigmoid" {
                assert!(!r.passed());
            } else {
                assert!(r.passed(), "{} {}", r.name, r.max_error);
            }
        }
        assert_eq!(results.len(), layer_checks().len() + 1 + Variant::ALL.len());
    }
}
