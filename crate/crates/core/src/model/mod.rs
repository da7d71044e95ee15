//! The network: multiscale depthwise convolution (MSDC) feeding a GRU, a
//! temporal attention module (TAM) that weights the hidden trajectory, a
//! weighted-sum fuser and a softmax classifier, plus the six ablation
//! variants.
//!
//! Every function accepts one window (`[v, w]`) or a batch (`[B, v, w]`).

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv1d, depthwise_conv1d, dropout, gru_sequence, init_params, instance_norm, linear, GruParams, Init, ParamSpec,
    ParamStore, ParamVars, INSTANCE_NORM_EPS,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{concat, Tape, Tensor, Var};

/// Initial bias of the attention gate convolution, before division by `w`.
/// The fused vector then starts out close to the temporal mean.
pub const TAM_GATE_BIAS: f64 = 1.0;

/// Architecture switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// MSDC only; classifies the temporal mean of the MSDC map.
    A1,
    /// GRU only; classifies the last hidden state.
    A2,
    /// MSDC + TAM over the MSDC map.
    A3,
    /// GRU + TAM.
    A4,
    /// MSDC + GRU; classifies the last hidden state.
    A5,
    /// MSDC + GRU + squeeze-and-excitation weighting.
    A6,
    #[serde(rename = "FULL")]
    Full,
}

/// How a feature map becomes the classifier input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    TemporalMean,
    LastColumn,
    Attention,
    SqueezeExcitation,
}

impl Variant {
    /// Ablation table order.
    pub const ALL: [Variant; 7] = [
        Variant::A1,
        Variant::A2,
        Variant::A3,
        Variant::A4,
        Variant::A5,
        Variant::A6,
        Variant::Full,
    ];

    pub fn has_msdc(self) -> bool {
        !matches!(self, Variant::A2 | Variant::A4)
    }

    pub fn has_gru(self) -> bool {
        !matches!(self, Variant::A1 | Variant::A3)
    }

    pub fn readout(self) -> Readout {
        match self {
            Variant::A1 => Readout::TemporalMean,
            Variant::A2 | Variant::A5 => Readout::LastColumn,
            Variant::A3 | Variant::A4 | Variant::Full => Readout::Attention,
            Variant::A6 => Readout::SqueezeExcitation,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::A1 => "A1",
            Variant::A2 => "A2",
            Variant::A3 => "A3",
            Variant::A4 => "A4",
            Variant::A5 => "A5",
            Variant::A6 => "A6",
            Variant::Full => "FULL",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

fn default_w() -> usize {
    64
}
fn default_kernels() -> Vec<usize> {
    vec![3, 5, 7, 9]
}
fn default_hidden() -> usize {
    100
}
fn default_reduction() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.5
}
fn default_variant() -> Variant {
    Variant::Full
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input variables per time step.
    pub v: usize,
    /// Window length.
    #[serde(default = "default_w")]
    pub w: usize,
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    /// GRU hidden size.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub num_classes: usize,
    /// Attention bottleneck is `ceil(w / reduction)` wide.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

impl ModelConfig {
    /// Default hyperparameters (w = 64, kernels 3/5/7/9, H = 100, r = 4, dropout 0.5).
    pub fn new(v: usize, num_classes: usize) -> Self {
        Self {
            v,
            w: default_w(),
            kernel_sizes: default_kernels(),
            hidden: default_hidden(),
            num_classes,
            reduction: default_reduction(),
            dropout_rate: default_dropout(),
            variant: default_variant(),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.v == 0 || self.w == 0 || self.hidden == 0 || self.reduction == 0 {
            return fail(format!(
                "v, w, hidden and reduction must be positive (v={}, w={}, hidden={}, reduction={})",
                self.v, self.w, self.hidden, self.reduction
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate));
        }
        if self.variant.has_msdc() {
            if self.kernel_sizes.is_empty() {
                return fail("kernel_sizes must not be empty".into());
            }
            for (i, &n) in self.kernel_sizes.iter().enumerate() {
                if n % 2 == 0 || n > self.w {
                    return fail(format!("kernel size {n} must be odd and at most w={}", self.w));
                }
                if self.kernel_sizes[..i].contains(&n) {
                    return fail(format!("kernel size {n} listed twice"));
                }
            }
        }
        Ok(())
    }

    pub fn reduced_width(&self) -> usize {
        self.w.div_ceil(self.reduction).max(1)
    }

    /// Rows of the MSDC map: one block of `v` per kernel size.
    pub fn msdc_height(&self) -> usize {
        self.kernel_sizes.len() * self.v
    }

    fn gru_input(&self) -> usize {
        if self.variant.has_msdc() {
            self.msdc_height()
        } else {
            self.v
        }
    }

    /// Rows of the map handed to the readout.
    pub fn feature_height(&self) -> usize {
        if self.variant.has_gru() {
            self.hidden
        } else {
            self.msdc_height()
        }
    }

    /// Every learnable tensor of this configuration, in construction order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (v, w, wr) = (self.v, self.w, self.reduced_width());
        let mut specs = Vec::new();
        if self.variant.has_msdc() {
            for &n in &self.kernel_sizes {
                specs.push(ParamSpec::weight(format!("dc{n}.kernel"), &[v, n], n));
                specs.push(ParamSpec::bias(format!("dc{n}.bias"), &[v]));
            }
        }
        if self.variant.has_gru() {
            specs.extend(GruParams::specs("gru", self.gru_input(), self.hidden));
        }
        let bottleneck = |specs: &mut Vec<ParamSpec>, down: &str, up: &str| {
            specs.push(ParamSpec::weight(format!("{down}.weight"), &[wr, w], w));
            specs.push(ParamSpec::bias(format!("{down}.bias"), &[wr]));
            specs.push(ParamSpec::weight(format!("{up}.weight"), &[w, wr], wr));
            specs.push(ParamSpec::bias(format!("{up}.bias"), &[w]));
        };
        match self.variant.readout() {
            Readout::Attention => {
                bottleneck(&mut specs, "tam.fc1", "tam.fc2");
                bottleneck(&mut specs, "tam.fc3", "tam.fc4");
                specs.push(ParamSpec::weight("tam.conv.kernel", &[1, 2, 3], 6));
                // A positive start keeps the ReLU gate open; at zero a
                // negative pre-activation everywhere kills every gradient.
                // Scaling by 1/w keeps the fused vector on the scale of h.
                specs.push(ParamSpec {
                    init: Init::Constant(TAM_GATE_BIAS / self.w as f64),
                    ..ParamSpec::bias("tam.conv.bias", &[1])
                });
            }
            Readout::SqueezeExcitation => bottleneck(&mut specs, "se.fc_a", "se.fc_b"),
            Readout::TemporalMean | Readout::LastColumn => {}
        }
        let f = self.feature_height();
        specs.push(ParamSpec::weight("cls.weight", &[self.num_classes, f], f));
        specs.push(ParamSpec::bias("cls.bias", &[self.num_classes]));
        specs
    }
}

/// Closed-form learnable-parameter total for `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let (v, w, h, l) = (config.v, config.w, config.hidden, config.num_classes);
    let wr = config.reduced_width();
    let mut total = 0;
    if config.variant.has_msdc() {
        total += config.kernel_sizes.iter().map(|n| v * n + v).sum::<usize>();
    }
    if config.variant.has_gru() {
        total += 3 * (h * config.gru_input() + h * h + h);
    }
    let bottleneck = 2 * w * wr + wr + w;
    total += match config.variant.readout() {
        Readout::Attention => 2 * bottleneck + 2 * 3 + 1,
        Readout::SqueezeExcitation => bottleneck,
        Readout::TemporalMean | Readout::LastColumn => 0,
    };
    total + l * config.feature_height() + l
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Amtfnet {
    config: ModelConfig,
    params: ParamStore,
}

/// Values produced by one forward pass.
pub struct ForwardOutput<'t> {
    /// Classifier input (before dropout): `[F]` or `[B, F]`.
    pub features: Var<'t>,
    pub logits: Var<'t>,
    pub probs: Var<'t>,
}

impl Amtfnet {
    /// Fresh model, initialized from the `Init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.param_specs(), &mut stream_rng(seed, Stream::Init))?;
        Ok(Self { config, params })
    }

    /// Wrap existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors for variant {}, found {}",
                specs.len(),
                config.variant,
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {}", spec.name))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Full pass on `tape`. `x` is `[v, w]` or `[B, v, w]`.
    pub fn forward<'t>(
        &self,
        vars: &ParamVars<'t>,
        x: Var<'t>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput<'t>> {
        let features = self.features(vars, x)?;
        let kept = dropout(features, self.config.dropout_rate, training, rng)?;
        let logits = linear(kept, vars.get("cls.weight")?, vars.get("cls.bias")?)?;
        let probs = logits.softmax(logits.shape().len() - 1)?;
        Ok(ForwardOutput { features, logits, probs })
    }

    /// Classifier input for each window: the fused vector, or the variant's
    /// fallback summary.
    pub fn features<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x.shape())?;
        let map = feature_extract(vars, x, &self.config)?;
        let time = map.shape().len() - 1;
        match self.config.variant.readout() {
            Readout::TemporalMean => map.mean(time),
            Readout::LastColumn => {
                let mut shape = map.shape();
                let w = shape.pop().expect("rank >= 2");
                map.narrow(time, w - 1, 1)?.reshape(&shape)
            }
            Readout::Attention => fuse(map, temporal_attention(vars, map)?),
            Readout::SqueezeExcitation => fuse(map, se_block(vars, map)?),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (v, w) = (self.config.v, self.config.w);
        let ok = match *shape {
            [a, b] | [_, a, b] => a == v && b == w,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("forward", format!("input {shape:?} does not match v={v}, w={w}")))
        }
    }

    /// Eval-mode class probabilities for a batch `[B, v, w]` → `[B, L]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.attach(&tape, false);
        let input = tape.constant(x.clone());
        let out = self.forward(&vars, input, false, &mut stream_rng(0, Stream::Dropout))?;
        let probs = out.probs.value();
        if probs.data().iter().any(|p| p.is_nan()) {
            return Err(Error::Numeric("forward pass produced NaN probabilities".into()));
        }
        Ok((*probs).clone())
    }

    /// Eval-mode classifier inputs for a batch `[B, v, w]` → `[B, F]`.
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.attach(&tape, false);
        let f = self.features(&vars, tape.constant(x.clone()))?;
        Ok((*f.value()).clone())
    }
}

/// `concat_n relu(instance_norm(DC_n(x)))` along the channel axis: `[K·v, w]`.
pub fn msdc<'t>(vars: &ParamVars<'t>, x: Var<'t>, config: &ModelConfig) -> Result<Var<'t>> {
    let branches = config
        .kernel_sizes
        .iter()
        .map(|n| {
            let y = depthwise_conv1d(x, vars.get(&format!("dc{n}.kernel"))?, vars.get(&format!("dc{n}.bias"))?)?;
            Ok(instance_norm(y, INSTANCE_NORM_EPS).relu())
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&branches, x.shape().len() - 2)
}

/// The map the readout consumes: GRU trajectory `[H, w]` when the variant has
/// a GRU (fed by MSDC or by `x` directly), otherwise the MSDC map.
pub fn feature_extract<'t>(vars: &ParamVars<'t>, x: Var<'t>, config: &ModelConfig) -> Result<Var<'t>> {
    let b = if config.variant.has_msdc() { msdc(vars, x, config)? } else { x };
    if config.variant.has_gru() {
        gru_sequence(b, None, &GruParams::from_vars(vars, "gru")?)
    } else {
        Ok(b)
    }
}

/// Non-negative weight per time step from the feature-axis mean and
/// population std of `h` (`[F, w]` → `[w]`).
pub fn temporal_attention<'t>(vars: &ParamVars<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let feat = h.shape().len() - 2;
    let branch = |q: Var<'t>, down: &str, up: &str| -> Result<Var<'t>> {
        let mid = linear(q, vars.get(&format!("{down}.weight"))?, vars.get(&format!("{down}.bias"))?)?.relu();
        linear(mid, vars.get(&format!("{up}.weight"))?, vars.get(&format!("{up}.bias"))?)
    };
    let p1 = branch(h.mean(feat)?, "tam.fc1", "tam.fc2")?;
    let p2 = branch(h.std(feat)?, "tam.fc3", "tam.fc4")?;
    let mut one_row = p1.shape();
    one_row.insert(one_row.len() - 1, 1);
    let stacked = concat(&[p1.reshape(&one_row)?, p2.reshape(&one_row)?], one_row.len() - 2)?;
    let a = conv1d(stacked, vars.get("tam.conv.kernel")?, vars.get("tam.conv.bias")?)?;
    Ok(a.reshape(&p1.shape())?.relu())
}

/// Squeeze-and-excitation over time: `sigmoid(fc_b(relu(fc_a(mean_F h))))`.
pub fn se_block<'t>(vars: &ParamVars<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let squeeze = h.mean(h.shape().len() - 2)?;
    let mid = linear(squeeze, vars.get("se.fc_a.weight")?, vars.get("se.fc_a.bias")?)?.relu();
    Ok(linear(mid, vars.get("se.fc_b.weight")?, vars.get("se.fc_b.bias")?)?.sigmoid())
}

/// `f = Σ_t a_t · h[:, t]`: `[F, w]` with `[w]` → `[F]`, or batched
/// `[B, F, w]` with `[B, w]` → `[B, F]`.
pub fn fuse<'t>(h: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let (hs, as_) = (h.shape(), a.shape());
    let (batch, f, w) = match (hs.as_slice(), as_.as_slice()) {
        ([f, w], [aw]) if aw == w => (1, *f, *w),
        ([b, f, w], [ab, aw]) if ab == b && aw == w => (*b, *f, *w),
        _ => return Err(Error::shape("fuse", format!("map {hs:?} and weights {as_:?} disagree"))),
    };
    let out = {
        let (hv, av) = (h.value(), a.value());
        let (hd, ad) = (hv.data(), av.data());
        let mut y = vec![0.0; batch * f];
        for b in 0..batch {
            let at = &ad[b * w..][..w];
            for i in 0..f {
                let row = &hd[(b * f + i) * w..][..w];
                y[b * f + i] = row.iter().zip(at).map(|(x, y)| x * y).sum();
            }
        }
        let mut shape = hs.clone();
        shape.pop();
        Tensor::new(shape, y)?
    };
    Ok(h.tape().custom(&[h, a], out, move |ctx| {
        let (hd, ad, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let mut gh = vec![0.0; hd.len()];
        let mut ga = vec![0.0; ad.len()];
        for b in 0..batch {
            for i in 0..f {
                let gi = g[b * f + i];
                let base = (b * f + i) * w;
                for t in 0..w {
                    gh[base + t] = gi * ad[b * w + t];
                    ga[b * w + t] += gi * hd[base + t];
                }
            }
        }
        vec![Some(gh), Some(ga)]
    }))
}

#[cfg(test)]
mod tests;
