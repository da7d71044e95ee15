//! Synthetic multimode plant.
//!
//! The plant is a bank of `G` second-order loops, each with a process value
//! (PV) and a manipulated value (MV):
//!
//! ```text
//! y[k+1] = 1.2·y[k] − 0.4·y[k−1] + 0.2·gain·u[k] + d[k] + 0.05·y_next[k] + process noise
//! u[k]   = clamp(0.3·e[k] + 0.05·I[k], ±3),  I[k] = 0.98·I[k−1] + e[k],  e = setpoint − measured PV
//! ```
//!
//! The leaky integral only partially compensates disturbances, so a fault
//! produces a transient followed by a shifted steady state. A mode fixes the
//! setpoints and the actuator gain. The recorded variables are
//! `pv0, mv0, pv1, mv1, …`; PVs carry measurement noise and MVs are exact
//! controller outputs.
//!
//! Fault archetypes act on one loop each:
//! - `step`: constant added to the loop disturbance
//! - `random`: bounded uniform noise added to the measured PV
//! - `drift`: disturbance growing linearly from the onset
//! - `sticking`: MV frozen at its last pre-onset value

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};
use crate::rng::{sub_stream_rng, Stream};

const A1: f64 = 1.2;
const A2: f64 = -0.4;
const B0: f64 = 0.2;
const KP: f64 = 0.3;
const KI: f64 = 0.05;
const LEAK: f64 = 0.98;
const U_MAX: f64 = 3.0;
const COUPLING: f64 = 0.05;
/// Process noise relative to `noise_std`.
const PROCESS_NOISE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    /// One setpoint per loop.
    pub setpoints: Vec<f64>,
    /// Actuator gain multiplier.
    pub gain: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Step,
    Random,
    Drift,
    Sticking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Loop index.
    pub group: usize,
    /// Step size, noise half-width, or drift slope per step; unused for sticking.
    #[serde(default)]
    pub magnitude: f64,
    /// First faulty row; defaults to the config-wide onset.
    #[serde(default)]
    pub onset: Option<usize>,
}

fn default_onset() -> usize {
    200
}
fn default_burn_in() -> usize {
    300
}

/// Generator configuration. Fault `i` is class `i + 1`; class 0 is normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub modes: Vec<ModeSpec>,
    pub faults: Vec<FaultSpec>,
    /// Recorded rows per run.
    pub segment_len: usize,
    pub noise_std: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_onset")]
    pub onset: usize,
    /// Unrecorded steps simulated before row 0.
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

/// One simulated (mode, condition) run.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedRun {
    pub mode: usize,
    pub condition: usize,
    pub series: RawSeries,
}

impl GenConfig {
    /// Three modes, four loops (v = 8), one fault of each archetype (L = 5).
    pub fn benchmark(segment_len: usize) -> Self {
        let mode = |setpoints: [f64; 4], gain| ModeSpec {
            setpoints: setpoints.to_vec(),
            gain,
        };
        let fault = |kind, group, magnitude| FaultSpec {
            kind,
            group,
            magnitude,
            onset: None,
        };
        Self {
            modes: vec![
                mode([1.0, -0.5, 0.8, 0.3], 1.0),
                mode([2.5, 1.0, -1.0, 1.5], 1.4),
                mode([-1.0, 2.0, 1.5, -1.2], 0.7),
            ],
            faults: vec![
                fault(FaultKind::Step, 0, 2.0),
                fault(FaultKind::Random, 1, 0.5),
                fault(FaultKind::Drift, 2, 0.004),
                fault(FaultKind::Sticking, 3, 0.0),
            ],
            segment_len,
            noise_std: 0.05,
            seed: None,
            onset: default_onset(),
            burn_in: default_burn_in(),
        }
    }

    pub fn groups(&self) -> usize {
        self.modes.first().map_or(0, |m| m.setpoints.len())
    }

    pub fn vars(&self) -> usize {
        2 * self.groups()
    }

    pub fn num_classes(&self) -> usize {
        self.faults.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.modes.len() < 2 {
            return fail(format!("generator needs at least 2 modes, got {}", self.modes.len()));
        }
        if self.faults.is_empty() {
            return fail("generator needs at least one fault (2 classes)".into());
        }
        let g = self.groups();
        if g == 0 {
            return fail("modes must list at least one setpoint".into());
        }
        for (i, m) in self.modes.iter().enumerate() {
            if m.setpoints.len() != g {
                return fail(format!("mode {i} has {} setpoints, mode 0 has {g}", m.setpoints.len()));
            }
            if !(m.gain > 0.0 && m.gain.is_finite()) || m.setpoints.iter().any(|s| !s.is_finite()) {
                return fail(format!("mode {i} needs finite setpoints and a positive gain"));
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            if f.group >= g {
                return fail(format!("fault {i} targets loop {} but there are {g} loops", f.group));
            }
            if !f.magnitude.is_finite() {
                return fail(format!("fault {i} magnitude is not finite"));
            }
            if f.onset.unwrap_or(self.onset) >= self.segment_len {
                return fail(format!("fault {i} onset lies beyond segment_len {}", self.segment_len));
            }
        }
        if self.segment_len < 2 {
            return fail("segment_len must be at least 2".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// Simulate every (mode, condition) pair, mode-major. Condition 0 is the
/// fault-free run; condition `c` injects fault `c − 1` at its onset and labels
/// rows from the onset on as `c`. Each run draws from its own substream of
/// `seed`.
pub fn synth_generate(config: &GenConfig, seed: u64) -> Result<Vec<GeneratedRun>> {
    config.validate()?;
    let classes = config.num_classes();
    let mut runs = Vec::with_capacity(config.modes.len() * classes);
    for (mode, spec) in config.modes.iter().enumerate() {
        for condition in 0..classes {
            let fault = condition.checked_sub(1).map(|i| &config.faults[i]);
            let index = (mode * classes + condition) as u64;
            let series = simulate(config, spec, mode, condition, fault, &mut sub_stream_rng(seed, Stream::Generator, index))?;
            runs.push(GeneratedRun { mode, condition, series });
        }
    }
    Ok(runs)
}

fn simulate(
    config: &GenConfig,
    mode_spec: &ModeSpec,
    mode: usize,
    condition: usize,
    fault: Option<&FaultSpec>,
    rng: &mut impl Rng,
) -> Result<RawSeries> {
    let g = config.groups();
    let sigma = config.noise_std;
    let onset = fault.map(|f| (f.onset.unwrap_or(config.onset)) as i64);
    let (mut y, mut y_prev) = (vec![0.0; g], vec![0.0; g]);
    let mut integral = vec![0.0; g];
    let mut u = vec![0.0; g];

    let rows = config.segment_len;
    let mut values = Vec::with_capacity(rows * 2 * g);
    let mut labels = Vec::with_capacity(rows);
    let mut measured = vec![0.0; g];
    let mut disturbance = vec![0.0; g];
    for k in -(config.burn_in as i64)..rows as i64 {
        let active = onset.is_some_and(|o| k >= o);
        let since = onset.map_or(0, |o| k - o);
        disturbance.fill(0.0);
        for i in 0..g {
            let noise: f64 = rng.sample(StandardNormal);
            measured[i] = y[i] + sigma * noise;
        }
        if let (true, Some(f)) = (active, fault) {
            match f.kind {
                FaultKind::Step => disturbance[f.group] += f.magnitude,
                FaultKind::Drift => disturbance[f.group] += f.magnitude * since as f64,
                FaultKind::Random => {
                    let h = f.magnitude.abs();
                    if h > 0.0 {
                        measured[f.group] += rng.random_range(-h..h);
                    }
                }
                FaultKind::Sticking => {}
            }
        }
        let frozen = fault.filter(|f| active && f.kind == FaultKind::Sticking).map(|f| f.group);
        for i in 0..g {
            let e = mode_spec.setpoints[i] - measured[i];
            integral[i] = LEAK * integral[i] + e;
            if frozen != Some(i) {
                u[i] = (KP * e + KI * integral[i]).clamp(-U_MAX, U_MAX);
            }
        }
        if k >= 0 {
            for i in 0..g {
                values.push(measured[i]);
                values.push(u[i]);
            }
            labels.push(if active { condition } else { 0 });
        }
        let next: Vec<f64> = (0..g)
            .map(|i| {
                let noise: f64 = rng.sample(StandardNormal);
                A1 * y[i] + A2 * y_prev[i] + B0 * mode_spec.gain * u[i] + disturbance[i] + COUPLING * y[(i + 1) % g]
                    + PROCESS_NOISE * sigma * noise
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("plant diverged in mode {mode}, condition {condition}")));
        }
        y_prev = std::mem::replace(&mut y, next);
    }
    let columns = (0..g).flat_map(|i| [format!("pv{i}"), format!("mv{i}")]).collect();
    RawSeries::new(columns, values, labels, Some(vec![mode; rows]))
}
