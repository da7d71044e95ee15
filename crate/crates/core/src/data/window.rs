use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{NormStats, RawSeries};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// One window: rows `end + 1 - w ..= end` of source run `source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub source: usize,
    pub end: usize,
    /// Label of the last row.
    pub label: usize,
    /// Mode of the last row, when the run carries modes. Metadata only.
    pub mode: Option<usize>,
}

/// Sliding windows over a set of runs. Windows never span two runs. The
/// window tensors are materialized on demand from the shared runs, and
/// depend on the variables only.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    sources: Arc<Vec<RawSeries>>,
    windows: Vec<WindowRef>,
    w: usize,
    stats: Option<NormStats>,
}

impl WindowedDataset {
    /// Stride-1 windows of length `w` over each run; a run of `N` rows gives
    /// `N - w + 1` windows.
    pub fn slide(series: Vec<RawSeries>, w: usize, stats: Option<NormStats>) -> Result<Self> {
        if w == 0 {
            return Err(Error::Data("window length must be positive".into()));
        }
        let v = series.first().ok_or_else(|| Error::Data("no series given".into()))?.vars();
        let mut windows = Vec::new();
        for (source, s) in series.iter().enumerate() {
            if s.vars() != v {
                return Err(Error::Data(format!("run {source} has {} variables, run 0 has {v}", s.vars())));
            }
            if s.rows() < w {
                return Err(Error::Data(format!(
                    "run {source} has {} rows, fewer than the window length {w}",
                    s.rows()
                )));
            }
            windows.extend((w - 1..s.rows()).map(|end| WindowRef {
                source,
                end,
                label: s.labels[end],
                mode: s.modes.as_ref().map(|m| m[end]),
            }));
        }
        Ok(Self {
            sources: Arc::new(series),
            windows,
            w,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.w
    }

    pub fn vars(&self) -> usize {
        self.sources[0].vars()
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn windows(&self) -> &[WindowRef] {
        &self.windows
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|r| r.label).collect()
    }

    /// Window `i` as `[v, w]`: row `j` is variable `j`, column `t` is time.
    pub fn window(&self, i: usize) -> Tensor {
        let (v, w) = (self.vars(), self.w);
        let mut data = vec![0.0; v * w];
        self.fill(i, &mut data);
        Tensor::new(vec![v, w], data).expect("window shape")
    }

    /// Windows `indices` stacked as `[B, v, w]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (v, w) = (self.vars(), self.w);
        assert!(!indices.is_empty(), "empty batch");
        let mut data = vec![0.0; indices.len() * v * w];
        for (chunk, &i) in data.chunks_exact_mut(v * w).zip(indices) {
            self.fill(i, chunk);
        }
        Tensor::new(vec![indices.len(), v, w], data).expect("batch shape")
    }

    fn fill(&self, i: usize, out: &mut [f64]) {
        let r = self.windows[i];
        let s = &self.sources[r.source];
        let w = self.w;
        let start = r.end + 1 - w;
        for t in 0..w {
            for (j, &x) in s.row(start + t).iter().enumerate() {
                out[j * w + t] = x;
            }
        }
    }

    /// The windows at `indices`, in that order, sharing the same runs.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sources: Arc::clone(&self.sources),
            windows: indices.iter().map(|&i| self.windows[i]).collect(),
            w: self.w,
            stats: self.stats.clone(),
        }
    }
}

/// Split proportions; applied per stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train_frac, self.val_frac, self.test_frac];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0, 1] and sum to 1")));
        }
        if self.val_frac + self.test_frac == 0.0 && self.train_frac < 1.0 {
            return Err(Error::Config("split fractions are inconsistent".into()));
        }
        Ok(())
    }

    /// (train, val, test) sizes for a stratum of `n`: `floor(train_frac·n)`
    /// for training, and the remainder shared by val/test in proportion,
    /// rounding in favor of val.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train_frac * n as f64 + 1e-9).floor() as usize).min(n);
        let rest = n - train;
        let held = self.val_frac + self.test_frac;
        let val = if held > 0.0 {
            ((rest as f64 * self.val_frac / held - 1e-9).ceil().max(0.0) as usize).min(rest)
        } else {
            0
        };
        (train, val, rest - val)
    }
}

/// Stratified shuffle split. Strata are (label, mode) when windows carry
/// modes, label alone otherwise. Every label in `0..num_classes` (crossed with
/// every mode seen) must have at least one window.
pub fn stratified_split(
    ds: &WindowedDataset,
    spec: &SplitSpec,
    num_classes: usize,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    spec.validate()?;
    let mut strata: BTreeMap<(usize, Option<usize>), Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.windows().iter().enumerate() {
        strata.entry((r.label, r.mode)).or_default().push(i);
    }
    let modes: Vec<Option<usize>> = {
        let mut m: Vec<_> = strata.keys().map(|k| k.1).collect();
        m.sort();
        m.dedup();
        if m.is_empty() {
            vec![None]
        } else {
            m
        }
    };
    for label in 0..num_classes {
        for &mode in &modes {
            if !strata.contains_key(&(label, mode)) {
                let which = match mode {
                    Some(m) => format!("(class {label}, mode {m})"),
                    None => format!("class {label}"),
                };
                return Err(Error::Data(format!("stratum {which} has no windows")));
            }
        }
    }
    if let Some(&(label, _)) = strata.keys().find(|k| k.0 >= num_classes) {
        return Err(Error::Data(format!("label {label} is outside 0..{num_classes}")));
    }

    let mut rng = stream_rng(seed, Stream::Split);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let (a, b, _) = spec.sizes(members.len());
        train.extend_from_slice(&members[..a]);
        val.extend_from_slice(&members[a..a + b]);
        test.extend_from_slice(&members[a + b..]);
    }
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(rows: usize, v: usize, label_of: impl Fn(usize) -> usize, mode: Option<usize>) -> RawSeries {
        RawSeries::new(
            (0..v).map(|j| format!("x{j}")).collect(),
            (0..rows * v).map(|k| k as f64).collect(),
            (0..rows).map(label_of).collect(),
            mode.map(|m| vec![m; rows]),
        )
        .unwrap()
    }

    #[test]
    fn window_counts() {
        let ds = WindowedDataset::slide(vec![run(100, 2, |_| 0, None)], 64, None).unwrap();
        assert_eq!(ds.len(), 37);
        let whole = WindowedDataset::slide(vec![run(64, 2, |_| 0, None)], 64, None).unwrap();
        assert_eq!(whole.len(), 1);
        let s = run(64, 2, |_| 0, None);
        let t = whole.window(0);
        for j in 0..2 {
            for i in 0..64 {
                assert_eq!(t.at(&[j, i]), s.row(i)[j]);
            }
        }
        assert!(WindowedDataset::slide(vec![run(63, 2, |_| 0, None)], 64, None).is_err());
    }

    #[test]
    fn windows_take_the_last_label_and_stay_in_their_run() {
        let ds = WindowedDataset::slide(
            vec![run(10, 1, |i| usize::from(i >= 6), Some(0)), run(7, 1, |_| 2, Some(1))],
            4,
            None,
        )
        .unwrap();
        assert_eq!(ds.len(), 7 + 4);
        let labels: Vec<_> = ds.windows().iter().map(|r| (r.source, r.label, r.mode)).collect();
        assert_eq!(&labels[..7], &[(0, 0, Some(0)), (0, 0, Some(0)), (0, 0, Some(0)), (0, 1, Some(0)), (0, 1, Some(0)), (0, 1, Some(0)), (0, 1, Some(0))]);
        assert!(labels[7..].iter().all(|&l| l == (1, 2, Some(1))));
        // the first window of run 1 starts at its own row 0
        assert_eq!(ds.window(7).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn window_tensor_ignores_labels_and_modes() {
        let a = run(20, 3, |_| 0, Some(2));
        let mut b = a.clone();
        b.labels = vec![4; 20];
        b.modes = None;
        let da = WindowedDataset::slide(vec![a], 8, None).unwrap();
        let db = WindowedDataset::slide(vec![b], 8, None).unwrap();
        let all: Vec<usize> = (0..da.len()).collect();
        assert_eq!(da.batch(&all), db.batch(&all));
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(100), (80, 10, 10));
        assert_eq!(spec.sizes(10), (8, 1, 1));
        assert_eq!(spec.sizes(11), (8, 2, 1));
        assert_eq!(spec.sizes(1), (0, 1, 0));
        assert_eq!(spec.sizes(5), (4, 1, 0));
    }

    #[test]
    fn empty_stratum_is_named() {
        let ds = WindowedDataset::slide(vec![run(20, 1, |_| 0, Some(0)), run(20, 1, |_| 1, Some(1))], 4, None).unwrap();
        let err = stratified_split(&ds, &SplitSpec::default(), 2, 0).unwrap_err().to_string();
        assert!(err.contains("(class 0, mode 1)"), "{err}");
        let plain = WindowedDataset::slide(vec![run(20, 1, |_| 0, None)], 4, None).unwrap();
        let err = stratified_split(&plain, &SplitSpec::default(), 2, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    proptest! {
        #[test]
        fn window_count_sums_over_runs(lengths in prop::collection::vec(8usize..60, 1..6), w in 1usize..8) {
            let runs: Vec<_> = lengths.iter().map(|&n| run(n, 2, |i| i % 3, None)).collect();
            let ds = WindowedDataset::slide(runs, w, None).unwrap();
            prop_assert_eq!(ds.len(), lengths.iter().map(|n| n - w + 1).sum::<usize>());
        }

        #[test]
        fn split_is_a_stable_partition(
            lengths in prop::collection::vec(12usize..80, 2..6),
            seed in any::<u64>(),
        ) {
            let runs: Vec<_> = lengths
                .iter()
                .enumerate()
                .map(|(k, &n)| run(n, 1, move |i| (i + k) % 3, Some(k % 2)))
                .collect();
            let ds = WindowedDataset::slide(runs, 4, None).unwrap();
            let (tr, va, te) = stratified_split(&ds, &SplitSpec::default(), 3, seed).unwrap();
            let mut seen: Vec<(usize, usize)> = [&tr, &va, &te]
                .iter()
                .flat_map(|d| d.windows().iter().map(|r| (r.source, r.end)))
                .collect();
            prop_assert_eq!(seen.len(), ds.len());
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), ds.len());

            let mut strata: BTreeMap<(usize, Option<usize>), [usize; 4]> = BTreeMap::new();
            for r in ds.windows() { strata.entry((r.label, r.mode)).or_default()[3] += 1; }
            for (part, d) in [&tr, &va, &te].iter().enumerate() {
                for r in d.windows() { strata.get_mut(&(r.label, r.mode)).unwrap()[part] += 1; }
            }
            for counts in strata.values() {
                let (a, b, c) = SplitSpec::default().sizes(counts[3]);
                prop_assert_eq!([counts[0], counts[1], counts[2]], [a, b, c]);
            }

            let again = stratified_split(&ds, &SplitSpec::default(), 3, seed).unwrap();
            prop_assert_eq!(again.0.windows(), tr.windows());
            prop_assert_eq!(again.2.windows(), te.windows());
        }
    }
}
