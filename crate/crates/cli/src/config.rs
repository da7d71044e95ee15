//! The run configuration document and the data pipeline it drives.

use std::path::{Path, PathBuf};

use amtfnet::data::{
    compute_norm_stats, load_csv, stratified_split, synth_generate, GenConfig, NormStats, RawSeries, SplitSpec,
    WindowedDataset,
};
use amtfnet::model::{ModelConfig, Variant};
use amtfnet::train::TrainConfig;
use amtfnet::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a command needs. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub generator: Option<GenConfig>,
}

/// Architecture settings. `v` and the class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub w: usize,
    pub kernel_sizes: Vec<usize>,
    pub hidden: usize,
    pub reduction: usize,
    pub dropout_rate: f64,
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::new(1, 2);
        Self {
            w: c.w,
            kernel_sizes: c.kernel_sizes,
            hidden: c.hidden,
            reduction: c.reduction,
            dropout_rate: c.dropout_rate,
            variant: c.variant,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, v: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            v,
            w: self.w,
            kernel_sizes: self.kernel_sizes.clone(),
            hidden: self.hidden,
            num_classes,
            reduction: self.reduction,
            dropout_rate: self.dropout_rate,
            variant: self.variant,
        }
    }
}

/// Recorded runs on disk: either a manifest written by `generate`, or an
/// explicit file list with its class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub files: Vec<PathBuf>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Label of fault-free rows, the only rows used for z-score statistics.
    #[serde(default)]
    pub normal_label: usize,
}

/// Written next to the generated CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub generator_seed: u64,
    pub num_classes: usize,
    pub vars: usize,
    pub columns: Vec<String>,
    /// Class index → description, covering `0..num_classes`.
    pub classes: Vec<ClassEntry>,
    pub files: Vec<ManifestFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub label: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub file: String,
    pub mode: usize,
    pub condition: usize,
    pub rows: usize,
}

impl RunConfig {
    /// Parse and validate. Relative paths are resolved against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(data) = &mut config.data {
            if let Some(m) = &mut data.manifest {
                *m = base.join(&*m);
            }
            for f in &mut data.files {
                *f = base.join(&*f);
            }
        }
        if let Some(out) = &mut config.out {
            *out = base.join(&*out);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        // class count is unknown here; 2 is the smallest valid value
        self.model.resolve(1, 2).validate()?;
        if let Some(g) = &self.generator {
            g.validate()?;
        }
        if let Some(d) = &self.data {
            match (&d.manifest, d.files.is_empty(), d.num_classes) {
                (Some(_), true, None) => {}
                (None, false, Some(l)) if l >= 2 => {
                    if d.normal_label >= l {
                        return Err(Error::Config(format!("data.normal_label {} is outside 0..{l}", d.normal_label)));
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "data needs either \"manifest\" alone or \"files\" with \"num_classes\" >= 2".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Output directory from `--out` or the config.
    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set \"out\"".into()))
    }

    pub fn generator_seed(&self) -> u64 {
        self.generator.as_ref().and_then(|g| g.seed).unwrap_or(self.seed)
    }

    /// Runs from disk when `data` is set, else simulated from `generator`.
    pub fn load_series(&self) -> Result<Source> {
        if let Some(d) = &self.data {
            let (files, num_classes) = match &d.manifest {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                    let m: Manifest = serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    let dir = path.parent().unwrap_or(Path::new("."));
                    (m.files.iter().map(|f| dir.join(&f.file)).collect(), m.num_classes)
                }
                None => (d.files.clone(), d.num_classes.expect("validated")),
            };
            let series = files.iter().map(|f| load_csv(f, Some(num_classes))).collect::<Result<Vec<_>>>()?;
            return Source::new(series, num_classes, d.normal_label);
        }
        match &self.generator {
            Some(g) => {
                let runs = synth_generate(g, self.generator_seed())?;
                Source::new(runs.into_iter().map(|r| r.series).collect(), g.num_classes(), 0)
            }
            None => Err(Error::Config("no data source: set \"data\" or \"generator\"".into())),
        }
    }
}

/// Loaded runs that agree on their columns.
pub struct Source {
    pub series: Vec<RawSeries>,
    pub num_classes: usize,
    pub normal_label: usize,
}

impl Source {
    fn new(series: Vec<RawSeries>, num_classes: usize, normal_label: usize) -> Result<Self> {
        let first = series.first().ok_or_else(|| Error::Data("no data files".into()))?;
        if let Some(bad) = series.iter().find(|s| s.columns != first.columns) {
            return Err(Error::Data(format!(
                "column mismatch between runs: {:?} vs {:?}",
                first.columns, bad.columns
            )));
        }
        Ok(Self { series, num_classes, normal_label })
    }

    pub fn vars(&self) -> usize {
        self.series[0].vars()
    }

    /// Statistics from fault-free rows, then windows.
    pub fn windows(self, w: usize) -> Result<(WindowedDataset, NormStats)> {
        let stats = compute_norm_stats(&self.series, self.normal_label)?;
        let ds = WindowedDataset::slide(self.series, w, Some(stats.clone()))?;
        Ok((ds, stats))
    }
}

pub struct Prepared {
    pub model: ModelConfig,
    pub stats: NormStats,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

/// Load, normalize, window and split as configured.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let source = config.load_series()?;
    let model = config.model.resolve(source.vars(), source.num_classes);
    model.validate()?;
    let num_classes = source.num_classes;
    let (ds, stats) = source.windows(model.w)?;
    let (train, val, test) = stratified_split(&ds, &config.split, num_classes, config.seed)?;
    Ok(Prepared { model, stats, train, val, test })
}
