//! Line-based `key = value` configuration with `[section]` headers.
//!
//! ```text
//! [pipeline]
//! seed = 7
//! [train]
//! epochs = 20
//! ```
//!
//! `#` starts a comment. Unknown sections and keys are errors.

use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{parse_region, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::net::ScaleConfig;
use crate::recognition::DEFAULT_EM_ITERS;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub pairs: usize,
    pub folds: usize,
    pub far: f64,
    /// Test identities enrolled in the open-set gallery; the rest are impostors.
    pub open_gallery: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pairs: 600, folds: 10, far: 0.1, open_gallery: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Existing dataset directory; generated from `data` when absent.
    pub data_dir: Option<PathBuf>,
    pub data: SyntheticDatasetSpec,
    pub net: ScaleConfig,
    pub train: TrainConfig,
    pub pca_dim: usize,
    pub em_iters: usize,
    pub eval: EvalConfig,
    /// Also train the shallower baseline per region and compare accuracies.
    pub compare_depth: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            data: SyntheticDatasetSpec::default(),
            net: ScaleConfig {
                input_h: 16,
                input_w: 16,
                widths: [8, 12, 16, 24],
                feature_dim: 32,
                head_dim: 16,
                dropout_rate: 0.1,
                ..ScaleConfig::default()
            },
            train: TrainConfig { learning_rate: 0.03, epochs: 20, ..TrainConfig::default() },
            pca_dim: 64,
            em_iters: DEFAULT_EM_ITERS,
            eval: EvalConfig::default(),
            compare_depth: true,
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config { line, message: format!("bad value `{raw}` for `{key}`") })
}

fn list<const N: usize>(line: usize, key: &str, raw: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = raw.split(',').map(|s| value(line, key, s.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config { line, message: format!("`{key}` needs {N} comma-separated values") })
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut custom_regions = false;
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !["pipeline", "data", "net", "train", "recognition", "eval"].contains(&name) {
                    return Err(Error::Config { line, message: format!("unknown section `[{name}]`") });
                }
                section = name.to_owned();
                continue;
            }
            let Some((key, raw)) = content.split_once('=') else {
                return Err(Error::Config { line, message: format!("expected `key = value`, got `{content}`") });
            };
            let (key, raw) = (key.trim(), raw.trim());
            let d = &mut cfg.data;
            let n = &mut cfg.net;
            let t = &mut cfg.train;
            match (section.as_str(), key) {
                ("pipeline", "seed") => cfg.seed = value(line, key, raw)?,
                ("pipeline", "data_dir") => cfg.data_dir = Some(PathBuf::from(raw)),
                ("pipeline", "compare_depth") => cfg.compare_depth = value(line, key, raw)?,
                ("data", "train_identities") => d.train_identities = value(line, key, raw)?,
                ("data", "test_identities") => d.test_identities = value(line, key, raw)?,
                ("data", "images_per_identity") => d.images_per_identity = value(line, key, raw)?,
                ("data", "canvas") => [d.canvas_h, d.canvas_w] = list(line, key, raw)?,
                ("data", "translation") => d.translation = value(line, key, raw)?,
                ("data", "brightness") => d.brightness = value(line, key, raw)?,
                ("data", "noise") => d.noise_std = value(line, key, raw)?,
                ("data", "blobs") => d.blobs = value(line, key, raw)?,
                ("data", "region") => {
                    if !custom_regions {
                        d.regions.clear();
                        custom_regions = true;
                    }
                    d.regions.push(parse_region(raw).map_err(|message| Error::Config { line, message })?);
                }
                ("net", "input") => [n.input_h, n.input_w] = list(line, key, raw)?,
                ("net", "widths") => n.widths = list(line, key, raw)?,
                ("net", "feature_dim") => n.feature_dim = value(line, key, raw)?,
                ("net", "head_dim") => n.head_dim = value(line, key, raw)?,
                ("net", "dropout") => n.dropout_rate = value(line, key, raw)?,
                ("net", "lambda") => n.lambda = value(line, key, raw)?,
                ("net", "margin") => n.margin = value(line, key, raw)?,
                ("train", "learning_rate") => t.learning_rate = value(line, key, raw)?,
                ("train", "lr_decay") => t.lr_decay = value(line, key, raw)?,
                ("train", "momentum") => t.momentum = value(line, key, raw)?,
                ("train", "batch_size") => t.batch_size = value(line, key, raw)?,
                ("train", "epochs") => t.epochs = value(line, key, raw)?,
                ("train", "batches_per_epoch") => t.batches_per_epoch = Some(value(line, key, raw)?),
                ("train", "genuine_fraction") => t.genuine_fraction = value(line, key, raw)?,
                ("train", "weight_decay") => t.weight_decay = value(line, key, raw)?,
                ("train", "calibrate_margins") => t.calibrate_margins = value(line, key, raw)?,
                ("recognition", "pca_dim") => cfg.pca_dim = value(line, key, raw)?,
                ("recognition", "em_iters") => cfg.em_iters = value(line, key, raw)?,
                ("eval", "pairs") => cfg.eval.pairs = value(line, key, raw)?,
                ("eval", "folds") => cfg.eval.folds = value(line, key, raw)?,
                ("eval", "far") => cfg.eval.far = value(line, key, raw)?,
                ("eval", "open_gallery") => cfg.eval.open_gallery = value(line, key, raw)?,
                ("", _) => return Err(Error::Config { line, message: format!("`{key}` appears before any section") }),
                (s, _) => return Err(Error::Config { line, message: format!("unknown key `{key}` in `[{s}]`") }),
            }
        }
        Ok(cfg)
    }

    /// Replaces the run seed, which also seeds data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.pca_dim == 0 || self.em_iters == 0 {
            return Err(Error::Config { line: 0, message: "pca_dim and em_iters must be positive".into() });
        }
        let e = &self.eval;
        if e.folds < 2 || e.pairs < 2 * e.folds || !(e.far > 0.0 && e.far < 1.0) || e.open_gallery == 0 {
            return Err(Error::Config {
                line: 0,
                message: "eval needs folds >= 2, two pairs per fold, far in (0, 1) and a non-empty gallery".into(),
            });
        }
        self.train.validate()
    }
}
