//! Run configuration: a TOML file with one section per engine module.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use gatecut::data::{gen_blobs, gen_spirals, gen_teacher_student, load_mnist_dir, Dataset};
use gatecut::model::{NetworkSpec, WeightSet};
use gatecut::numerics::Rng;
use gatecut::odelab::{HostConfig, Method};
use gatecut::trainer::Hyperparams;

use crate::CliError;

/// Environment variable pointing at a directory with the four MNIST IDX files.
pub const MNIST_DIR_VAR: &str = "GATECUT_MNIST_DIR";

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of every section when present.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub trainer: Option<Hyperparams>,
    #[serde(default)]
    pub odelab: OdelabSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory the config file lives in; relative paths resolve against it.
    #[serde(skip)]
    pub base: PathBuf,
    /// SHA-256 of the effective configuration text.
    #[serde(skip)]
    pub hash: String,
}

/// Either a path to an architecture file or the architecture itself.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    File { architecture: PathBuf },
    Inline(NetworkSpec),
}

fn d_test_fraction() -> f64 {
    0.2
}
fn d_true() -> bool {
    true
}

// Unknown-field checks do not combine with the flattened source.
#[derive(Clone, Debug, Deserialize)]
pub struct DataSection {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    /// Standardize features with statistics of the training split.
    #[serde(default = "d_true")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Regression targets from a randomly initialized teacher (the model itself unless given).
    TeacherStudent {
        n: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        teacher: Option<PathBuf>,
    },
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
    },
    Spirals { n: usize, turns: f64 },
    /// The official split; `dir` falls back to `GATECUT_MNIST_DIR`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Keep only the first `limit` training rows.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn d_runs() -> usize {
    100
}
fn d_dt() -> f64 {
    1e-2
}
fn d_t_end() -> f64 {
    20.0
}
fn d_tol() -> f64 {
    1e-3
}
fn d_one() -> f64 {
    1.0
}
fn d_eta_samples() -> usize {
    500
}
fn d_trajectories() -> usize {
    3
}
fn d_regions() -> Vec<String> {
    vec!["block".into(), "unit".into()]
}
fn d_rk4() -> Method {
    Method::Rk4
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdelabSection {
    #[serde(default)]
    pub host: HostConfig,
    /// Initializations per region.
    #[serde(default = "d_runs")]
    pub runs: usize,
    /// Any of "block", "unit".
    #[serde(default = "d_regions")]
    pub regions: Vec<String>,
    /// Unit checked by the unit region sweep.
    #[serde(default)]
    pub unit: usize,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_t_end")]
    pub t_end: f64,
    #[serde(default = "d_rk4")]
    pub method: Method,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_one")]
    pub slack_c: f64,
    /// Random states used to estimate the Lipschitz-type constants.
    #[serde(default = "d_eta_samples")]
    pub eta_samples: usize,
    #[serde(default = "d_one")]
    pub eta_scale: f64,
    /// Trajectory CSVs written per region.
    #[serde(default = "d_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OdelabSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "d_true")]
    pub plots: bool,
    /// Write a checkpoint after every epoch instead of only at the end.
    #[serde(default)]
    pub checkpoint_every_epoch: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            plots: true,
            checkpoint_every_epoch: false,
        }
    }
}

impl RunConfig {
    /// Parses configuration text after applying `key=value` overrides.
    pub fn from_str_with(text: &str, origin: &str, base: &Path, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Input(format!("{origin}: {}", e.message())))?;
        for (key, value) in overrides {
            set_dotted(&mut doc, key, value.clone())?;
        }
        let effective = toml::to_string(&doc).expect("table serializes");
        let mut cfg: RunConfig = toml::from_str(&effective).map_err(|e| CliError::Input(format!("{origin}: {}", e.message())))?;
        cfg.base = base.to_path_buf();
        cfg.hash = hex(&Sha256::digest(effective.as_bytes()));
        if let Some(seed) = cfg.seed {
            if let Some(h) = cfg.trainer.as_mut() {
                h.seed = seed;
            }
            if let Some(d) = cfg.data.as_mut() {
                d.seed = seed;
            }
            cfg.odelab.seed = seed;
            cfg.odelab.host.seed = seed;
        }
        if let Some(h) = &cfg.trainer {
            h.validate().map_err(|e| CliError::Input(format!("{origin}: [trainer] {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_with(&text, &path.display().to_string(), &base, overrides)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn model(&self) -> Result<NetworkSpec, CliError> {
        match &self.model {
            None => Err(CliError::Input("config has no [model] section".into())),
            Some(ModelSection::Inline(spec)) => {
                spec.validate().map_err(|e| CliError::Input(format!("[model] {e}")))?;
                Ok(spec.clone())
            }
            Some(ModelSection::File { architecture }) => NetworkSpec::load(&self.resolve(architecture)).map_err(input),
        }
    }

    pub fn trainer(&self) -> Result<Hyperparams, CliError> {
        self.trainer
            .clone()
            .ok_or_else(|| CliError::Input("config has no [trainer] section".into()))
    }

    /// Builds the dataset, splits it and standardizes features.
    pub fn dataset(&self, model: &NetworkSpec) -> Result<Dataset, CliError> {
        let d = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::Input("config has no [data] section".into()))?;
        let root = Rng::new(d.seed);
        let mut rng = root.fork(1);
        let data = match &d.source {
            DataSource::TeacherStudent { n, noise, teacher } => {
                let tspec = match teacher {
                    Some(p) => NetworkSpec::load(&self.resolve(p)).map_err(input)?,
                    None => model.clone(),
                };
                let tw = WeightSet::init(&tspec, &mut root.fork(2));
                gen_teacher_student(&tspec, &tw, *n, *noise, &mut rng).map_err(input)?
            }
            DataSource::Blobs {
                n,
                classes,
                dim,
                separation,
            } => gen_blobs(*classes, *n, *dim, *separation, &mut rng).map_err(input)?,
            DataSource::Spirals { n, turns } => gen_spirals(*n, *turns, &mut rng).map_err(input)?,
            DataSource::Mnist { dir, limit } => {
                let dir = match dir {
                    Some(p) => self.resolve(p),
                    None => std::env::var_os(MNIST_DIR_VAR).map(PathBuf::from).ok_or_else(|| {
                        CliError::Input(format!("MNIST needs [data] dir or the {MNIST_DIR_VAR} variable"))
                    })?,
                };
                let mut data = load_mnist_dir(&dir).map_err(input)?;
                if let Some(k) = limit {
                    data.train.truncate(*k);
                }
                data
            }
        };
        let mut data = match d.source {
            DataSource::Mnist { .. } => data,
            _ => data.split(d.test_fraction, &mut root.fork(3)).map_err(input)?,
        };
        if d.standardize {
            data.standardize();
        }
        if data.input_width() != model.input_width() {
            return Err(CliError::Input(format!(
                "data has {} features but the model expects {}",
                data.input_width(),
                model.input_width()
            )));
        }
        Ok(data)
    }
}

fn input(e: gatecut::Error) -> CliError {
    CliError::Input(e.to_string())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets `a.b.c = value`, creating intermediate tables.
fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut t = doc;
    for p in path {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Input(format!("override {key}: {p} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parses one override value: TOML scalar syntax, falling back to a bare string.
pub fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// `KEY=v1,v2,...` into the key and its values.
pub fn parse_sweep(arg: &str) -> Result<(String, Vec<toml::Value>), CliError> {
    let (key, vals) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("--sweep expects KEY=v1,v2,..., got {arg}")))?;
    let vals: Vec<toml::Value> = vals.split(',').filter(|v| !v.is_empty()).map(parse_value).collect();
    if key.is_empty() || vals.is_empty() {
        return Err(CliError::Input(format!("--sweep expects KEY=v1,v2,..., got {arg}")));
    }
    Ok((key.to_string(), vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
[model]
task = "regression"
[[model.block]]
in = 2
hidden = 3
out = 1
skip = "dense"

[data]
kind = "spirals"
n = 40
turns = 1.0

[trainer]
nu = 0.1
epochs = 2
"#;

    #[test]
    fn overrides_and_seed() {
        let o = vec![("trainer.nu".to_string(), parse_value("0.5")), ("seed".to_string(), parse_value("9"))];
        let c = RunConfig::from_str_with(MIN, "t", Path::new("."), &o).unwrap();
        assert_eq!(c.trainer.as_ref().unwrap().nu, 0.5);
        assert_eq!(c.trainer.as_ref().unwrap().seed, 9);
        assert_eq!(c.data.as_ref().unwrap().seed, 9);
        let base = RunConfig::from_str_with(MIN, "t", Path::new("."), &[]).unwrap();
        assert_ne!(c.hash, base.hash);
        assert_eq!(c.model().unwrap().blocks.len(), 1);
    }

    #[test]
    fn sweep_syntax() {
        let (k, v) = parse_sweep("trainer.nu=0,0.1,1e-2").unwrap();
        assert_eq!(k, "trainer.nu");
        assert_eq!(v.len(), 3);
        assert_eq!(parse_value("abc"), toml::Value::String("abc".into()));
        assert!(parse_sweep("nu").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MIN}\n[output]\nplot = true\n");
        assert!(RunConfig::from_str_with(&bad, "t", Path::new("."), &[]).is_err());
    }
}
