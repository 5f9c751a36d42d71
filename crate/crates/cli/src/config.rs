use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use dlo_core::env::EnvConfig;
use dlo_core::neural::TrainConfig;
use dlo_core::policy::{FMode, SacConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

/// Ring-angle regime: the angle fixed at π/2 or drawn per episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Fix,
    Rand,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Fix => "fix",
            Regime::Rand => "rand",
        }
    }

    pub fn apply(self, env: &EnvConfig) -> EnvConfig {
        EnvConfig { fixed_theta: self == Regime::Fix, ..env.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub sweep_min: f64,
    pub sweep_max: f64,
    pub sweep_count: usize,
    pub per_sweep_augments: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Dataset file; defaults to `<out>/flex_dataset.jsonl`.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub gnn_hidden: usize,
    pub mlp_hidden: usize,
    pub train: TrainConfig,
    /// Also train the MLP and the GNN without augmentation.
    pub baselines: bool,
    /// Estimator used by `eval-flex` and the estimated-f policy mode;
    /// defaults to `<out>/estimator_gnn.json`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub regimes: Vec<Regime>,
    pub provide_f: Vec<bool>,
    pub seeds: usize,
    pub f_mode: FMode,
    /// Continue from existing checkpoints up to the configured budget.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub radius: f64,
    pub f_mode: FMode,
    /// Checkpoint directory; defaults to `<out>/checkpoints`.
    pub checkpoints: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub estimator: EstimatorSection,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk = Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            dataset: DatasetSection {
                sweep_min: 0.05,
                sweep_max: 1.0,
                sweep_count: 200,
                per_sweep_augments: 50,
                val_fraction: 0.1,
                test_fraction: 0.2,
                path: None,
            },
            estimator: EstimatorSection {
                gnn_hidden: 32,
                mlp_hidden: 8,
                train: TrainConfig::default(),
                baselines: true,
                checkpoint: None,
            },
            env: EnvConfig::default(),
            sac: SacConfig::default(),
            train: TrainSection {
                regimes: vec![Regime::Fix, Regime::Rand],
                provide_f: vec![true, false],
                seeds: 3,
                f_mode: FMode::Truth,
                resume: false,
            },
            eval: EvalSection { episodes: 100, radius: 0.01, f_mode: FMode::Truth, checkpoints: None },
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => Self {
                out_dir: PathBuf::from("runs/paper"),
                env: EnvConfig { radius_min: 0.01, radius_max: 0.01, ..desk.env.clone() },
                sac: SacConfig { episodes: 40_000, ..desk.sac.clone() },
                ..desk
            },
        }
    }

    /// Profile defaults overlaid with the TOML file, then the command-line
    /// overrides. Keys unknown to the schema are rejected.
    pub fn load(profile: Profile, file: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::profile(profile)).context("serializing profile defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let overlay: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, toml::Value::Table(overlay));
        }
        let mut cfg: Self = value.try_into().context("invalid configuration")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out_dir = o.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(0.0..=1.0).contains(&d.sweep_min) || !(0.0..=1.0).contains(&d.sweep_max) || d.sweep_min > d.sweep_max {
            bail!("dataset sweep range must satisfy 0 ≤ sweep_min ≤ sweep_max ≤ 1");
        }
        if d.sweep_count == 0 {
            bail!("dataset.sweep_count must be positive");
        }
        if self.estimator.gnn_hidden == 0 || self.estimator.mlp_hidden == 0 || self.estimator.train.batch == 0 {
            bail!("estimator widths and batch size must be positive");
        }
        self.env.validate(false)?;
        self.sac.validate()?;
        if self.train.regimes.is_empty() || self.train.provide_f.is_empty() || self.train.seeds == 0 {
            bail!("train needs at least one regime, one provide_f setting and one seed");
        }
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be positive");
        }
        if !(self.eval.radius > 0.0 && self.eval.radius < self.env.ring_outer_radius) {
            bail!("eval.radius must lie inside the ring's outer radius");
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.path.clone().unwrap_or_else(|| self.out_dir.join("flex_dataset.jsonl"))
    }

    pub fn dataset_meta_path(&self) -> PathBuf {
        self.dataset_path().with_extension("meta.json")
    }

    pub fn estimator_path(&self) -> PathBuf {
        self.estimator.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("estimator_gnn.json"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.eval.checkpoints.clone().unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn profiles_differ_in_budget_and_radius() {
        let desk = ExperimentConfig::profile(Profile::Desk);
        let paper = ExperimentConfig::profile(Profile::Paper);
        assert_eq!((desk.sac.episodes, paper.sac.episodes), (8000, 40_000));
        assert_eq!(paper.env.radius_max, 0.01);
        assert_eq!(desk.eval.radius, 0.01);
        desk.validate().unwrap();
        paper.validate().unwrap();
    }

    #[test]
    fn partial_sections_overlay_defaults() {
        let f = write("seed = 7\n[sac]\nepisodes = 500\n[env.primitive]\nhorizon = 100\n");
        let cfg = ExperimentConfig::load(Profile::Desk, Some(f.path()), None, None).unwrap();
        assert_eq!((cfg.seed, cfg.sac.episodes, cfg.env.primitive.horizon), (7, 500, 100));
        assert_eq!(cfg.sac.batch, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1\n", "[sac]\nepisodez = 3\n", "[env.primitive]\nkp2 = 1.0\n"] {
            let f = write(text);
            assert!(ExperimentConfig::load(Profile::Desk, Some(f.path()), None, None).is_err(), "{text}");
        }
    }

    #[test]
    fn flags_override_the_file() {
        let f = write("seed = 7\n");
        let cfg = ExperimentConfig::load(Profile::Desk, Some(f.path()), Some(3), Some(Path::new("x"))).unwrap();
        assert_eq!((cfg.seed, cfg.out_dir), (3, PathBuf::from("x")));
    }

    #[test]
    fn regime_sets_the_angle_mode() {
        let env = EnvConfig::default();
        assert!(Regime::Fix.apply(&env).fixed_theta);
        assert!(!Regime::Rand.apply(&env).fixed_theta);
    }
}
