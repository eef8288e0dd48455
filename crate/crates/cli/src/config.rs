use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use spa_core::data::{gaussian_blobs, gratings, load_dir, Dataset, GratingTask};
use spa_core::pruning::ScheduleConfig;
use spa_core::train::PretrainConfig;
use spa_core::{Error, Result};

/// Where samples come from. Generated sets are split into `train` and
/// `eval` samples drawn from one seeded stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Gratings {
        seed: u64,
        train: usize,
        eval: usize,
        #[serde(default)]
        task: GratingTask,
    },
    Blobs {
        seed: u64,
        train: usize,
        eval: usize,
        dim: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// `meta.toml` plus `samples.csv`; the last `eval` rows are held out.
    Dir { path: PathBuf, eval: usize },
}

fn default_spread() -> f64 {
    0.5
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (all, eval) = match self {
            DatasetSpec::Gratings { seed, train, eval, task } => (gratings(task, train + eval, *seed), *eval),
            DatasetSpec::Blobs {
                seed,
                train,
                eval,
                dim,
                classes,
                spread,
            } => (gaussian_blobs(train + eval, *dim, *classes, *spread, *seed), *eval),
            DatasetSpec::Dir { path, eval } => (load_dir(path)?, *eval),
        };
        if eval == 0 || eval >= all.len() {
            return Err(Error::Config(format!(
                "eval split of {eval} leaves no training or no evaluation samples out of {}",
                all.len()
            )));
        }
        Ok(all.split_off(eval))
    }

    fn resolve(&mut self, dir: &Path) {
        if let DatasetSpec::Dir { path, .. } = self {
            *path = dir.join(&*path);
        }
    }
}

/// Source-task training; unknown keys are still rejected by the flattened
/// options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub dataset: DatasetSpec,
    #[serde(flatten)]
    pub train: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub rank: usize,
    #[serde(default = "default_criterion")]
    pub criterion: String,
    pub out: PathBuf,
    /// Dense SPAD model to adapt. Without it a fresh network is built and,
    /// if `[pretrain]` is present, trained first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSpec>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn default_mode() -> String {
    "splora".into()
}

fn default_criterion() -> String {
    "taylor".into()
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.manifest = dir.join(&cfg.manifest);
        cfg.out = dir.join(&cfg.out);
        if let Some(b) = &mut cfg.base {
            *b = dir.join(&*b);
        }
        cfg.dataset.resolve(dir);
        if let Some(p) = &mut cfg.pretrain {
            p.dataset.resolve(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let exists = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} `{}` does not exist", p.display())))
            }
        };
        exists(&self.manifest, "manifest")?;
        if let Some(b) = &self.base {
            exists(b, "base model")?;
        }
        for spec in std::iter::once(&self.dataset).chain(self.pretrain.as_ref().map(|p| &p.dataset)) {
            if let DatasetSpec::Dir { path, .. } = spec {
                exists(path, "dataset directory")?;
            }
        }
        self.schedule.validate()?;
        spa_core::network::Mode::parse(&self.mode, self.rank).map_err(|e| Error::Config(e.to_string()))?;
        self.criterion
            .parse::<spa_core::pruning::Criterion>()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 3
            manifest = "m.toml"
            rank = 8
            out = "runs/a"
            [dataset]
            kind = "gratings"
            seed = 1
            train = 10
            eval = 5
            [schedule]
            final_density = 0.3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, "splora");
        assert_eq!(cfg.schedule.final_density, 0.3);
        assert_eq!(cfg.schedule.density_step, 0.05);
        assert!(matches!(cfg.dataset, DatasetSpec::Gratings { train: 10, .. }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"
            seed = 3
            manifest = "m.toml"
            out = "o"
            colour = "red"
            [dataset]
            kind = "blobs"
            seed = 1
            train = 10
            eval = 5
            dim = 2
            classes = 2
            "#;
        assert!(toml::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let bad = r#"
            manifest = "m.toml"
            out = "o"
            [dataset]
            kind = "dir"
            path = "d"
            eval = 1
            "#;
        assert!(toml::from_str::<RunConfig>(bad).unwrap_err().to_string().contains("seed"));
    }
}
