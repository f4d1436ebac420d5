use std::path::{Path, PathBuf};
use std::str::FromStr;

use holounfold::pcd::PcdConfig;
use holounfold::propagation::OpticalConfig;
use holounfold::solvers::{DenoiserKind, UnfoldConfig};
use holounfold::train::TrainConfig;
use ini::Ini;

use crate::error::CliError;

/// Every key accepted in a config file, as `section.key`.
pub const KEYS: &[&str] = &[
    "optics.wavelength",
    "optics.pitch",
    "optics.distance",
    "optics.width",
    "optics.height",
    "solver.stages",
    "solver.iters",
    "solver.rho",
    "solver.denoiser",
    "solver.tv_weight",
    "solver.tv_iters",
    "train.lr",
    "train.epochs",
    "train.batch_size",
    "train.validation_fraction",
    "train.channels",
    "train.blocks",
    "paths.out",
    "paths.weights",
    "paths.metrics",
    "run.seed",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub optics: OpticalConfig,
    pub solver: UnfoldConfig,
    pub train: TrainConfig,
    pub pcd: PcdConfig,
    /// Iteration count for `gs` and `gd`; each command has its own default.
    pub iters: Option<usize>,
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optics: OpticalConfig::default(),
            solver: UnfoldConfig::default(),
            train: TrainConfig::default(),
            pcd: PcdConfig::default(),
            iters: None,
            out: PathBuf::from("out"),
            weights: None,
            metrics: None,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| CliError::Config(format!("invalid value `{value}` for {key}")))
}

impl RunConfig {
    /// Defaults overridden by the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            if !path.is_file() {
                return Err(CliError::Io {
                    path: path.to_path_buf(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
                });
            }
            let ini = Ini::load_from_file(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            for (section, props) in ini.iter() {
                for (key, value) in props.iter() {
                    let full = match section {
                        Some(s) => format!("{s}.{key}"),
                        None => format!("run.{key}"),
                    };
                    cfg.set(&full, value)?;
                }
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "optics.wavelength" => self.optics.wavelength = parse(key, value)?,
            "optics.pitch" => self.optics.pitch = parse(key, value)?,
            "optics.distance" => self.optics.distance = parse(key, value)?,
            "optics.width" => self.optics.width = parse(key, value)?,
            "optics.height" => self.optics.height = parse(key, value)?,
            "solver.stages" => self.solver.stages = parse(key, value)?,
            "solver.iters" => self.iters = Some(parse(key, value)?),
            "solver.rho" => self.solver.rho = parse(key, value)?,
            "solver.denoiser" => self.solver.denoiser = DenoiserKind::from_str(value.trim())?,
            "solver.tv_weight" => self.solver.tv_weight = parse(key, value)?,
            "solver.tv_iters" => self.solver.tv_iters = parse(key, value)?,
            "train.lr" => self.train.learning_rate = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.validation_fraction" => self.train.validation_fraction = parse(key, value)?,
            "train.channels" => self.pcd.channels = parse(key, value)?,
            "train.blocks" => self.pcd.blocks = parse(key, value)?,
            "paths.out" => self.out = PathBuf::from(value.trim()),
            "paths.weights" => self.weights = Some(PathBuf::from(value.trim())),
            "paths.metrics" => self.metrics = Some(PathBuf::from(value.trim())),
            "run.seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            other => {
                return Err(CliError::Config(format!("unknown config key `{other}`; known keys: {}", KEYS.join(", "))))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.optics.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        if self.pcd.channels == 0 || self.pcd.blocks == 0 {
            return Err(CliError::Config("channels and blocks must be at least 1".into()));
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| self.out.join("metrics.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ini");
        std::fs::write(&path, "seed = 7\n[optics]\ndistance = 0.5\nwidth = 64\n[solver]\ndenoiser = tv\n").unwrap();
        let mut cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.optics.distance, 0.5);
        assert_eq!(cfg.optics.width, 64);
        assert_eq!(cfg.solver.denoiser, DenoiserKind::ComplexTv);
        cfg.set("optics.distance", "0.25").unwrap();
        assert_eq!(cfg.optics.distance, 0.25);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let value = match *key {
                "solver.denoiser" => "none",
                k if k.starts_with("paths.") => "x",
                "train.validation_fraction" | "train.lr" | "solver.rho" => "0.5",
                "optics.wavelength" => "5e-7",
                "optics.pitch" => "8e-6",
                _ => "2",
            };
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("optics.colour", "1"), Err(CliError::Config(_))));
        assert!(matches!(cfg.set("optics.width", "wide"), Err(CliError::Config(_))));
    }
}
