//! Run configuration file. Every field is optional; command-line flags
//! override whatever is set here.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use zipkit::Error;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub targets: Option<Vec<f64>>,
    /// `bert` or `gpt2`; picks default targets and sample budget.
    pub profile: Option<String>,
    pub damping: Option<f64>,
    pub relative_damping: Option<f64>,
    pub seed: Option<u64>,
    pub sample_budget: Option<usize>,
    pub evaluator: Option<String>,
    pub steps: Option<usize>,
    pub mutation_prob: Option<f64>,
    pub interpolate: Option<bool>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Defaults for the two model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Bert,
    Gpt2,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self, Error> {
        match name {
            "bert" => Ok(Profile::Bert),
            "gpt2" => Ok(Profile::Gpt2),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile {other:?} (bert, gpt2)"
            ))),
        }
    }

    pub fn targets(self) -> Vec<f64> {
        match self {
            Profile::Bert => (2..=15).map(f64::from).collect(),
            Profile::Gpt2 => vec![1.5, 2.0, 2.5, 3.0],
        }
    }

    pub fn sample_budget(self) -> usize {
        match self {
            Profile::Bert => 2048,
            Profile::Gpt2 => 512,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_defaults() {
        assert_eq!(Profile::Bert.targets().len(), 14);
        assert_eq!(Profile::Bert.targets()[0], 2.0);
        assert_eq!(Profile::Bert.targets()[13], 15.0);
        assert_eq!(Profile::Gpt2.targets(), vec![1.5, 2.0, 2.5, 3.0]);
        assert_eq!(Profile::Bert.sample_budget(), 2048);
        assert_eq!(Profile::Gpt2.sample_budget(), 512);
    }

    #[test]
    fn parses_partial_file() {
        let c: RunConfig = toml::from_str("targets = [2.0, 3.0]\nseed = 7\n").unwrap();
        assert_eq!(c.targets, Some(vec![2.0, 3.0]));
        assert_eq!(c.seed, Some(7));
        assert!(c.model.is_none());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
