//! Plain-text `key = value` configuration with `[section]` headers.
//!
//! Recognized sections are `[lmc]`, `[kernels]`, `[model]` and `[train]`.
//! Every section maps onto a struct implementing [`ConfigSection`]; values
//! not present in the file keep their compiled-in defaults.

use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

use crate::lmc_synth::LmcConfig;
use crate::model::ModelConfig;
use crate::train_eval::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Read(String),
    #[error("[{section}] {key}: {message}")]
    Invalid {
        section: String,
        key: String,
        message: String,
    },
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
}

/// A configuration struct that can be updated key by key.
pub trait ConfigSection {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String>;

    /// All keys with their current values, in a form `set` accepts.
    fn entries(&self) -> Vec<(String, String)>;
}

pub fn parse_value<T: FromStr>(value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse {value:?}"))
}

pub fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_value)
        .collect()
}

/// Parses `lo,hi` with `lo <= hi`.
pub fn parse_range(value: &str) -> Result<(f64, f64), String> {
    match parse_list::<f64>(value)?.as_slice() {
        &[lo, hi] if lo <= hi && lo.is_finite() && hi.is_finite() => Ok((lo, hi)),
        _ => Err(format!("expected `lo,hi` with lo <= hi, got {value:?}")),
    }
}

/// The full resolved configuration of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    /// `[kernels]` is read into `lmc.kernels`.
    pub lmc: LmcConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ConfigError::Read(format!("{}: {e}", path.as_ref().display())))?;
        self.merge_str(&text)
    }

    pub fn merge_str(&mut self, text: &str) -> Result<(), ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Read(e.to_string()))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(ConfigError::UnknownSection("<global>".into()));
                }
                continue;
            };
            let target: &mut dyn ConfigSection = match section {
                "lmc" => &mut self.lmc,
                "kernels" => &mut self.lmc.kernels,
                "model" => &mut self.model,
                "train" => &mut self.train,
                other => return Err(ConfigError::UnknownSection(other.to_string())),
            };
            for (key, value) in props.iter() {
                target.set(key, value).map_err(|message| ConfigError::Invalid {
                    section: section.to_string(),
                    key: key.to_string(),
                    message,
                })?;
            }
        }
        Ok(())
    }

    /// Renders every value, defaults included, in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let sections: [(&str, &dyn ConfigSection); 4] = [
            ("lmc", &self.lmc),
            ("kernels", &self.lmc.kernels),
            ("model", &self.model),
            ("train", &self.train),
        ];
        for (name, section) in sections {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in section.entries() {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults() {
        let mut cfg = RunConfig::default();
        cfg.merge_str("[lmc]\nweibull_shape = 2.0\n\n[kernels]\nperiods = 7,24\n\n[train]\nepochs = 3\n")
            .unwrap();
        assert_eq!(cfg.lmc.weibull_shape, 2.0);
        assert_eq!(cfg.lmc.kernels.periods, vec![7.0, 24.0]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn rendered_text_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.merge_str("[model]\nnum_layers = 3\n").unwrap();
        let mut again = RunConfig::default();
        again.merge_str(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::default()
            .merge_str("[lmc]\nweibull_shape = abc\n")
            .unwrap_err();
        assert!(err.to_string().contains("weibull_shape"), "{err}");
        assert!(matches!(
            RunConfig::default().merge_str("[bogus]\nx = 1\n"),
            Err(ConfigError::UnknownSection(_))
        ));
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("0.1, 5").unwrap(), (0.1, 5.0));
        assert!(parse_range("5,1").is_err());
        assert!(parse_range("1").is_err());
    }
}
