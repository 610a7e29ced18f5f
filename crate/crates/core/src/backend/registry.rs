use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../assets/registry.toml");

/// One architecture's taps, input geometry and preprocessing constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchEntry {
    #[serde(skip)]
    pub name: String,
    pub builder: String,
    pub inversion_layer: String,
    pub base_channel_layer: String,
    pub n_channels: usize,
    pub base_spatial: [usize; 2],
    pub input_size: [usize; 2],
    pub input_channels: usize,
    pub num_classes: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Default checkpoint file name, or `builtin` for bundled weights.
    pub weights: String,
}

impl ArchEntry {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.input_channels, self.input_size[0], self.input_size[1])
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.input_channels || self.std.len() != self.input_channels {
            return Err(Error::config(format!(
                "architecture '{}': mean/std need {} entries",
                self.name, self.input_channels
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::config(format!("architecture '{}': std must be positive", self.name)));
        }
        if self.n_channels == 0 {
            return Err(Error::config(format!("architecture '{}': n_channels must be positive", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<String, ArchEntry>,
}

impl Registry {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("bundled registry is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, ArchEntry> =
            toml::from_str(text).map_err(|e| Error::config(format!("registry: {e}")))?;
        let mut entries = BTreeMap::new();
        for (name, mut entry) in raw {
            entry.name = name.clone();
            entry.validate()?;
            entries.insert(name, entry);
        }
        Ok(Self { entries })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&ArchEntry> {
        self.entries.get(name).ok_or_else(|| {
            Error::config(format!("unknown architecture '{name}'; registered: {}", self.names().join(", ")))
        })
    }
}
