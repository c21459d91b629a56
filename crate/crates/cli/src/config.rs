use std::path::Path;

use emnet::infer::{Fusion, SlidingWindowSpec};
use emnet::network::NetworkConfig;
use emnet::phantom::PhantomSpec;
use emnet::train::TrainConfig;
use emnet::{Error, Result};
use serde::{Deserialize, Serialize};

/// Sliding-window settings; the window defaults to the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub window: Option<[usize; 3]>,
    pub overlap: f64,
    pub fusion: Fusion,
    pub sigma_scale: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        let d = SlidingWindowSpec::default();
        InferSection { window: None, overlap: d.overlap, fusion: d.fusion, sigma_scale: d.sigma_scale }
    }
}

impl InferSection {
    pub fn spec(&self, net: &NetworkConfig) -> Result<SlidingWindowSpec> {
        let window = self.window.unwrap_or(net.input);
        if window != net.input {
            return Err(Error::Config(format!("window {window:?} must equal the network input {:?}", net.input)));
        }
        Ok(SlidingWindowSpec { window, overlap: self.overlap, fusion: self.fusion, sigma_scale: self.sigma_scale })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}
