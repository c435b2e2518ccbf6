//! TOML run configuration. Every section is optional; commands ask for the
//! ones they need. Unknown keys are rejected.
//!
//! ```toml
//! [scene]
//! kind = { kind = "two-plane-step" }
//! height = 64
//! width = 64
//!
//! [sampling]
//! protocol = { kind = "uniform-random", count = 205 }
//! noise = { kind = "boundary-mixing", radius = 2, rate = 0.3 }
//!
//! [propagation]
//! steps = 18
//! scheme = { kind = "abs-sum-star" }
//! neighbor_mode = { kind = "non-local", k = 8 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::learner::{AblationAxes, FitConfig};
use crate::norm::NormScheme;
use crate::propagation::{NeighborMode, PropagationConfig};
use crate::scenes::{SamplingSpec, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub modes: Vec<NeighborMode>,
    pub schemes: Vec<NormScheme>,
    #[serde(default = "both")]
    pub confidence: Vec<bool>,
}

fn both() -> Vec<bool> {
    vec![false, true]
}

impl AblationSection {
    pub fn axes(&self) -> AblationAxes {
        AblationAxes {
            modes: self.modes.clone(),
            schemes: self.schemes.clone(),
            confidence: self.confidence.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: Option<SceneSpec>,
    pub sampling: Option<SamplingSpec>,
    pub propagation: Option<PropagationConfig>,
    pub fit: Option<FitConfig>,
    pub ablation: Option<AblationSection>,
    pub output: Option<OutputSection>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FormatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FormatError::Config(e.to_string()).into())
    }

    /// Checks every present section.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.scene {
            s.validate()?;
        }
        if let Some(s) = &self.sampling {
            s.validate()?;
            if let (Some(scene), crate::scenes::SamplingProtocol::UniformRandom { count }) = (&self.scene, s.protocol) {
                if count > scene.height * scene.width {
                    return Err(Error::Config(format!(
                        "cannot draw {count} samples from a {}x{} scene",
                        scene.height, scene.width
                    )));
                }
            }
        }
        if let Some(p) = &self.propagation {
            p.validate()?;
        }
        if let Some(f) = &self.fit {
            f.validate()?;
        }
        if let Some(a) = &self.ablation {
            if a.modes.is_empty() || a.schemes.is_empty() || a.confidence.is_empty() {
                return Err(Error::Config("ablation axes must be non-empty".into()));
            }
            for m in &a.modes {
                if m.k() == 0 {
                    return Err(Error::Config("neighbor count K must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn scene(&self) -> Result<&SceneSpec> {
        self.scene.as_ref().ok_or_else(|| missing("scene"))
    }

    pub fn sampling(&self) -> Result<&SamplingSpec> {
        self.sampling.as_ref().ok_or_else(|| missing("sampling"))
    }

    pub fn propagation(&self) -> Result<&PropagationConfig> {
        self.propagation.as_ref().ok_or_else(|| missing("propagation"))
    }

    pub fn fit(&self) -> Result<&FitConfig> {
        self.fit.as_ref().ok_or_else(|| missing("fit"))
    }

    pub fn ablation(&self) -> Result<&AblationSection> {
        self.ablation.as_ref().ok_or_else(|| missing("ablation"))
    }
}

fn missing(section: &str) -> Error {
    Error::Config(format!("missing [{section}] section"))
}
