//! Run configuration: one TOML document covering every stage.
//!
//! Every section and key is optional and falls back to the defaults of the
//! owning module. Unknown keys are rejected. Command-line flags override
//! values read from the file, which override the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::compensation::SolverConfig;
use crate::dataset::{JointRanges, WorldBounds};
use crate::error::{Error, Result};
use crate::kinematics::{DhRow, DhTable, Mat4, IDENTITY4, JOINTS};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicsConfig {
    /// Built-in table name, used unless `rows` is given.
    pub nominal: String,
    /// Custom table: six rows of `[d_mm, a_mm, alpha_rad, theta_offset_rad]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<[[f64; 4]; JOINTS]>,
    /// Tool offset appended after the last joint (row-major 4x4).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool: Option<Mat4>,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self {
            nominal: "ur5".into(),
            rows: None,
            tool: None,
        }
    }
}

impl KinematicsConfig {
    /// Identifier recorded in checkpoints and the resolved table.
    pub fn table(&self) -> Result<(String, DhTable)> {
        let (id, mut table) = match &self.rows {
            Some(rows) => {
                let rows = rows.map(|[d, a, alpha, off]| DhRow::new(d, a, alpha, off));
                ("custom".to_string(), DhTable { rows, tool: IDENTITY4 })
            }
            None => {
                let table = DhTable::builtin(&self.nominal)
                    .ok_or_else(|| Error::Config(format!("unknown built-in table `{}`", self.nominal)))?;
                (self.nominal.clone(), table)
            }
        };
        if let Some(tool) = self.tool {
            table.tool = tool;
        }
        table.validate()?;
        Ok((id, table))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub joint_ranges_deg: JointRanges,
    /// Test-split positions handed to the inverse solver.
    pub targets: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 724,
            joint_ranges_deg: JointRanges::default(),
            targets: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub world: u64,
    /// Sampling and split assignment.
    pub data: u64,
    /// Weight initialization and batch order.
    pub model: u64,
    /// Choice of solver targets from the test split.
    pub targets: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            world: 2024,
            data: 7,
            model: 139,
            targets: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub kinematics: KinematicsConfig,
    pub world: WorldBounds,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub seeds: Seeds,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&artifact::read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.kinematics.table()?;
        self.world.validate()?;
        self.data.joint_ranges_deg.validate()?;
        if self.data.samples < 10 {
            return Err(Error::Config("data.samples must be at least 10".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.solver.validate()
    }

    /// Training settings with the model seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds.model,
            ..self.train.clone()
        }
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// Hash over everything except file locations, so the same computation
    /// run in two directories yields identical artifacts.
    pub fn provenance(&self) -> Provenance {
        let located = RunConfig {
            paths: PathsConfig::default(),
            ..self.clone()
        };
        Provenance::from_config_text(&located.to_toml())
    }
}
