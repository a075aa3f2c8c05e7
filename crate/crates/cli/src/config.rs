use std::path::{Path, PathBuf};

use priorfuse_core::pilot::{PilotConfig, SelectionRule};
use priorfuse_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const DATA_ENV: &str = "DSF_CACHE";

/// Settings shared by every subcommand. Flags given on the command line
/// override the matching field here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Dataset root holding `ir/`, `vi/`, `labels/` directly or under `train/` and `test/`.
    pub data: Option<PathBuf>,
    pub pilot: PilotConfig,
    pub train: TrainConfig,
    pub selection: SelectionRule,
    /// Write fused outputs as RGB with the visible chroma reattached.
    pub rgb: bool,
}

impl RunConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        cfg.pilot.validate()?;
        cfg.train.validate()?;
        cfg.selection.validate()?;
        Ok(cfg)
    }

    /// Dataset root: the flag, then the config file, then `DSF_CACHE`.
    pub fn data_root(&self, flag: Option<&Path>) -> Result<PathBuf, Failure> {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| self.data.clone())
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Failure::Usage(format!(
                    "no dataset given; pass --data, set \"data\" in the config or {DATA_ENV}"
                ))
            })?;
        if !root.is_dir() {
            return Err(Failure::Usage(format!(
                "dataset directory {} does not exist",
                root.display()
            )));
        }
        Ok(root)
    }
}
