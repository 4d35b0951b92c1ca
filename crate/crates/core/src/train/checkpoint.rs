use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamWState;
use crate::error::{Error, Result};
use crate::features::AlignmentModel;

pub const CHECKPOINT_FORMAT: &str = "SISTA-CHECKPOINT v1";

/// Head parameters, optimizer moments and progress counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub epoch: usize,
    pub step: usize,
    pub model: AlignmentModel,
    pub optimizer: AdamWState,
}

impl Checkpoint {
    pub fn new(epoch: usize, step: usize, model: AlignmentModel, optimizer: AdamWState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            epoch,
            step,
            model,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(
                1,
                format!("unsupported checkpoint format `{}`", c.format),
            ));
        }
        let n = c.model.params().len();
        if c.optimizer.first.len() != n || c.optimizer.second.len() != n {
            return Err(Error::shape("optimizer state does not match the model"));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
