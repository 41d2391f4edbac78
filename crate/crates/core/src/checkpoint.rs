//! Versioned CBOR checkpoints.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};
use crate::head::DenoiserHead;
use crate::models::{Backbone, Network};
use crate::nn::Optimizer;
use crate::schedule::ScheduleKind;
use crate::tokenizer::FeatureStats;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelState {
    Teacher { network: Network },
    Gendd { student: Backbone, head: DenoiserHead, stats: FeatureStats },
    Kl { student: Network },
}

impl ModelState {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelState::Teacher { .. } => "teacher",
            ModelState::Gendd { .. } => "gendd",
            ModelState::Kl { .. } => "kl",
        }
    }
}

/// Schedules are rebuilt from these on load, never stored as arrays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub max_step: usize,
    pub sampling_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    /// Effective configuration the state was produced with.
    pub config_toml: String,
    pub step: usize,
    pub epoch: usize,
    pub teacher_checksum: String,
    pub schedule: Option<ScheduleParams>,
    pub state: ModelState,
    pub optimizer: Option<Optimizer>,
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| GenddError::io(dir, e))?;
        }
        // write then rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| GenddError::io(&tmp, e))?;
        ciborium::into_writer(self, BufWriter::new(file)).map_err(|e| GenddError::Serialization(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| GenddError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                GenddError::Setup(format!("checkpoint {} not found", path.display()))
            } else {
                GenddError::io(path, e)
            }
        })?;
        let ckpt: Checkpoint = ciborium::from_reader(BufReader::new(file))
            .map_err(|e| GenddError::Serialization(format!("{}: {e}", path.display())))?;
        ensure!(
            ckpt.version == CHECKPOINT_VERSION,
            "checkpoint {} has version {}, expected {CHECKPOINT_VERSION}",
            path.display(),
            ckpt.version
        );
        if let ModelState::Gendd { head, .. } = &ckpt.state {
            ensure!(
                head.version == crate::head::HEAD_VERSION,
                "head version {} is not supported",
                head.version
            );
        }
        Ok(ckpt)
    }

    pub fn teacher(&self) -> Result<&Network> {
        match &self.state {
            ModelState::Teacher { network } => Ok(network),
            other => Err(GenddError::Validation(format!("expected a teacher checkpoint, found `{}`", other.kind()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchKind, InputShape};
    use crate::nn::Params;

    #[test]
    fn round_trip_and_version_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let network = Network::build(ArchKind::Mlp, InputShape::vector(4), 5, 3, 1).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: "abc".into(),
            config_toml: String::new(),
            step: 7,
            epoch: 1,
            teacher_checksum: network.checksum(),
            schedule: None,
            state: ModelState::Teacher { network: network.clone() },
            optimizer: None,
            rng: None,
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.teacher().unwrap().checksum(), network.checksum());

        let mut old = ckpt;
        old.version = 0;
        old.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(GenddError::Validation(_))));
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(GenddError::Setup(_))));
        fs::write(&path, b"junk").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(GenddError::Serialization(_))));
    }
}
