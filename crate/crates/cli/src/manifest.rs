use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_digest: String,
    pub finished_unix: u64,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    /// Extra digests the stage depends on, e.g. the frozen weights.
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
}

/// What ran in a run directory, under which config, and what it wrote.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seed: u64,
    pub version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn artifact_version(digest: &str) -> String {
    format!("v{}-g{}", env!("CARGO_PKG_VERSION"), &digest[..digest.len().min(12)])
}

impl RunManifest {
    pub fn load_or_new(dir: &Path, digest: &str, seed: u64) -> CliResult<Self> {
        let p = dir.join(MANIFEST);
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| modaltune_core::Error::Io { path: p.clone(), source: e })?;
            return Ok(serde_json::from_str(&text)?);
        }
        let t = now_unix();
        Ok(Self {
            config_digest: digest.to_string(),
            seed,
            version: artifact_version(digest),
            created_unix: t,
            updated_unix: t,
            stages: BTreeMap::new(),
        })
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Err(CliError::MissingFile(p));
        }
        let text = std::fs::read_to_string(&p).map_err(|e| modaltune_core::Error::Io { path: p.clone(), source: e })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replaces the record of `stage`; the manifest digest follows the
    /// most recent stage.
    pub fn record(
        &mut self,
        dir: &Path,
        stage: &str,
        digest: &str,
        seed: u64,
        outputs: &[PathBuf],
        digests: BTreeMap<String, String>,
    ) -> CliResult<()> {
        let t = now_unix();
        let mut rel: Vec<String> = outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect();
        rel.sort();
        rel.dedup();
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_digest: digest.to_string(),
                finished_unix: t,
                outputs: rel,
                digests,
            },
        );
        self.config_digest = digest.to_string();
        self.seed = seed;
        self.version = artifact_version(digest);
        self.updated_unix = t;
        self.save(dir)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let p = dir.join(MANIFEST);
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| modaltune_core::Error::Io { path: p, source: e })?;
        Ok(())
    }

    /// The stage must exist and have run under `digest`.
    pub fn check_stage(&self, stage: &str, digest: &str) -> CliResult<&StageRecord> {
        let rec = self
            .stages
            .get(stage)
            .ok_or_else(|| CliError::Schema(format!("stage {stage} has not run in this directory")))?;
        if rec.config_digest != digest {
            return Err(CliError::Digest {
                what: format!("config used by {stage}"),
                expected: rec.config_digest.clone(),
                found: digest.to_string(),
            });
        }
        Ok(rec)
    }
}
