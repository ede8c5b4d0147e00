//! Run manifests: one training run's checkpoints and their artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::behavior::{self, AccuracyResult};
use crate::error::{Error, Result};
use crate::ssi::{self, NormalizationPolicy, SsiOptions, SsiTable};
use crate::store;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    /// Cumulative training tokens, in millions.
    pub tokens: u64,
    /// Activation dump. Optional when `ssi` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump: Option<PathBuf>,
    /// Precomputed SSI table CSV, used instead of the dump when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssi: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub model_family: String,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl RunManifest {
    /// Reads a manifest, resolving relative paths against its directory and
    /// checking that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for c in &mut m.checkpoints {
            for p in [&mut c.dump, &mut c.ssi, &mut c.logprobs].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    return Err(Error::NotFound { path: p.clone() });
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Config(format!("run {:?} lists no checkpoints", self.run_id)));
        }
        for w in self.checkpoints.windows(2) {
            if w[0].tokens >= w[1].tokens {
                return Err(Error::Config(format!(
                    "run {:?}: checkpoints must be strictly increasing ({} then {})",
                    self.run_id, w[0].tokens, w[1].tokens
                )));
            }
        }
        if let Some(c) = self.checkpoints.iter().find(|c| c.dump.is_none() && c.ssi.is_none()) {
            return Err(Error::Config(format!("run {:?}: checkpoint {} has neither dump nor ssi", self.run_id, c.tokens)));
        }
        Ok(())
    }
}

/// SSI tables and accuracies of one run, keyed by checkpoint tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub run_id: String,
    pub model_family: String,
    pub seed: u64,
    pub checkpoints: Vec<u64>,
    pub tables: BTreeMap<u64, SsiTable>,
    pub accuracies: BTreeMap<u64, AccuracyResult>,
}

impl Trajectory {
    pub fn final_checkpoint(&self) -> u64 {
        *self.checkpoints.last().expect("trajectory has checkpoints")
    }
}

/// Computes (or reads) the SSI table and accuracy of every checkpoint.
pub fn load_trajectory(m: &RunManifest, opts: &SsiOptions) -> Result<Trajectory> {
    m.validate()?;
    let mut tables = BTreeMap::new();
    let mut accuracies = BTreeMap::new();
    for c in &m.checkpoints {
        let table = match (&c.ssi, &c.dump) {
            (Some(csv), _) => SsiTable::read_csv(csv)?,
            (None, Some(dump)) => {
                let dump = store::read_dump(dump)?;
                let deltas = ssi::compute_deltas_with(&dump, NormalizationPolicy::default(), opts.backend);
                drop(dump);
                ssi::compute_ssi_with(&deltas, opts)?
            }
            (None, None) => unreachable!("validated"),
        };
        if table.checkpoint_tokens != c.tokens {
            return Err(Error::Config(format!(
                "run {:?}: manifest lists checkpoint {} but its data reports {}",
                m.run_id, c.tokens, table.checkpoint_tokens
            )));
        }
        tables.insert(c.tokens, table);
        if let Some(lp) = &c.logprobs {
            accuracies.insert(c.tokens, behavior::accuracy(&store::read_logprobs(lp)?)?);
        }
    }
    Ok(Trajectory {
        run_id: m.run_id.clone(),
        model_family: m.model_family.clone(),
        seed: m.seed,
        checkpoints: m.checkpoints.iter().map(|c| c.tokens).collect(),
        tables,
        accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x").unwrap();
        let m = r#"{"run_id":"r","model_family":"f","seed":1,"checkpoints":[{"tokens":0,"ssi":"a.csv"}]}"#;
        std::fs::write(dir.path().join("m.json"), m).unwrap();
        let m = RunManifest::load(dir.path().join("m.json")).unwrap();
        assert_eq!(m.checkpoints[0].ssi.as_deref(), Some(dir.path().join("a.csv").as_path()));
    }

    #[test]
    fn rejects_missing_files_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let m = r#"{"run_id":"r","model_family":"f","seed":1,"checkpoints":[{"tokens":0,"dump":"gone.actd"}]}"#;
        std::fs::write(dir.path().join("m.json"), m).unwrap();
        assert!(matches!(RunManifest::load(dir.path().join("m.json")), Err(Error::NotFound { .. })));

        std::fs::write(dir.path().join("a.csv"), "x").unwrap();
        let m = r#"{"run_id":"r","model_family":"f","seed":1,"checkpoints":[{"tokens":4,"ssi":"a.csv"},{"tokens":2,"ssi":"a.csv"}]}"#;
        std::fs::write(dir.path().join("m.json"), m).unwrap();
        assert!(matches!(RunManifest::load(dir.path().join("m.json")), Err(Error::Config(_))));
    }
}
