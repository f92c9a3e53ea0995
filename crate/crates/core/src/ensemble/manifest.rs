//! On-disk ensemble: one checkpoint per member plus a TOML manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EnsembleModel, RoundDiagnostics, VoteRule};
use crate::error::Result;
use crate::eval::report::{read_toml, write_toml};
use crate::model::checkpoint::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    /// Relative to the manifest's directory.
    pub checkpoint: PathBuf,
    pub alpha: f64,
    pub round: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub num_classes: usize,
    pub vote: VoteRule,
    pub members: Vec<MemberEntry>,
    pub rounds: Vec<RoundDiagnostics>,
    pub degenerate_rounds: usize,
}

impl EnsembleManifest {
    /// Writes `member_NN.ckpt` files and `ensemble.toml` into `dir`; returns
    /// the manifest and every path written.
    pub fn save(
        ensemble: &EnsembleModel,
        rounds: &[RoundDiagnostics],
        degenerate_rounds: usize,
        dir: &Path,
    ) -> Result<(Self, Vec<PathBuf>)> {
        let mut written = Vec::new();
        let mut members = Vec::new();
        for (i, ((model, alpha), diag)) in ensemble.members.iter().zip(rounds.iter().filter(|r| r.accepted)).enumerate() {
            let name = PathBuf::from(format!("member_{:02}.ckpt", i + 1));
            let ck = Checkpoint::from(model.clone());
            ck.save(&dir.join(&name))?;
            written.push(dir.join(&name));
            members.push(MemberEntry { checkpoint: name, alpha: *alpha, round: diag.round, sha256: ck.sha256()? });
        }
        let manifest = Self {
            num_classes: ensemble.num_classes,
            vote: ensemble.vote,
            members,
            rounds: rounds.to_vec(),
            degenerate_rounds,
        };
        let path = dir.join("ensemble.toml");
        write_toml(&manifest, &path)?;
        written.push(path);
        Ok((manifest, written))
    }

    /// Reads `path` (an `ensemble.toml`) and its member checkpoints.
    pub fn load(path: &Path) -> Result<(Self, EnsembleModel)> {
        let manifest: Self = read_toml(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let members = manifest
            .members
            .iter()
            .map(|m| Ok((Checkpoint::load(&dir.join(&m.checkpoint))?.model, m.alpha)))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = EnsembleModel::new(members, manifest.vote)?;
        Ok((manifest, ensemble))
    }
}
