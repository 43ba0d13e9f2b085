use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::log::{log_path, ReplayLog};
use crate::{Error, Result};

/// Built-in data regimes plus a user-supplied pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Mixed,
    Suboptimal,
    Expert,
    #[serde(rename = "size_1m")]
    Size1M,
    #[serde(rename = "size_10m")]
    Size10M,
    #[serde(rename = "size_100m")]
    Size100M,
    Custom,
}

/// Which runs and checkpoints to read from each game, and how many leading
/// transitions of each checkpoint to keep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPattern {
    pub runs: Vec<u16>,
    pub checkpoints: Vec<u16>,
    pub per_checkpoint: u64,
}

impl Regime {
    /// Run/checkpoint/count layout of a built-in regime; `None` for `Custom`.
    pub fn pattern(self) -> Option<SelectionPattern> {
        let mixed = |n| SelectionPattern { runs: vec![1, 2], checkpoints: (1..=10).collect(), per_checkpoint: n };
        Some(match self {
            Regime::Mixed | Regime::Size10M => mixed(10_000),
            Regime::Size1M => mixed(1_000),
            Regime::Size100M => mixed(100_000),
            Regime::Suboptimal => SelectionPattern { runs: vec![1], checkpoints: vec![1, 2], per_checkpoint: 50_000 },
            Regime::Expert => SelectionPattern { runs: vec![1], checkpoints: vec![9, 10], per_checkpoint: 50_000 },
            Regime::Custom => return None,
        })
    }

    /// Epoch limit imposed by the regime itself.
    pub fn epoch_cap(self) -> Option<usize> {
        match self {
            Regime::Size100M => Some(10),
            _ => None,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mixed" => Regime::Mixed,
            "suboptimal" => Regime::Suboptimal,
            "expert" => Regime::Expert,
            "size_1m" | "size1m" => Regime::Size1M,
            "size_10m" | "size10m" => Regime::Size10M,
            "size_100m" | "size100m" => Regime::Size100M,
            "custom" => Regime::Custom,
            other => return Err(Error::InvalidArgument(format!("unknown regime `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub game: String,
    pub run: u16,
    pub checkpoint: u16,
    pub first_n: u64,
}

/// Declarative description of a curated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub regime: Regime,
    pub replay_root: PathBuf,
    pub total_count: u64,
    pub selections: Vec<Selection>,
}

impl DatasetManifest {
    pub fn games(&self) -> Vec<String> {
        let mut gs: Vec<String> = self.selections.iter().map(|s| s.game.clone()).collect();
        gs.sort();
        gs.dedup();
        gs
    }

    pub fn count_for(&self, game: &str) -> u64 {
        self.selections.iter().filter(|s| s.game == game).map(|s| s.first_n).sum()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::config("manifest", e.to_string()))?;
        let sum: u64 = m.selections.iter().map(|s| s.first_n).sum();
        if sum != m.total_count {
            return Err(Error::config("manifest.total_count", format!("{} disagrees with selections sum {sum}", m.total_count)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Builds the manifest for a built-in regime over `games`.
pub fn curate(regime: Regime, replay_root: &Path, games: &[String]) -> Result<DatasetManifest> {
    let pattern = regime
        .pattern()
        .ok_or_else(|| Error::InvalidArgument("custom regime needs an explicit selection pattern".into()))?;
    curate_with_pattern(regime, &pattern, replay_root, games)
}

/// Builds a manifest from an explicit pattern. Only headers are read.
pub fn curate_with_pattern(
    regime: Regime,
    pattern: &SelectionPattern,
    replay_root: &Path,
    games: &[String],
) -> Result<DatasetManifest> {
    if games.is_empty() || pattern.runs.is_empty() || pattern.checkpoints.is_empty() {
        return Err(Error::InvalidArgument("empty game, run or checkpoint list".into()));
    }
    let mut missing = Vec::new();
    let mut selections = Vec::new();
    for game in games {
        if !replay_root.join(game).is_dir() {
            missing.push(game.clone());
            continue;
        }
        for &run in &pattern.runs {
            for &checkpoint in &pattern.checkpoints {
                let path = log_path(replay_root, game, run, checkpoint);
                if !path.is_file() {
                    missing.push(format!("{game}/run_{run}/checkpoint_{checkpoint}"));
                    continue;
                }
                let header = ReplayLog::read_header(&path)?;
                if header.game != *game || header.run != run || header.checkpoint != checkpoint {
                    return Err(Error::ReplayFormat {
                        path,
                        reason: format!("header names {}/{}/{}", header.game, header.run, header.checkpoint),
                    });
                }
                if header.count < pattern.per_checkpoint {
                    return Err(Error::CurationShort {
                        game: game.clone(),
                        run,
                        checkpoint,
                        requested: pattern.per_checkpoint,
                        available: header.count,
                    });
                }
                selections.push(Selection { game: game.clone(), run, checkpoint, first_n: pattern.per_checkpoint });
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::CurationMissing { missing });
    }
    let total_count = selections.iter().map(|s| s.first_n).sum();
    Ok(DatasetManifest { regime, replay_root: replay_root.to_path_buf(), total_count, selections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{write_synthetic_corpus, SynthSpec};

    fn games(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("Game{i:02}")).collect()
    }

    #[test]
    fn builtin_patterns_match_regime_sizes() {
        let per_game = |r: Regime| {
            let p = r.pattern().unwrap();
            p.runs.len() as u64 * p.checkpoints.len() as u64 * p.per_checkpoint
        };
        assert_eq!(per_game(Regime::Mixed), 200_000);
        assert_eq!(per_game(Regime::Mixed) * 50, 10_000_000);
        assert_eq!(per_game(Regime::Suboptimal), 100_000);
        assert_eq!(Regime::Suboptimal.pattern().unwrap().checkpoints, vec![1, 2]);
        assert_eq!(per_game(Regime::Expert), 100_000);
        assert_eq!(per_game(Regime::Size1M) * 50, 1_000_000);
        assert_eq!(per_game(Regime::Size100M) * 50, 100_000_000);
        assert_eq!(Regime::Size100M.epoch_cap(), Some(10));
        assert_eq!(Regime::Mixed.epoch_cap(), None);
    }

    #[test]
    fn missing_games_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let gs = games(50);
        let pattern = SelectionPattern { runs: vec![1, 2], checkpoints: (1..=10).collect(), per_checkpoint: 3 };
        let spec = SynthSpec { runs: pattern.runs.clone(), checkpoints: pattern.checkpoints.clone(), per_checkpoint: 3, ..SynthSpec::default() };
        write_synthetic_corpus(dir.path(), &gs[..1], &spec).unwrap();
        match curate_with_pattern(Regime::Custom, &pattern, dir.path(), &gs) {
            Err(Error::CurationMissing { missing }) => {
                assert_eq!(missing.len(), 49);
                assert!(missing.contains(&"Game07".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_checkpoint_reports_available_count() {
        let dir = tempfile::tempdir().unwrap();
        let gs = games(1);
        let spec = SynthSpec { runs: vec![1], checkpoints: vec![1, 2], per_checkpoint: 5, ..SynthSpec::default() };
        write_synthetic_corpus(dir.path(), &gs, &spec).unwrap();
        let pattern = SelectionPattern { runs: vec![1], checkpoints: vec![1, 2], per_checkpoint: 8 };
        match curate_with_pattern(Regime::Custom, &pattern, dir.path(), &gs) {
            Err(Error::CurationShort { available, requested, .. }) => assert_eq!((available, requested), (5, 8)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_roundtrip_is_balanced_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let gs = games(3);
        let spec = SynthSpec { runs: vec![1, 2], checkpoints: vec![1, 2, 3], per_checkpoint: 6, ..SynthSpec::default() };
        write_synthetic_corpus(dir.path(), &gs, &spec).unwrap();
        let pattern = SelectionPattern { runs: vec![1, 2], checkpoints: vec![1, 3], per_checkpoint: 4 };
        let a = curate_with_pattern(Regime::Custom, &pattern, dir.path(), &gs).unwrap();
        let b = curate_with_pattern(Regime::Custom, &pattern, dir.path(), &gs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_count, 3 * 2 * 2 * 4);
        for g in &gs {
            assert_eq!(a.count_for(g), 16);
        }
        let text = a.to_toml().unwrap();
        assert_eq!(DatasetManifest::from_toml(&text).unwrap(), a);
        assert_eq!(a.to_toml().unwrap(), text);
    }
}
