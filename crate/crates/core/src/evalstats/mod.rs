//! Score normalization and aggregate statistics over games and seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{worker_rng, Distribution, GameRegistry};
use crate::{Error, Result};

/// One evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub game: String,
    pub method: String,
    pub seed: u64,
    pub protocol: String,
    pub score: f64,
}

/// Raw scores keyed by `(game, method, seed, protocol)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    records: Vec<ScoreRecord>,
    keys: BTreeSet<(String, String, u64, String)>,
}

fn key(r: &ScoreRecord) -> (String, String, u64, String) {
    (r.game.clone(), r.method.clone(), r.seed, r.protocol.clone())
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: ScoreRecord) -> Result<()> {
        if !record.score.is_finite() {
            return Err(Error::ScoreTable(format!("non-finite score for {} / {}", record.game, record.method)));
        }
        if !self.keys.insert(key(&record)) {
            return Err(Error::ScoreTable(format!(
                "duplicate record ({}, {}, seed {}, {})",
                record.game, record.method, record.seed, record.protocol
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut table = Self::new();
        for row in rdr.deserialize() {
            table.insert(row?)?;
        }
        Ok(table)
    }

    /// Merges every record of `other`; duplicates are an error.
    pub fn extend(&mut self, other: ScoreTable) -> Result<()> {
        for r in other.records {
            self.insert(r)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Appends one record to a score file, writing the header if the file is new.
    pub fn append_csv(path: &Path, record: &ScoreRecord) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if !fresh {
            let existing = Self::read_csv(path)?;
            if existing.keys.contains(&key(record)) {
                return Err(Error::ScoreTable(format!("{} already holds this record", path.display())));
            }
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(record)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Distinct values in first-appearance order.
    fn distinct(&self, f: impl Fn(&ScoreRecord) -> &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records.iter().map(|r| f(r)).filter(|v| seen.insert(v.to_string())).map(str::to_string).collect()
    }

    pub fn protocols(&self) -> Vec<String> {
        self.distinct(|r| &r.protocol)
    }

    pub fn methods(&self) -> Vec<String> {
        self.distinct(|r| &r.method)
    }

    /// Scores of `(method, protocol)` arranged game × seed, seeds ascending.
    /// Every listed game must have the same seed set.
    pub fn grid(&self, method: &str, protocol: &str, games: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut by_game: BTreeMap<&str, BTreeMap<u64, f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.method == method && r.protocol == protocol) {
            by_game.entry(&r.game).or_default().insert(r.seed, r.score);
        }
        let mut seeds: Option<Vec<u64>> = None;
        let mut out = Vec::with_capacity(games.len());
        for g in games {
            let row = by_game
                .get(g.as_str())
                .ok_or_else(|| Error::ScoreTable(format!("no {method} / {protocol} score for {g}")))?;
            let these: Vec<u64> = row.keys().copied().collect();
            match &seeds {
                Some(s) if *s != these => return Err(Error::ScoreTable(format!("incomplete seed grid for {method} / {protocol} at {g}"))),
                None => seeds = Some(these),
                _ => {}
            }
            out.push(row.values().copied().collect());
        }
        Ok(out)
    }

    /// Whether every `(game, method, protocol)` present has the same seed set.
    pub fn is_complete(&self) -> bool {
        let mut seeds: BTreeMap<(&str, &str, &str), BTreeSet<u64>> = BTreeMap::new();
        let mut combos = BTreeSet::new();
        let mut games = BTreeSet::new();
        for r in &self.records {
            seeds.entry((&r.game, &r.method, &r.protocol)).or_default().insert(r.seed);
            combos.insert((r.method.as_str(), r.protocol.as_str()));
            games.insert(r.game.as_str());
        }
        let mut sets = seeds.values();
        let first = match sets.next() {
            Some(s) => s,
            None => return true,
        };
        sets.all(|s| s == first) && seeds.len() == combos.len() * games.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Dqn,
    Rainbow2m,
}

impl ReferenceKind {
    /// Label of the normalized score.
    pub fn label(self) -> &'static str {
        match self {
            ReferenceKind::Dqn => "DNS",
            ReferenceKind::Rainbow2m => "RNS",
        }
    }
}

/// Anchors for normalizing one game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRef {
    pub game: String,
    pub random: f64,
    pub reference: f64,
    pub kind: ReferenceKind,
}

const BUILTIN_REFS: &str = include_str!("../../fixtures/normalization_refs.csv");

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalizationTable {
    refs: BTreeMap<String, NormalizationRef>,
}

impl NormalizationTable {
    pub fn new(refs: impl IntoIterator<Item = NormalizationRef>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in refs {
            let g = r.game.clone();
            if map.insert(g.clone(), r).is_some() {
                return Err(Error::ScoreTable(format!("duplicate normalization reference for {g}")));
            }
        }
        Ok(Self { refs: map })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn from_reader(r: impl std::io::Read) -> Result<Self> {
        let rows: std::result::Result<Vec<NormalizationRef>, _> = csv::Reader::from_reader(r).deserialize().collect();
        Self::new(rows?)
    }

    /// Random-agent, DQN and Rainbow anchors for the 65 evaluation games.
    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN_REFS.as_bytes()).expect("bundled anchors parse")
    }

    pub fn get(&self, game: &str) -> Option<&NormalizationRef> {
        self.refs.get(game)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

/// `(agent − min) / (max − min)` with min/max over the random and reference
/// scores, so a reference below random flips the scale.
pub fn normalize(agent: f64, r: &NormalizationRef) -> Result<f64> {
    let hi = r.random.max(r.reference);
    let lo = r.random.min(r.reference);
    if hi == lo {
        return Err(Error::ZeroDenominator { game: r.game.clone(), score: agent });
    }
    Ok((agent - lo) / (hi - lo))
}

/// Mean of the middle 50% of the sorted values; the samples straddling
/// the 25th and 75th percentile boundaries enter with fractional weight.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("IQM of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let (lo, hi) = (0.25 * n, 0.75 * n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, x) in v.iter().enumerate() {
        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        num += w * x;
        den += w;
    }
    Ok(num / den)
}

/// Mean shortfall below 1: `mean(max(0, 1 − v))`.
pub fn optimality_gap(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("optimality gap of an empty set".into()));
    }
    Ok(values.iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() / values.len() as f64)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (l, u) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[l] + (sorted[u] - sorted[l]) * (pos - l as f64)
}

/// Percentile interval of `statistic` under stratified resampling: each
/// game's seeds are resampled with replacement independently, and the
/// statistic is applied to every resampled score. Resample `i` draws from
/// its own stream of `seed`, so the result does not depend on threading.
pub fn stratified_bootstrap_ci(
    grid: &[Vec<f64>],
    resamples: usize,
    level: f64,
    seed: u64,
    statistic: impl Fn(&[f64]) -> Result<f64> + Sync,
) -> Result<(f64, f64)> {
    if grid.is_empty() || grid.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("bootstrap needs at least one score per game".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("bootstrap needs resamples ≥ 1 and level in (0, 1)".into()));
    }
    let stats: Result<Vec<f64>> = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = worker_rng(seed, i as u64);
            let sample: Vec<f64> = grid.iter().flat_map(|row| (0..row.len()).map(|_| row[rng.random_range(0..row.len())]).collect::<Vec<_>>()).collect();
            statistic(&sample)
        })
        .collect();
    let mut stats = stats?;
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { resamples: 2000, level: 0.95, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub protocol: String,
    pub distribution: Distribution,
    pub method: String,
    /// `DNS` or `RNS`.
    pub normalizer: String,
    pub games: usize,
    pub seeds: usize,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub optimality_gap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn find(&self, protocol: &str, distribution: Distribution, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.protocol == protocol && r.distribution == distribution && r.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut current = None;
        for r in &self.rows {
            let group = (r.protocol.as_str(), r.distribution);
            if current != Some(group) {
                writeln!(f, "[{} / {}] ({} games, {} seeds)", r.protocol, r.distribution.as_str(), r.games, r.seeds)?;
                current = Some(group);
            }
            writeln!(
                f,
                "  {:<10} IQM({}) {:>8.4}  CI [{:.4}, {:.4}]  gap {:.4}",
                r.method, r.normalizer, r.iqm, r.ci_low, r.ci_high, r.optimality_gap
            )?;
        }
        Ok(())
    }
}

/// Normalized score; a game whose anchors coincide contributes 0.
fn normalize_lenient(agent: f64, r: &NormalizationRef) -> f64 {
    match normalize(agent, r) {
        Ok(v) => v,
        Err(_) => {
            log::warn!("{}: random and reference scores coincide; normalized score set to 0", r.game);
            0.0
        }
    }
}

/// IQM, bootstrap interval and optimality gap of normalized scores for
/// every protocol, distribution and method present in `table`. Games are
/// grouped by `registry`; ID and Near-OOD games are expected to carry DQN
/// anchors and Far-OOD games Rainbow anchors.
pub fn aggregate_report(table: &ScoreTable, refs: &NormalizationTable, registry: &GameRegistry, cfg: &ReportConfig) -> Result<Report> {
    for r in table.records() {
        if !registry.contains(&r.game) {
            return Err(Error::UnknownGame(r.game.clone()));
        }
    }
    let mut rows = Vec::new();
    for protocol in table.protocols() {
        for dist in Distribution::ALL {
            let present: BTreeSet<&str> = table.records().iter().filter(|r| r.protocol == protocol).map(|r| r.game.as_str()).collect();
            let games: Vec<String> = registry.games(dist).iter().filter(|g| present.contains(g.as_str())).cloned().collect();
            if games.is_empty() {
                continue;
            }
            let expected = if dist == Distribution::FarOod { ReferenceKind::Rainbow2m } else { ReferenceKind::Dqn };
            let anchors: Vec<&NormalizationRef> = games
                .iter()
                .map(|g| refs.get(g).ok_or_else(|| Error::ScoreTable(format!("no normalization reference for {g}"))))
                .collect::<Result<_>>()?;
            if let Some(bad) = anchors.iter().find(|a| a.kind != expected) {
                return Err(Error::ScoreTable(format!("{} in {} needs a {:?} reference, found {:?}", bad.game, dist.as_str(), expected, bad.kind)));
            }
            for method in table.methods() {
                if !table.records().iter().any(|r| r.method == method && r.protocol == protocol && games.contains(&r.game)) {
                    continue;
                }
                let raw = table.grid(&method, &protocol, &games)?;
                let grid: Vec<Vec<f64>> = raw.iter().zip(&anchors).map(|(row, a)| row.iter().map(|&s| normalize_lenient(s, a)).collect()).collect();
                let flat: Vec<f64> = grid.iter().flatten().copied().collect();
                let (ci_low, ci_high) = stratified_bootstrap_ci(&grid, cfg.resamples, cfg.level, cfg.seed, iqm)?;
                rows.push(ReportRow {
                    protocol: protocol.clone(),
                    distribution: dist,
                    method,
                    normalizer: expected.label().to_string(),
                    games: games.len(),
                    seeds: grid[0].len(),
                    iqm: iqm(&flat)?,
                    ci_low,
                    ci_high,
                    optimality_gap: optimality_gap(&flat)?,
                });
            }
        }
    }
    Ok(Report { rows })
}
