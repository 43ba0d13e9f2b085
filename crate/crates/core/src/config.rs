//! Single-document experiment configuration with preset includes and
//! command-line overrides.
//!
//! A document may name `preset = "curl"` or a list such as
//! `preset = ["spr", "tiny", "base.toml"]`. Each entry is an objective name,
//! a backbone preset or a path to another document; entries are layered in
//! order and the document's own keys go on top. `--set a.b=value` overrides
//! are applied last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::augment::AugmentSpec;
use crate::data::{Distribution, GameRegistry, Regime, SelectionPattern};
use crate::evalstats::ReportConfig;
use crate::finetune::{OfflineBcSpec, RainbowSpec};
use crate::model::{BackbonePreset, ModelConfig};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::pretrain::{OptimizerSpec, PretrainConfig, ScheduleSpec};
use crate::{Error, Result};

/// Environment variable that replaces `data.replay_root`.
pub const REPLAY_ROOT_ENV: &str = "RLPT_REPLAY_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub per_checkpoint: u64,
    #[serde(default = "episode_len")]
    pub episode_len: [usize; 2],
}

fn episode_len() -> [usize; 2] {
    [20, 60]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub regime: Regime,
    pub replay_root: PathBuf,
    /// Defaults to the in-distribution games.
    #[serde(default)]
    pub games: Option<Vec<String>>,
    /// Selection for the `custom` regime.
    #[serde(default)]
    pub pattern: Option<SelectionPattern>,
    /// Use an existing manifest instead of curating.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Write a procedural corpus under `replay_root` before curating.
    #[serde(default)]
    pub synthetic: Option<SynthSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { regime: Regime::Mixed, replay_root: PathBuf::from("replay"), games: None, pattern: None, manifest: None, synthetic: None }
    }
}

impl DataSection {
    pub fn games(&self) -> Vec<String> {
        self.games.clone().unwrap_or_else(|| GameRegistry::builtin().games(Distribution::Id).to_vec())
    }

    pub fn pattern(&self) -> Result<SelectionPattern> {
        match (&self.pattern, self.regime.pattern()) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(p)) => Ok(p),
            (None, None) => Err(Error::config("data.pattern", "the custom regime needs a selection pattern")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub workers: usize,
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { workers: 1, max_steps_per_epoch: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// Target game of both protocols.
    pub game: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Label written to score files; defaults to the objective name.
    #[serde(default)]
    pub method: Option<String>,
    pub bc: OfflineBcSpec,
    pub rainbow: RainbowSpec,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { game: "Chain".into(), checkpoint: None, method: None, bc: OfflineBcSpec::default(), rainbow: RainbowSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default)]
    pub scores: Vec<PathBuf>,
    /// Normalization anchors; the bundled table when absent.
    #[serde(default)]
    pub refs: Option<PathBuf>,
    #[serde(default)]
    pub report: ReportConfig,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { scores: Vec::new(), refs: None, report: ReportConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamSection {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Raw `4×84×84` bytes.
    #[serde(default)]
    pub observation: Option<PathBuf>,
    /// Backbone output to visualize; the final stage when absent.
    #[serde(default)]
    pub stage: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleSpec,
    pub augment: AugmentSpec,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub evaluate: EvaluateSection,
    pub cam: CamSection,
}

impl ExperimentConfig {
    /// Published defaults for one objective on the full-size backbone.
    pub fn for_objective(kind: ObjectiveKind) -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelConfig::preset(BackbonePreset::R50like),
            objective: ObjectiveConfig::defaults(kind),
            optimizer: OptimizerSpec::for_objective(kind),
            schedule: ScheduleSpec::default(),
            augment: AugmentSpec::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            evaluate: EvaluateSection::default(),
            cam: CamSection::default(),
        }
    }

    /// Reads, layers and validates a document. `overrides` are `key.path=value`.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut table = resolve_file(path, 0)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg = Self::from_table(table)?;
        if let Ok(root) = std::env::var(REPLAY_ROOT_ENV) {
            if !root.is_empty() {
                cfg.data.replay_root = PathBuf::from(root);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a document from text; includes resolve against `base_dir`.
    pub fn from_str_in(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let doc = parse(text, "<inline>")?;
        let mut table = resolve_doc(doc, base_dir, 0)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(table: Table) -> Result<Self> {
        // Round-trip through text so errors carry the offending key.
        let text = toml::to_string(&table).map_err(|e| Error::config("config", e.to_string()))?;
        toml::from_str(&text).map_err(|e| Error::config(error_field(&e), e.message().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_config().validate()?;
        if self.pretrain.workers == 0 {
            return Err(Error::config("pretrain.workers", "must be ≥ 1"));
        }
        if self.finetune.game.is_empty() {
            return Err(Error::config("finetune.game", "must name a game"));
        }
        self.finetune.bc.validate()?;
        self.finetune.rainbow.validate()?;
        let r = &self.evaluate.report;
        if r.resamples == 0 || !(r.level > 0.0 && r.level < 1.0) {
            return Err(Error::config("evaluate.report", "resamples must be ≥ 1 and level in (0, 1)"));
        }
        if self.data.regime == Regime::Custom {
            self.data.pattern()?;
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            objective: self.objective.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
            augment: self.augment.clone(),
            seed: self.seed,
            workers: self.pretrain.workers,
            regime: Some(self.data.regime),
            max_steps_per_epoch: self.pretrain.max_steps_per_epoch,
        }
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// SHA-256 of the resolved configuration, excluding where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<out_dir>/<command>-<hash8>-s<seed>`.
    pub fn run_dir(&self, command: &str) -> PathBuf {
        self.out_dir.join(format!("{command}-{}-s{}", &self.hash()[..8], self.seed))
    }
}

fn error_field(e: &toml::de::Error) -> String {
    // Messages look like "unknown field `x`, expected ..." with no path; fall back to the message's key.
    let msg = e.message();
    match (msg.find('`'), msg[msg.find('`').map_or(0, |i| i + 1)..].find('`')) {
        (Some(i), Some(j)) => msg[i + 1..i + 1 + j].to_string(),
        _ => "config".to_string(),
    }
}

fn parse(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::config(origin, e.to_string()))
}

const MAX_INCLUDE_DEPTH: usize = 8;

fn resolve_file(path: &Path, depth: usize) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = parse(&text, &path.display().to_string())?;
    resolve_doc(doc, path.parent().unwrap_or(Path::new(".")), depth)
}

fn resolve_doc(mut doc: Table, base_dir: &Path, depth: usize) -> Result<Table> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::config("preset", "includes nest too deeply"));
    }
    let presets: Vec<String> = match doc.remove("preset") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(Error::config("preset", format!("entries must be strings, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::config("preset", format!("must be a string or list, got {other}"))),
    };
    let mut kind = presets.iter().find_map(|p| p.parse::<ObjectiveKind>().ok());
    if let Some(Value::Table(obj)) = doc.get("objective") {
        if let Some(Value::String(k)) = obj.get("kind") {
            kind = Some(k.parse().map_err(|_| Error::config("objective.kind", format!("unknown objective `{k}`")))?);
        }
    }
    let mut base = to_table(&ExperimentConfig::for_objective(kind.unwrap_or(ObjectiveKind::Curl)))?;
    for p in &presets {
        let layer = if let Ok(k) = p.parse::<ObjectiveKind>() {
            let c = ExperimentConfig::for_objective(k);
            let mut t = Table::new();
            t.insert("objective".into(), Value::try_from(&c.objective).map_err(ser)?);
            t.insert("optimizer".into(), Value::try_from(&c.optimizer).map_err(ser)?);
            t
        } else if let Some(b) = backbone_preset(p) {
            let mut t = Table::new();
            t.insert("model".into(), Value::try_from(ModelConfig::preset(b)).map_err(ser)?);
            t
        } else if p.ends_with(".toml") {
            resolve_file(&base_dir.join(p), depth + 1)?
        } else {
            return Err(Error::config("preset", format!("`{p}` is not an objective, backbone preset or .toml file")));
        };
        merge(&mut base, layer);
    }
    merge(&mut base, doc);
    Ok(base)
}

fn backbone_preset(name: &str) -> Option<BackbonePreset> {
    match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "r50like" | "resnet50" => Some(BackbonePreset::R50like),
        "r18like" | "resnet18" => Some(BackbonePreset::R18like),
        "cnn3" => Some(BackbonePreset::Cnn3),
        "tiny" => Some(BackbonePreset::Tiny),
        _ => None,
    }
}

fn ser(e: toml::ser::Error) -> Error {
    Error::config("config", e.to_string())
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    match Value::try_from(v).map_err(ser)? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("structs serialize to tables"),
    }
}

/// Deep merge: tables merge key by key, everything else is replaced.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`; the value is read as TOML and falls back to a string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let path = path.trim();
    let value = match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key segment"));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::config(path, format!("`{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
