//! Experiment configuration: one sectioned TOML file with a default for every
//! field, strict unknown-key rejection, dotted command-line overrides, and the
//! run-directory layout used by the pipeline commands.
//!
//! All randomness funnels through the single root [`ExperimentConfig::seed`]:
//! [`ExperimentConfig::resolve`] copies it into the trainer (which splits it
//! into the named "craft" / "views" / "attack" / "init" streams) and derives
//! per-condition attack seeds for the evaluation section. The resolved config
//! is persisted verbatim with each run so a run can be reproduced from its
//! artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crafter::CrafterConfig;
use crate::data::ProtocolSpec;
use crate::error::{Error, Result};
use crate::evalkit::{Condition, ScoreVariant};
use crate::nets::ModelConfig;
use crate::rng::child_seed_at;
use crate::trainer::TrainConfig;

/// Fixed artifact filenames inside a run directory.
pub const CONFIG_RESOLVED_FILE: &str = "config.resolved";
pub const MODEL_CKPT_FILE: &str = "model.ckpt";
pub const THRESHOLD_CKPT_FILE: &str = "threshold.ckpt";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_TXT_FILE: &str = "report.txt";
pub const LOG_JSONL_FILE: &str = "log.jsonl";
pub const CRAFT_GRID_FILE: &str = "craft_grid.png";
pub const CRAFT_SUMMARY_FILE: &str = "craft_summary.txt";

/// Evaluation section: which attack conditions to measure and which anomaly
/// score the attacker targets. An unattacked baseline is always measured
/// first, so `conditions` lists only the attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub conditions: Vec<Condition>,
    pub score_variant: ScoreVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conditions: Vec::new(),
            score_variant: ScoreVariant::A,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, cond) in self.conditions.iter().enumerate() {
            match cond {
                Condition::Clean => {}
                Condition::Pgd { config } | Condition::Blackbox { config, .. } => {
                    config.validate().map_err(|e| {
                        Error::Config(format!("eval.conditions[{i}]: {e}"))
                    })?;
                }
                Condition::Fgsm { epsilon } => {
                    if !epsilon.is_finite() || *epsilon < 0.0 {
                        return Err(Error::Config(format!(
                            "eval.conditions[{i}]: fgsm epsilon must be finite and >= 0"
                        )));
                    }
                }
            }
            if let Condition::Blackbox { queries, .. } = cond {
                if *queries == 0 {
                    return Err(Error::Config(format!(
                        "eval.conditions[{i}]: blackbox queries must be >= 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The whole experiment: data protocol, model, crafter, training, evaluation,
/// plus the run identity and root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory name of this run under `output_dir`.
    pub run_id: String,
    pub output_dir: PathBuf,
    /// Root seed. `resolve` expands it into every module's stream seeds;
    /// per-section seed fields in the file are overwritten by that expansion
    /// and the final values appear in the persisted resolved config.
    pub seed: u64,
    pub data: ProtocolSpec,
    pub model: ModelConfig,
    pub crafter: CrafterConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            data: ProtocolSpec::default(),
            model: ModelConfig::default(),
            crafter: CrafterConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Keep derived seeds inside TOML's signed-integer range so a resolved config
/// always round-trips through the file format.
fn toml_safe_seed(seed: u64) -> u64 {
    seed & (i64::MAX as u64)
}

impl ExperimentConfig {
    /// Parse from TOML text. Unknown keys anywhere are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    /// Read and parse a config file; a missing file is a missing input, not a
    /// validation error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(format!("config file not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_toml_str(&text)
    }

    /// Load (or start from defaults when `path` is `None`), apply dotted
    /// `section.key=value` overrides, and deserialize. Overrides are applied
    /// on the raw TOML tree, so they are type-checked and unknown-key-checked
    /// exactly like file contents.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::NotFound {
                        Error::MissingInput(format!("config file not found: {}", p.display()))
                    } else {
                        Error::Io(e)
                    }
                })?;
                text.parse::<toml::Value>()
                    .map_err(|e| Error::Config(format!("config parse: {e}")))?
            }
            None => toml::Value::Table(toml::map::Map::new()),
        };
        for entry in overrides {
            apply_override(&mut tree, entry)?;
        }
        tree.try_into()
            .map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    /// Serialize the full config (defaults applied) as TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() {
            return Err(Error::Config("run_id must be non-empty".into()));
        }
        if self.run_id.contains(['/', '\\']) || self.run_id == "." || self.run_id == ".." {
            return Err(Error::Config(format!(
                "run_id must be a plain directory name (got {:?})",
                self.run_id
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must be non-empty".into()));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.crafter.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Expand the root seed into every consumer's seed field. Idempotent: the
    /// persisted resolved config resolves to itself.
    pub fn resolve(mut self) -> Self {
        self.train.seed = self.seed;
        self.data.seed = self.seed;
        for (i, cond) in self.eval.conditions.iter_mut().enumerate() {
            match cond {
                Condition::Pgd { config } | Condition::Blackbox { config, .. } => {
                    // One stream per condition; the single-element path cannot
                    // collide with the trainer's per-step [epoch, step] paths
                    // because the path length is part of the stream identity.
                    config.seed =
                        toml_safe_seed(child_seed_at(self.seed, "attack", &[i as u64]));
                }
                Condition::Clean | Condition::Fgsm { .. } => {}
            }
        }
        self
    }

    /// `output_dir/run_id`: where this run's artifacts live.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Artifact paths for this run.
    pub fn paths(&self) -> RunPaths {
        RunPaths {
            dir: self.run_dir(),
        }
    }
}

/// Fixed file layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        Ok(())
    }

    pub fn config_resolved(&self) -> PathBuf {
        self.dir.join(CONFIG_RESOLVED_FILE)
    }

    pub fn model_ckpt(&self) -> PathBuf {
        self.dir.join(MODEL_CKPT_FILE)
    }

    pub fn threshold_ckpt(&self) -> PathBuf {
        self.dir.join(THRESHOLD_CKPT_FILE)
    }

    pub fn report_csv(&self) -> PathBuf {
        self.dir.join(REPORT_CSV_FILE)
    }

    pub fn report_txt(&self) -> PathBuf {
        self.dir.join(REPORT_TXT_FILE)
    }

    pub fn log_jsonl(&self) -> PathBuf {
        self.dir.join(LOG_JSONL_FILE)
    }

    pub fn craft_grid(&self) -> PathBuf {
        self.dir.join(CRAFT_GRID_FILE)
    }

    pub fn craft_summary(&self) -> PathBuf {
        self.dir.join(CRAFT_SUMMARY_FILE)
    }
}

/// Apply one `section.key=value` (or `key=value`) override to a TOML tree.
/// The value side is parsed as a TOML literal (number, bool, string, array,
/// inline table); text that is not valid TOML is taken as a bare string.
fn apply_override(tree: &mut toml::Value, entry: &str) -> Result<()> {
    let trimmed = entry.strip_prefix("--").unwrap_or(entry);
    let (path, raw_value) = trimmed.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override {entry:?} must look like section.key=value"
        ))
    })?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!(
            "override {entry:?} has an empty path segment"
        )));
    }

    let leaf = parse_override_value(raw_value);

    let mut node = tree;
    for key in &keys[..keys.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!(
                "override {entry:?}: {key:?} is not a table in the config"
            ))
        })?;
        node = table
            .entry((*key).to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let last = keys[keys.len() - 1];
    let table = node.as_table_mut().ok_or_else(|| {
        Error::Config(format!(
            "override {entry:?}: parent of {last:?} is not a table"
        ))
    })?;
    table.insert(last.to_string(), leaf);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
