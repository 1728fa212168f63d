//! Run configuration: one JSON file, merged over built-in defaults and
//! written back fully resolved into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use unisearch_core::corpus::Split;
use unisearch_core::{CorpusConfig, ModelConfig, StageConfig, DEFAULT_K};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub split: Split,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: DEFAULT_K,
            split: Split::Test,
        }
    }
}

/// One ablation variant: a stage run with overrides on top of the run's
/// stage config, optionally initialized from an earlier variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub stage: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub overrides: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub variants: Vec<Recipe>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        let r = |name: &str, stage, init: Option<&str>, overrides: Value| Recipe {
            name: name.into(),
            stage,
            init: init.map(String::from),
            overrides,
        };
        AblationSettings {
            seeds: vec![0, 1, 2],
            variants: vec![
                r("stage1", 1, None, Value::Null),
                r("stage1-t2i-only", 1, None, serde_json::json!({ "weights": { "alpha": 0.0 } })),
                r("stage2", 2, Some("stage1"), Value::Null),
                r("stage3", 3, Some("stage2"), Value::Null),
                r(
                    "stage3-no-nlu",
                    3,
                    Some("stage1"),
                    serde_json::json!({ "fused_queries": false, "weights": { "b": 0.0 } }),
                ),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Corpus location; `<out_dir>/data` when absent.
    pub data_dir: Option<PathBuf>,
    /// Seeds model initialization and every stage's batch order.
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// `vocab_size` 0 means "take it from the corpus".
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            stage1: StageConfig::for_stage(1),
            stage2: StageConfig::for_stage(2),
            stage3: StageConfig::for_stage(3),
            eval: EvalSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (_, Value::Null) => {}
        (b, p) => *b = p.clone(),
    }
}

impl RunConfig {
    /// Parses a partial config; every missing field, including fields
    /// inside the per-stage sections, takes its default.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        if !patch.is_object() {
            bail!("config must be a JSON object");
        }
        let mut full = serde_json::to_value(RunConfig::default())?;
        merge(&mut full, &patch);
        let mut cfg: RunConfig = serde_json::from_value(full).context("config has an invalid field")?;
        cfg.stage1.stage = 1;
        cfg.stage2.stage = 2;
        cfg.stage3.stage = 3;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        for s in [&mut self.stage1, &mut self.stage2, &mut self.stage3] {
            s.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.stage1, &self.stage2, &self.stage3] {
            s.validate()?;
        }
        if self.eval.k == 0 {
            bail!("eval.k must be at least 1");
        }
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.ablation.variants {
            if seen.contains(&r.name.as_str()) {
                bail!("ablation variant {:?} is listed twice", r.name);
            }
            if let Some(init) = &r.init {
                if !seen.contains(&init.as_str()) {
                    bail!("ablation variant {:?} starts from {init:?}, which must be listed earlier", r.name);
                }
            }
            if !(1..=3).contains(&r.stage) {
                bail!("ablation variant {:?} has stage {}", r.name, r.stage);
            }
            self.recipe_stage(r)?;
            seen.push(&r.name);
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn stage(&self, n: u8) -> Result<&StageConfig> {
        match n {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            _ => bail!("stage must be 1, 2 or 3, got {n}"),
        }
    }

    /// The run's stage config with the recipe's overrides applied.
    pub fn recipe_stage(&self, r: &Recipe) -> Result<StageConfig> {
        let mut v = serde_json::to_value(self.stage(r.stage)?)?;
        merge(&mut v, &r.overrides);
        let mut s: StageConfig =
            serde_json::from_value(v).with_context(|| format!("overrides of variant {:?}", r.name))?;
        s.stage = r.stage;
        s.validate()?;
        Ok(s)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
