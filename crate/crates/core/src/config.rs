//! Model and run configuration.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network sizes shared by every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input resolution in pixels.
    pub resolution: usize,
    /// Channel width C of visual tokens, the decoder and the condition tokens.
    pub channels: usize,
    /// Encoder stride s; the embedding has (H/s)·(W/s) tokens. Power of two, at least 4.
    pub encoder_stride: usize,
    pub encoder_width: usize,
    /// Query count of the resampler reading decoder hidden states.
    pub m_llm: usize,
    /// Query count of the resampler reading encoder tokens; also the `<IMG>` run length.
    pub m_enc: usize,
    pub resampler_depth: usize,
    pub heads: usize,
    pub lm_layers: usize,
    pub max_len: usize,
    pub tie_head: bool,
    pub dm_width: usize,
    pub dm_patch: usize,
    pub dm_depth: usize,
    pub timesteps: usize,
    /// "f32" or "f64".
    pub dtype: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 128,
            encoder_stride: 8,
            encoder_width: 32,
            m_llm: 8,
            m_enc: 8,
            resampler_depth: 2,
            heads: 4,
            lm_layers: 4,
            max_len: 2048,
            tie_head: false,
            dm_width: 64,
            dm_patch: 4,
            dm_depth: 2,
            timesteps: 100,
            dtype: "f32".into(),
        }
    }
}

impl ModelConfig {
    /// Minimal sizes used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            resolution: 16,
            channels: 32,
            encoder_stride: 8,
            encoder_width: 8,
            m_llm: 4,
            m_enc: 4,
            resampler_depth: 1,
            heads: 2,
            lm_layers: 2,
            max_len: 64,
            tie_head: false,
            dm_width: 32,
            dm_patch: 4,
            dm_depth: 1,
            timesteps: 20,
            dtype: "f64".into(),
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unsupported dtype {other:?}"))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.resolution / self.encoder_stride;
        (g, g)
    }

    pub fn num_visual_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.encoder_stride;
        if s < 4 || !s.is_power_of_two() {
            return Err(Error::Config(format!("encoder_stride must be a power of two >= 4, got {s}")));
        }
        if self.resolution % s != 0 || self.resolution % self.dm_patch != 0 {
            return Err(Error::Config("resolution must be divisible by encoder_stride and dm_patch".into()));
        }
        if self.channels % self.heads != 0 || self.dm_width % self.heads != 0 {
            return Err(Error::Config("channel widths must be divisible by heads".into()));
        }
        if self.m_llm == 0 || self.m_enc == 0 {
            return Err(Error::Config("resampler query counts must be positive".into()));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("need at least two diffusion steps".into()));
        }
        self.dtype()?;
        Ok(())
    }
}

/// Prefix of environment variables that override configuration keys.
/// Nested keys are joined with `__`: `MMFB_MODEL__CHANNELS=64`,
/// `MMFB_STAGE__S1__TOTAL_STEPS=200`.
pub const ENV_PREFIX: &str = "MMFB_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: std::path::PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sources: Vec<DataSource>,
    /// Documents drawn from the mixture per epoch; 0 means the sum of source sizes.
    pub samples: usize,
    pub max_len: usize,
    /// Pack several documents per sequence; otherwise one document each.
    pub pack: bool,
    /// Overrides every stage's condition dropout when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_drop: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            samples: 0,
            max_len: crate::sequence::DEFAULT_MAX_LEN,
            pack: true,
            condition_drop: None,
        }
    }
}

/// Per-stage override tables; each is merged over the stage's published preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTables {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s3: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: std::path::PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage: StageTables,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage: StageTables::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    // Reuse the TOML literal grammar for numbers, booleans and arrays;
    // anything else is a plain string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `MMFB_*` variables from `vars` onto a raw table.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut applied = Vec::new();
    for (key, value) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let parts: Vec<String> = path.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let mut cur = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
        }
        cur.insert(parts.last().unwrap().clone(), parse_env_value(&value));
        applied.push(parts.join("."));
    }
    Ok(applied)
}

impl RunConfig {
    /// Parses TOML text, applies environment overrides and validates.
    /// Unknown keys anywhere are errors.
    pub fn from_toml_str<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        apply_env_overrides(&mut table, env)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.model.validate()?;
        for stage in [crate::training::Stage::S1, crate::training::Stage::S2, crate::training::Stage::S3] {
            cfg.stage_config(stage)?.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, std::env::vars())
    }

    /// Checks that every referenced data file exists.
    pub fn check_paths(&self) -> Result<()> {
        for s in &self.data.sources {
            if !s.path.exists() {
                return Err(Error::Config(format!("data source {} does not exist", s.path.display())));
            }
        }
        Ok(())
    }

    /// The stage preset with this config's overrides merged on top.
    pub fn stage_config(&self, stage: crate::training::Stage) -> Result<crate::training::StageConfig> {
        use crate::training::{Stage, StageConfig};
        let preset = StageConfig::preset(stage);
        let over = match stage {
            Stage::S1 => &self.stage.s1,
            Stage::S2 => &self.stage.s2,
            Stage::S3 => &self.stage.s3,
        };
        let Some(over) = over else {
            return Ok(preset);
        };
        let mut base = toml::Table::try_from(&preset).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: StageConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("stage.{}: {}", stage.name(), e.message())))?;
        if cfg.stage != stage {
            return Err(Error::Config(format!("stage.{} declares stage {:?}", stage.name(), cfg.stage)));
        }
        Ok(cfg)
    }

    /// Serializes the resolved configuration (all stages expanded).
    pub fn resolved(&self) -> Result<serde_json::Value> {
        use crate::training::Stage;
        let mut v = serde_json::to_value(self)?;
        let stages = [Stage::S1, Stage::S2, Stage::S3]
            .into_iter()
            .map(|s| Ok((s.name().to_string(), serde_json::to_value(self.stage_config(s)?)?)))
            .collect::<Result<serde_json::Map<_, _>>>()?;
        v["stage"] = serde_json::Value::Object(stages);
        Ok(v)
    }
}
