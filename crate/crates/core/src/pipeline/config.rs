use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::legacy::{CorpusProfile, CorpusSizes};
use crate::policy::PolicyConfig;
use crate::prompt::PromptConfig;
use crate::schema::{BusinessRules, RuleText};
use crate::serving::ServingConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegacySettings {
    /// Category assigned when no keyword matches.
    pub fallback_category: String,
    pub noise_rate: f64,
}

impl Default for LegacySettings {
    fn default() -> Self {
        Self { fallback_category: "Lifestyle".into(), noise_rate: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Sampled rollouts per example when estimating expected reward.
    pub reward_samples: usize,
    pub reward_temperature: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { reward_samples: 8, reward_temperature: 1.0 }
    }
}

/// Everything a run needs. Unknown keys are rejected; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub instruction: String,
    pub rules: BusinessRules,
    pub corpus: CorpusSizes,
    pub legacy: LegacySettings,
    pub prompt: PromptConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub serving: ServingConfig,
    pub profile: CorpusProfile,
}

impl Default for Config {
    fn default() -> Self {
        let rule = |name: &str, text: &str| RuleText { name: name.into(), text: text.into() };
        Self {
            seed: 42,
            instruction: "解析查询:实体 分词 词权 类目 意图".into(),
            rules: BusinessRules(vec![
                rule("brand", "品牌名整体切分为一个词"),
                rule("weight", "品类词为核心词"),
            ]),
            corpus: CorpusSizes::default(),
            legacy: LegacySettings::default(),
            prompt: PromptConfig { max_prompt_len: 160, ..Default::default() },
            policy: PolicyConfig { d_model: 64, n_heads: 4, n_layers: 1, d_ff: 256, context: 320, init_std: 0.02 },
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            serving: ServingConfig::default(),
            profile: CorpusProfile::default(),
        }
    }
}

impl Config {
    /// TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: shown.clone(), source })?;
        let cfg: Config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path: shown, msg: e.to_string() })?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: shown, msg: e.to_string() })?
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.rules.check() {
            return bad(e);
        }
        if let Err(e) = self.profile.check() {
            return bad(e);
        }
        if let Err(e) = self.policy.check() {
            return bad(e);
        }
        if let Err(e) = self.prompt.delimiters.check() {
            return bad(e.to_string());
        }
        if let Err(e) = self.train.check() {
            return bad(e.to_string());
        }
        if let Err(e) = self.serving.check() {
            return bad(e);
        }
        if self.corpus.n_unified == 0 || self.corpus.n_golden == 0 || self.corpus.n_pool == 0 {
            return bad("corpus needs unified, golden and pool examples".into());
        }
        if !(0.0..=1.0).contains(&self.legacy.noise_rate) {
            return bad(format!("noise_rate {} outside [0,1]", self.legacy.noise_rate));
        }
        if self.prompt.max_prompt_len + 2 > self.policy.context {
            return bad("max_prompt_len leaves no room for generation within the model context".into());
        }
        if !(self.eval.reward_temperature > 0.0) {
            return bad("reward_temperature must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::pipeline::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = Config::default();
        c.check().unwrap();
        let back: Config = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial: Config = toml::from_str("seed = 7\n[train]\nlambda = 0.5\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.lambda, 0.5);
        assert_eq!(partial.train.stage1, c.train.stage1);
        assert!(toml::from_str::<Config>("sed = 7\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = Config::default();
        c.train.grpo.tau_cons = 1.0;
        assert!(c.check().is_err());
        let mut c = Config::default();
        c.policy.d_model = 30;
        assert!(c.check().is_err());
    }
}
