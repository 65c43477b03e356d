//! Run configuration: a TOML document with `[model]`, `[sampler]`, `[train]`
//! and `[rewards]` sections. Unknown sections and keys are rejected, and every
//! error names the section and key it comes from.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::objective::NftConfig;
use crate::optim::AdamConfig;
use crate::rewards::{PromptCorpus, PromptSpec};
use crate::sampling::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub prompts_per_iteration: usize,
    pub group_size: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Old-policy blend per iteration; the last entry repeats.
    pub ema_eta: Vec<f64>,
    pub seed: u64,
    pub mode: String,
    /// Profile per-layer gradient norms every this many iterations (0 = never).
    pub grad_norm_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            prompts_per_iteration: 2,
            group_size: 8,
            minibatch_size: 8,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta: 0.5,
            lambda: 1.5,
            ema_eta: vec![0.9],
            seed: 0,
            mode: "omninft".into(),
            grad_norm_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn nft(&self) -> NftConfig {
        NftConfig {
            beta: self.beta,
            lambda: self.lambda,
            ..NftConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn eta_at(&self, iteration: usize) -> f64 {
        self.ema_eta[iteration.min(self.ema_eta.len() - 1)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Size of the generated corpus when no corpus file is given.
    pub num_prompts: usize,
    pub corpus_seed: u64,
    /// Prompt corpus file; relative paths resolve against the config file.
    pub corpus_file: Option<PathBuf>,
    /// Target token energies are `target_scale·√d` times a draw from `[0.2, 1.2)`.
    pub target_scale: f64,
    /// Strength of the anti-correlated video/audio reward perturbation.
    pub conflict_epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            num_prompts: 4,
            corpus_seed: 7,
            corpus_file: None,
            target_scale: 0.5,
            conflict_epsilon: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub rewards: RewardConfig,
}

const SECTIONS: [&str; 4] = ["model", "sampler", "train", "rewards"];
const OPTIONAL_KEYS: [(&str, &str); 1] = [("rewards", "corpus_file")];

fn default_section(name: &str) -> Table {
    let d = RunConfig::default();
    let v = match name {
        "model" => Table::try_from(&d.model),
        "sampler" => Table::try_from(&d.sampler),
        "train" => Table::try_from(&d.train),
        _ => Table::try_from(&d.rewards),
    };
    v.expect("defaults serialize")
}

/// Deserializes one section, applying overrides one key at a time so a type
/// error can be pinned on the key that caused it.
fn parse_section<T: DeserializeOwned>(
    name: &str,
    given: Option<&Table>,
) -> Result<(T, Vec<String>)> {
    let defaults = default_section(name);
    let mut merged = defaults.clone();
    let mut defaulted = Vec::new();
    if let Some(given) = given {
        for (key, value) in given {
            let known = defaults.contains_key(key)
                || OPTIONAL_KEYS.iter().any(|&(s, k)| s == name && k == key);
            if !known {
                return Err(CoreError::Config(format!(
                    "unknown key `{key}` in section [{name}]"
                )));
            }
            merged.insert(key.clone(), value.clone());
            T::deserialize(Value::Table(merged.clone())).map_err(|e| {
                CoreError::Config(format!(
                    "invalid value for `{key}` in section [{name}]: {}",
                    e.message()
                ))
            })?;
        }
    }
    for key in defaults.keys() {
        if given.is_none_or(|g| !g.contains_key(key)) {
            defaulted.push(format!("[{name}] {key} = {}", defaults[key]));
        }
    }
    let parsed = T::deserialize(Value::Table(merged))
        .map_err(|e| CoreError::Config(format!("section [{name}]: {}", e.message())))?;
    Ok((parsed, defaulted))
}

impl RunConfig {
    /// Parses a config document and returns it with the list of keys that
    /// fell back to defaults.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let doc: Table = text.parse().map_err(|e: toml::de::Error| {
            CoreError::Config(format!("malformed TOML: {}", e.to_string().trim_end()))
        })?;
        for (key, value) in &doc {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(CoreError::Config(format!("unknown section [{key}]")));
            }
            if !value.is_table() {
                return Err(CoreError::Config(format!("[{key}] must be a table")));
            }
        }
        let section = |name: &str| doc.get(name).and_then(Value::as_table);
        let mut defaulted = Vec::new();
        let (model, d) = parse_section("model", section("model"))?;
        defaulted.extend(d);
        let (sampler, d) = parse_section("sampler", section("sampler"))?;
        defaulted.extend(d);
        let (train, d) = parse_section("train", section("train"))?;
        defaulted.extend(d);
        let (rewards, d) = parse_section("rewards", section("rewards"))?;
        defaulted.extend(d);
        let config = Self {
            model,
            sampler,
            train,
            rewards,
        };
        config.validate()?;
        Ok((config, defaulted))
    }

    /// Reads and parses `path`, logging every defaulted key. A relative
    /// corpus file is resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (mut config, defaulted) = Self::parse(&text)?;
        for d in defaulted {
            log::info!("default applied: {d}");
        }
        if let Some(corpus) = &config.rewards.corpus_file {
            if corpus.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.rewards.corpus_file = Some(base.join(corpus));
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.train.nft().validate()?;
        let t = &self.train;
        for (key, v) in [
            ("prompts_per_iteration", t.prompts_per_iteration),
            ("minibatch_size", t.minibatch_size),
        ] {
            if v == 0 {
                return Err(CoreError::Config(format!("train.{key} must be at least 1")));
            }
        }
        if t.group_size < 2 {
            return Err(CoreError::Config(
                "train.group_size must be at least 2".into(),
            ));
        }
        if t.ema_eta.is_empty() || t.ema_eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(CoreError::Config(
                "train.ema_eta entries must lie in [0, 1] and be nonempty".into(),
            ));
        }
        if !(t.learning_rate >= 0.0) {
            return Err(CoreError::Config("train.learning_rate must be >= 0".into()));
        }
        let r = &self.rewards;
        if r.corpus_file.is_none()
            && (r.num_prompts == 0 || r.num_prompts > self.model.prompt_vocab)
        {
            return Err(CoreError::Config(format!(
                "rewards.num_prompts ({}) must be in 1..={} (model.prompt_vocab)",
                r.num_prompts, self.model.prompt_vocab
            )));
        }
        if !(r.conflict_epsilon >= 0.0) {
            return Err(CoreError::Config(
                "rewards.conflict_epsilon must be >= 0".into(),
            ));
        }
        if !(r.target_scale >= 0.0) {
            return Err(CoreError::Config(
                "rewards.target_scale must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn corpus(&self) -> Result<PromptCorpus> {
        match &self.rewards.corpus_file {
            Some(path) => PromptCorpus::load(path),
            None => Ok(PromptCorpus::generate(
                self.rewards.num_prompts,
                self.rewards.corpus_seed,
                &self.model,
            )),
        }
    }

    pub fn prompt_specs(&self) -> Result<Vec<PromptSpec>> {
        let specs = self
            .corpus()?
            .specs(&self.model, self.rewards.target_scale)?;
        if specs.is_empty() {
            return Err(CoreError::Corpus("no prompts".into()));
        }
        Ok(specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let (c, defaulted) = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(defaulted.iter().any(|d| d.starts_with("[model] d_model")));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[model]\nwidth = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("width") && err.contains("[model]"), "{err}");
        let err = RunConfig::parse("[optimizer]\nlr = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("optimizer"), "{err}");
    }

    #[test]
    fn bad_value_is_named() {
        let err = RunConfig::parse("[train]\niterations = \"many\"\n")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("iterations") && err.contains("[train]"),
            "{err}"
        );
        let err = RunConfig::parse("[model]\nheads = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("heads"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.train.iterations = 3;
        c.rewards.corpus_file = Some("prompts.toml".into());
        c.sampler.late_steps = crate::sampling::LateSteps::Explicit(vec![14, 15]);
        let (back, _) = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
