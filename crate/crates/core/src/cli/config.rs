//! Run configuration: named profiles, JSON overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalharness::EvalSettings;
use crate::io;
use crate::policy::{ModelConfig, RolloutSampling};
use crate::rewards::RewardWeights;
use crate::synthworld::WorldSpec;
use crate::trainers::{AdamConfig, DpoConfig, GrpoConfig, SftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

/// Which languages each stage sees and how much data it gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seen_languages: Vec<u32>,
    pub held_out_languages: Vec<u32>,
    pub pretrain_examples_per_language: usize,
    pub validation_examples_per_language: usize,
    pub finetune_examples_per_language: usize,
    /// Alignment prompts, built for every language.
    pub prompts_per_language: usize,
    /// Alignment validation prompts, held-out languages only.
    pub validation_prompts_per_language: usize,
    pub eval_prompts_per_language: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorsConfig {
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig3Config {
    /// Paired examples per held-out language for each fine-tuning run.
    pub sft_sizes: Vec<usize>,
    pub eval_prompts_per_language: usize,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub repetitions: usize,
    /// Pretraining steps for the comparison's base model.
    pub pretrain_steps: usize,
    pub prompts_per_language: usize,
    pub validation_prompts_per_language: usize,
    pub eval_prompts_per_language: usize,
    pub grpo: GrpoConfig,
    pub dpo: DpoConfig,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: SftConfig,
    pub sft: SftConfig,
    pub anchors: AnchorsConfig,
    pub grpo: GrpoConfig,
    pub dpo: DpoConfig,
    pub eval: EvalSettings,
    pub fig3: Fig3Config,
    pub table1: Table1Config,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> RunConfig {
        let mut world = WorldSpec::new(7, 6, 8, 16);
        world.symbol_pool = Some(36);
        world.held_out = 2;
        let desk_grpo = GrpoConfig {
            learning_rate: 0.05,
            max_iterations: 900,
            sampling: RolloutSampling {
                cfg_probability: 0.0,
                ..RolloutSampling::default()
            },
            ..GrpoConfig::desk()
        };
        let no_pesq = RewardWeights {
            w_cer: 0.5,
            w_ssim: 0.5,
            w_pesq: 0.0,
        };
        let desk = RunConfig {
            profile,
            seed: 1,
            run_dir: PathBuf::from("runs/default"),
            world,
            model: ModelConfig::default(),
            data: DataConfig {
                seen_languages: vec![0, 1, 2, 3],
                held_out_languages: vec![4, 5],
                pretrain_examples_per_language: 2000,
                validation_examples_per_language: 50,
                finetune_examples_per_language: 256,
                prompts_per_language: 500,
                validation_prompts_per_language: 50,
                eval_prompts_per_language: 500,
            },
            pretrain: SftConfig {
                optimizer: AdamConfig::with_lr(3e-3),
                max_steps: 2500,
                validate_every: 250,
                ..SftConfig::default()
            },
            sft: SftConfig {
                optimizer: AdamConfig::with_lr(1e-3),
                max_steps: 600,
                validate_every: 50,
                ..SftConfig::default()
            },
            anchors: AnchorsConfig { n_samples: 1 },
            grpo: desk_grpo,
            dpo: DpoConfig {
                learning_rate: 3e-3,
                sampling: RolloutSampling {
                    cfg_probability: 0.0,
                    ..RolloutSampling::default()
                },
                ..DpoConfig::default()
            },
            eval: EvalSettings::default(),
            fig3: Fig3Config {
                sft_sizes: vec![64, 256, 1024],
                eval_prompts_per_language: 1000,
                eval: EvalSettings {
                    n_runs: 3,
                    with_cfg: false,
                    ..EvalSettings::default()
                },
            },
            table1: Table1Config {
                repetitions: 5,
                pretrain_steps: 1000,
                prompts_per_language: 500,
                validation_prompts_per_language: 100,
                eval_prompts_per_language: 300,
                grpo: GrpoConfig {
                    learning_rate: 0.1,
                    max_iterations: 300,
                    weights: no_pesq,
                    ..GrpoConfig::desk()
                },
                dpo: DpoConfig {
                    learning_rate: 3e-3,
                    max_iterations: 300,
                    sampling: RolloutSampling {
                        cfg_probability: 0.0,
                        ..RolloutSampling::default()
                    },
                    ..DpoConfig::default()
                },
                eval: EvalSettings {
                    n_runs: 2,
                    ..EvalSettings::default()
                },
            },
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => {
                let mut c = desk;
                c.grpo = GrpoConfig::paper();
                c.table1.grpo = GrpoConfig {
                    weights: no_pesq,
                    ..GrpoConfig::paper()
                };
                c.data.prompts_per_language = 15_000;
                c.table1.prompts_per_language = 15_000;
                c
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let n = self.world.n_languages as u32;
        if d.seen_languages.is_empty() || d.held_out_languages.is_empty() {
            return Err(Error::Config("data needs at least one seen and one held-out language".into()));
        }
        for &l in d.seen_languages.iter().chain(&d.held_out_languages) {
            if l >= n {
                return Err(Error::Config(format!("language {l} is outside the world's {n} languages")));
            }
        }
        if d.seen_languages.iter().any(|l| d.held_out_languages.contains(l)) {
            return Err(Error::Config("seen and held-out languages overlap".into()));
        }
        let counts = [
            d.pretrain_examples_per_language,
            d.validation_examples_per_language,
            d.finetune_examples_per_language,
            d.prompts_per_language,
            d.validation_prompts_per_language,
            d.eval_prompts_per_language,
            self.anchors.n_samples,
            self.fig3.eval_prompts_per_language,
            self.table1.repetitions,
            self.table1.prompts_per_language,
            self.table1.validation_prompts_per_language,
            self.table1.eval_prompts_per_language,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("data sizes, sample counts and repetitions must be positive".into()));
        }
        if self.fig3.sft_sizes.is_empty() || self.fig3.sft_sizes.contains(&0) {
            return Err(Error::Config("fig3.sft_sizes must be non-empty and positive".into()));
        }
        self.model.validate()?;
        for s in [&self.pretrain, &self.sft] {
            s.validate()?;
        }
        for g in [&self.grpo, &self.table1.grpo] {
            g.validate()?;
        }
        for dp in [&self.dpo, &self.table1.dpo] {
            dp.validate()?;
        }
        for e in [&self.eval, &self.fig3.eval, &self.table1.eval] {
            e.validate()?;
        }
        Ok(())
    }

    pub fn all_languages(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.data.seen_languages.iter().chain(&self.data.held_out_languages).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Recursively overlay `patch` onto `base`; objects merge key by key and
/// everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line overrides applied after the profile and the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
}

/// Profile defaults, then the config file, then flags. Unknown keys in the
/// file are rejected.
pub fn resolve(o: &Overrides) -> Result<RunConfig> {
    let file: Option<Value> = o.config.as_deref().map(io::read_json).transpose()?;
    let file_profile = match file.as_ref().and_then(|f| f.get("profile")) {
        Some(v) => Some(serde_json::from_value::<Profile>(v.clone()).map_err(|e| config_error(o.config.as_deref(), e))?),
        None => None,
    };
    let profile = o.profile.or(file_profile).unwrap_or_default();
    let mut value = serde_json::to_value(RunConfig::profile(profile)).expect("config serializes");
    if let Some(f) = file {
        merge(&mut value, f);
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| config_error(o.config.as_deref(), e))?;
    cfg.profile = profile;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(d) = &o.run_dir {
        cfg.run_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_error(path: Option<&Path>, e: serde_json::Error) -> Error {
    match path {
        Some(p) => Error::Config(format!("{}: {e}", p.display())),
        None => Error::Config(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid_and_round_trip() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = RunConfig::profile(p);
            c.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn merge_overlays_nested_keys() {
        let mut a = serde_json::json!({"x": {"y": 1, "z": 2}, "w": [1]});
        merge(&mut a, serde_json::json!({"x": {"y": 5}, "w": [2, 3]}));
        assert_eq!(a, serde_json::json!({"x": {"y": 5, "z": 2}, "w": [2, 3]}));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"grpo": {"learning_rate": 0.5, "kl_coef": 0.1}}"#).unwrap();
        let err = resolve(&Overrides {
            config: Some(p.clone()),
            ..Overrides::default()
        })
        .unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("c.json"), "{err}");
    }
}
