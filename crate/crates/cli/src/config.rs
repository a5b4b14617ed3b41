//! Flat run configuration: defaults, then an optional JSON file, then flags.

use std::path::Path;

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sorn_core::data::IntervalScheme;
use sorn_core::score::ThresholdPolicy;
use sorn_core::synth::{Segment, SynthSpec, Tone};
use sorn_core::train::TrainConfig;

pub const SEED_ENV: &str = "SORN_SEED";

/// A preset name (`sync`, `ali`, `mustang`) or explicit edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeChoice {
    Preset(String),
    Custom(IntervalScheme),
}

impl SchemeChoice {
    pub fn resolve(&self) -> anyhow::Result<IntervalScheme> {
        match self {
            SchemeChoice::Preset(name) => {
                IntervalScheme::preset(name).with_context(|| format!("unknown scheme preset {name:?}"))
            }
            SchemeChoice::Custom(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // model and training
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub window_length: usize,
    pub skimming_layers: usize,
    pub patch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub disable_skimming: bool,
    pub disable_ot: bool,
    pub disable_picky: bool,
    pub threshold_policy: ThresholdPolicy,
    pub gate_width_init: Option<f64>,
    pub transport_init: f64,
    pub early_stop_delta: f64,
    pub patience: usize,
    pub train_fraction: f64,
    pub point_adjust: bool,
    // data
    pub scheme: SchemeChoice,
    pub slot_duration: f64,
    // generator
    pub tones: Vec<Tone>,
    pub base_duration: f64,
    pub tasks_per_slot: usize,
    pub length: usize,
    pub noise: f64,
    pub distortion: f64,
    pub segments: Vec<Segment>,
    pub tolerance: f64,
    pub gamma_shape: f64,
    pub mean_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthSpec::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            window_length: t.window_length,
            skimming_layers: t.skimming_layers,
            patch_size: t.patch_size,
            lambda: t.lambda,
            seed: t.seed,
            disable_skimming: t.disable_skimming,
            disable_ot: t.disable_ot,
            disable_picky: t.disable_picky,
            threshold_policy: t.threshold_policy,
            gate_width_init: t.gate_width_init,
            transport_init: t.transport_init,
            early_stop_delta: t.early_stop_delta,
            patience: t.patience,
            train_fraction: 0.7,
            point_adjust: false,
            scheme: SchemeChoice::Preset("sync".into()),
            slot_duration: s.slot_duration,
            tones: s.tones,
            base_duration: s.base_duration,
            tasks_per_slot: s.tasks_per_slot,
            length: s.length,
            noise: s.noise,
            distortion: s.distortion,
            segments: s.segments,
            tolerance: s.tolerance,
            gamma_shape: s.gamma_shape,
            mean_floor: s.mean_floor,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            window_length: self.window_length,
            skimming_layers: self.skimming_layers,
            patch_size: self.patch_size,
            lambda: self.lambda,
            seed: self.seed,
            disable_skimming: self.disable_skimming,
            disable_ot: self.disable_ot,
            disable_picky: self.disable_picky,
            threshold_policy: self.threshold_policy,
            gate_width_init: self.gate_width_init,
            transport_init: self.transport_init,
            early_stop_delta: self.early_stop_delta,
            patience: self.patience,
        }
    }

    pub fn synth_spec(&self) -> anyhow::Result<SynthSpec> {
        Ok(SynthSpec {
            tones: self.tones.clone(),
            base_duration: self.base_duration,
            tasks_per_slot: self.tasks_per_slot,
            length: self.length,
            slot_duration: self.slot_duration,
            scheme: self.scheme.resolve()?,
            noise: self.noise,
            distortion: self.distortion,
            segments: self.segments.clone(),
            tolerance: self.tolerance,
            seed: self.seed,
            gamma_shape: self.gamma_shape,
            mean_floor: self.mean_floor,
        })
    }
}

/// Flags that override config keys. Only flags actually given are applied.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file; flags given on the command line win over it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub window_length: Option<usize>,
    #[arg(long)]
    pub skimming_layers: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// When neither this nor the config file sets a seed, SORN_SEED is used.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub disable_skimming: bool,
    #[arg(long)]
    pub disable_ot: bool,
    #[arg(long)]
    pub disable_picky: bool,
    /// `quantile:Q`, `fixed:V` or `best_f1`.
    #[arg(long)]
    pub threshold_policy: Option<String>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub point_adjust: bool,
    /// Preset name: sync, ali or mustang.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub slot_duration: Option<f64>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub tasks_per_slot: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub distortion: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

fn set(map: &mut Map<String, Value>, key: &str, value: impl Serialize) {
    map.insert(key.to_string(), serde_json::to_value(value).expect("plain value"));
}

impl Overrides {
    fn apply(&self, map: &mut Map<String, Value>) {
        macro_rules! opt {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    set(map, stringify!($field), v);
                })*
            };
        }
        macro_rules! flag {
            ($($field:ident),*) => {
                $(if self.$field {
                    set(map, stringify!($field), true);
                })*
            };
        }
        opt!(
            learning_rate,
            batch_size,
            epochs,
            window_length,
            skimming_layers,
            patch_size,
            lambda,
            seed,
            threshold_policy,
            train_fraction,
            scheme,
            slot_duration,
            length,
            tasks_per_slot,
            noise,
            distortion,
            tolerance
        );
        flag!(disable_skimming, disable_ot, disable_picky, point_adjust);
    }

    /// Defaults, then the config file, then `SORN_SEED` if the seed is still
    /// unset, then flags.
    pub fn resolve(&self, env_seed: Option<String>) -> anyhow::Result<RunConfig> {
        self.resolve_with(RunConfig::default(), env_seed)
    }

    /// Like [`Overrides::resolve`] but layered over `base`.
    pub fn resolve_with(&self, base: RunConfig, env_seed: Option<String>) -> anyhow::Result<RunConfig> {
        let Value::Object(mut map) = serde_json::to_value(base)? else {
            unreachable!("config serializes to an object")
        };
        let mut seed_from_file = false;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let file: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            let Value::Object(file) = file else {
                bail!("config {} must be a JSON object", path.display());
            };
            for (k, v) in file {
                if !map.contains_key(&k) {
                    bail!("unknown config key {k:?} in {}", path.display());
                }
                seed_from_file |= k == "seed";
                map.insert(k, v);
            }
        }
        if !seed_from_file {
            if let Some(raw) = env_seed.filter(|s| !s.trim().is_empty()) {
                let seed: u64 = raw
                    .trim()
                    .parse()
                    .with_context(|| format!("{SEED_ENV}={raw:?} is not a non-negative integer"))?;
                set(&mut map, "seed", seed);
            }
        }
        self.apply(&mut map);
        let config: RunConfig =
            serde_json::from_value(Value::Object(map)).context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }
}

impl Overrides {
    /// Whether `key` was given by flag or config file.
    pub fn sets(&self, key: &str) -> anyhow::Result<bool> {
        let mut flagged = Map::new();
        self.apply(&mut flagged);
        if flagged.contains_key(key) {
            return Ok(true);
        }
        let Some(path) = &self.config else { return Ok(false) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text)?;
        Ok(file.get(key).is_some())
    }
}

impl RunConfig {
    /// Defaults with every training field taken from `train`.
    pub fn with_train(train: &TrainConfig) -> Self {
        Self {
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            window_length: train.window_length,
            skimming_layers: train.skimming_layers,
            patch_size: train.patch_size,
            lambda: train.lambda,
            seed: train.seed,
            disable_skimming: train.disable_skimming,
            disable_ot: train.disable_ot,
            disable_picky: train.disable_picky,
            threshold_policy: train.threshold_policy,
            gate_width_init: train.gate_width_init,
            transport_init: train.transport_init,
            early_stop_delta: train.early_stop_delta,
            patience: train.patience,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            bail!("train_fraction must lie in (0, 1], got {}", self.train_fraction);
        }
        self.scheme.resolve()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn write_beside(&self, dir: &Path, name: &str) -> anyhow::Result<()> {
        let path = dir.join(name);
        sorn_core::io::write_json(&path, self)
            .with_context(|| format!("writing resolved config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn seed_precedence() {
        let o = Overrides::default();
        assert_eq!(o.resolve(None).unwrap().seed, 0);
        assert_eq!(o.resolve(Some("17".into())).unwrap().seed, 17);
        let o = Overrides {
            seed: Some(3),
            ..Overrides::default()
        };
        assert_eq!(o.resolve(Some("17".into())).unwrap().seed, 3);
        assert!(Overrides::default().resolve(Some("x".into())).is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "patch_size": 4, "threshold_policy": "best_f1"}"#).unwrap();
        let o = Overrides {
            config: Some(path.clone()),
            patch_size: Some(3),
            ..Overrides::default()
        };
        let c = o.resolve(Some("17".into())).unwrap();
        assert_eq!((c.seed, c.patch_size), (9, 3));
        assert_eq!(c.threshold_policy, ThresholdPolicy::BestF1);

        std::fs::write(&path, r#"{"sead": 9}"#).unwrap();
        assert!(o.resolve(None).is_err());
    }

    #[test]
    fn custom_scheme_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"scheme": {"edges": [0, 10, 20], "overflow": true}}"#).unwrap();
        let o = Overrides {
            config: Some(path),
            ..Overrides::default()
        };
        assert_eq!(o.resolve(None).unwrap().scheme.resolve().unwrap().dims(), 3);
    }

    #[test]
    fn bad_values_rejected() {
        let o = Overrides {
            train_fraction: Some(1.5),
            ..Overrides::default()
        };
        assert!(o.resolve(None).is_err());
        let o = Overrides {
            scheme: Some("nope".into()),
            ..Overrides::default()
        };
        assert!(o.resolve(None).is_err());
    }
}
