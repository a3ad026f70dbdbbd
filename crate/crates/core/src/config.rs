//! Run configuration, stored as a versioned JSON document. It describes the
//! world and its encoders along with the ordered stages.
//!
//! Loading is total: [`RunConfig::from_json`] either returns a config in
//! which every reference resolves, or a config error naming the field.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, MlpEncoder, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::loss::LossVariant;
use crate::optim::{AdamWConfig, ScheduleConfig};
use crate::pipeline::{check_dependencies, StageSpec};
use crate::seed::derive_seed;
use crate::world::{mirror_rotation, world_seed, ModalitySpec, PairSetSpec, WorldConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Frozen single-layer reference encoder.
    Reference,
    /// Trainable MLP.
    Mlp,
}

/// One encoder per modality; the encoder id is the modality name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub modality: String,
    pub kind: EncoderKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Copy this encoder's weights when the shapes match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<String>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_k() -> Vec<usize> {
    vec![1, 5, 10]
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub master_seed: u64,
    pub joint_dim: usize,
    pub world: WorldConfig,
    pub encoders: Vec<EncoderSpec>,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_k")]
    pub eval_k: Vec<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl Default for RunConfig {
    /// Two stages on the default world: satellite to frozen ground, then
    /// audio to the frozen satellite encoder.
    fn default() -> Self {
        let mlp = |m: &str, warm: Option<&str>| EncoderSpec {
            modality: m.into(),
            kind: EncoderKind::Mlp,
            hidden: vec![64],
            activation: Activation::Tanh,
            warm_start: warm.map(Into::into),
        };
        let reference = |m: &str| EncoderSpec {
            modality: m.into(),
            kind: EncoderKind::Reference,
            hidden: vec![],
            activation: Activation::Tanh,
            warm_start: None,
        };
        let mut cfg = RunConfig {
            version: CONFIG_VERSION,
            master_seed: 2024,
            joint_dim: 32,
            world: WorldConfig::default(),
            encoders: vec![
                reference("ground"),
                reference("text"),
                mlp("satellite", Some("ground")),
                mlp("audio", None),
            ],
            stages: vec![
                stage("stage1", "satellite", "ground", LossVariant::Directional, "satellite-ground", 30),
                stage("stage2", "audio", "satellite", LossVariant::Symmetric, "satellite-audio", 60),
            ],
            eval_k: default_k(),
            output_dir: default_output_dir(),
        };
        cfg.derive_seeds();
        cfg
    }
}

fn stage(name: &str, trainable: &str, target: &str, loss: LossVariant, dataset: &str, epochs: usize) -> StageSpec {
    StageSpec {
        name: name.into(),
        trainable: trainable.into(),
        target: target.into(),
        loss,
        dataset: dataset.into(),
        epochs,
        batch_size: 128,
        optimizer: AdamWConfig::default(),
        schedule: ScheduleConfig::default(),
        cache_target: false,
        seed: 0,
    }
}

impl RunConfig {
    /// The default config plus a third stage binding an extra modality
    /// (`elevation`) to the frozen satellite encoder.
    pub fn three_stage() -> Self {
        let mut cfg = RunConfig::default();
        cfg.world.modalities.push(ModalitySpec {
            name: "elevation".into(),
            dim: 10,
            mirror_of: None,
        });
        cfg.world.pair_sets.push(PairSetSpec {
            id: "satellite-elevation".into(),
            anchor: "satellite".into(),
            partner: "elevation".into(),
            count: 2_000,
            holdout_fraction: 0.1,
        });
        cfg.encoders.push(EncoderSpec {
            modality: "elevation".into(),
            kind: EncoderKind::Mlp,
            hidden: vec![64],
            activation: Activation::Tanh,
            warm_start: None,
        });
        cfg.stages.push(stage(
            "stage3",
            "elevation",
            "satellite",
            LossVariant::Symmetric,
            "satellite-elevation",
            60,
        ));
        cfg.derive_seeds();
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills the world and stage seeds from the master seed.
    pub fn derive_seeds(&mut self) {
        self.world.seed = world_seed(self.master_seed);
        for s in &mut self.stages {
            s.seed = derive_seed(self.master_seed, &format!("stage:{}", s.name));
        }
    }

    pub fn encoder_seed(&self, id: &str) -> u64 {
        derive_seed(self.master_seed, &format!("encoder:{id}"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        if self.joint_dim == 0 {
            return Err(Error::config("joint_dim must be >= 1"));
        }
        self.world.validate()?;
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return Err(Error::config(format!("eval_k must be non-empty positive integers, got {:?}", self.eval_k)));
        }
        if self.eval_k.iter().any(|&k| k > self.world.eval_count) {
            return Err(Error::config(format!(
                "eval_k {:?} exceeds world.eval_count {}",
                self.eval_k, self.world.eval_count
            )));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            let field = format!("encoders[{i}]");
            if self.world.modality(&e.modality).is_none() {
                return Err(Error::config(format!("{field}.modality: unknown modality {:?}", e.modality)));
            }
            if self.encoders[..i].iter().any(|o| o.modality == e.modality) {
                return Err(Error::config(format!("{field}.modality: duplicate encoder for {:?}", e.modality)));
            }
            if e.hidden.contains(&0) {
                return Err(Error::config(format!("{field}.hidden: zero-width layer")));
            }
            if e.kind == EncoderKind::Reference && !e.hidden.is_empty() {
                return Err(Error::config(format!("{field}.hidden: reference encoders have no hidden layers")));
            }
            if let Some(src) = &e.warm_start {
                if !self.encoders.iter().any(|o| &o.modality == src) {
                    return Err(Error::config(format!("{field}.warm_start: unknown encoder {src:?}")));
                }
            }
        }
        for m in &self.world.modalities {
            if !self.encoders.iter().any(|e| e.modality == m.name) {
                return Err(Error::config(format!("encoders: no encoder for modality {:?}", m.name)));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let field = format!("stages[{i}]");
            s.validate().map_err(|e| Error::config(format!("{field}: {e}")))?;
            let set = self
                .world
                .pair_set(&s.dataset)
                .ok_or_else(|| Error::config(format!("{field}.dataset: unknown pair set {:?}", s.dataset)))?;
            let pair = [set.anchor.as_str(), set.partner.as_str()];
            if !(pair.contains(&s.trainable.as_str()) && pair.contains(&s.target.as_str())) {
                return Err(Error::config(format!(
                    "{field}: pair set {:?} pairs {} with {}, not {} with {}",
                    s.dataset, set.anchor, set.partner, s.trainable, s.target
                )));
            }
            let held = (set.holdout_fraction * set.count as f64).round() as usize;
            if set.count - held < 2 {
                return Err(Error::config(format!(
                    "{field}: pair set {:?} has fewer than two training pairs",
                    s.dataset
                )));
            }
        }
        let registry = self.initial_registry()?;
        check_dependencies(&self.stages, &registry)
    }

    /// Encoders before any training: frozen references plus freshly
    /// initialized trainable MLPs.
    ///
    /// A mirrored modality with a reference encoder gets its base's reference
    /// rotated by the world's mirror rotation, so the two start aligned.
    pub fn initial_registry(&self) -> Result<BTreeMap<String, MlpEncoder>> {
        let mut out = BTreeMap::new();
        let dim_of = |m: &str| self.world.modality(m).map(|s| s.dim).expect("validated modality");
        let refs = self.encoders.iter().filter(|e| e.kind == EncoderKind::Reference);
        for e in refs {
            let spec = self.world.modality(&e.modality).expect("validated modality");
            let base = spec
                .mirror_of
                .as_deref()
                .filter(|b| self.encoders.iter().any(|o| o.modality == *b && o.kind == EncoderKind::Reference));
            let enc = match base {
                Some(b) => {
                    let r = mirror_rotation(self.world.seed, &e.modality, spec.dim)?;
                    ReferenceEncoder::new(dim_of(b), self.joint_dim, self.encoder_seed(b))?.rotated(&r)?
                }
                None => ReferenceEncoder::new(spec.dim, self.joint_dim, self.encoder_seed(&e.modality))?,
            };
            out.insert(e.modality.clone(), enc.into_encoder());
        }
        for e in self.encoders.iter().filter(|e| e.kind == EncoderKind::Mlp) {
            let mut dims = vec![dim_of(&e.modality)];
            dims.extend(&e.hidden);
            dims.push(self.joint_dim);
            let warm = e
                .warm_start
                .as_ref()
                .and_then(|src| out.get(src))
                .and_then(|src| MlpEncoder::init_from(src, &dims).ok());
            let enc = match warm {
                Some(enc) => enc,
                None => MlpEncoder::init(&dims, e.activation, self.encoder_seed(&e.modality))?,
            };
            out.insert(e.modality.clone(), enc);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        RunConfig::three_stage().validate().unwrap();
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.stages[0].seed, cfg.stages[1].seed);
        assert_ne!(cfg.stages[0].seed, 0);
    }

    #[test]
    fn registry_freezes_references_only() {
        let reg = RunConfig::default().initial_registry().unwrap();
        assert!(reg["ground"].is_frozen());
        assert!(reg["text"].is_frozen());
        assert!(!reg["satellite"].is_frozen());
        assert_eq!(reg["satellite"].dims(), &[16, 64, 32]);
        assert_eq!(reg["audio"].dims(), &[12, 64, 32]);
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = RunConfig::default();
        cfg.world.pair_sets[0].count = 0;
        let msg = RunConfig::from_json(&cfg.to_json()).unwrap_err().to_string();
        assert!(msg.contains("pair_sets[0]"), "{msg}");

        let mut cfg = RunConfig::default();
        cfg.stages.swap(0, 1);
        let msg = RunConfig::from_json(&cfg.to_json()).unwrap_err().to_string();
        assert!(msg.contains("stage2"), "{msg}");

        let cfg = RunConfig {
            version: 7,
            ..RunConfig::default()
        };
        let msg = RunConfig::from_json(&cfg.to_json()).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = RunConfig::default().to_json().replacen("\"version\"", "\"colour\": 1, \"version\"", 1);
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
    }
}
