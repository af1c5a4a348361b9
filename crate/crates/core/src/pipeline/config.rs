use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::attack::AttackConfig;
use crate::autoencoder::AeConfig;
use crate::cav::CavTraining;
use crate::error::{GcavError, Result};
use crate::fusion::FusionConfig;
use crate::probe::{TargetConfig, TargetTraining, WorldConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Random runs per concept.
    pub runs: usize,
    pub model_name: String,
    pub world: WorldConfig,
    pub target: TargetConfig,
    pub target_training: TargetTraining,
    pub cav: CavTraining,
    pub autoencoder: AeConfig,
    pub align: AlignConfig,
    pub fusion: FusionConfig,
    pub attack: Option<AttackConfig>,
    /// Worker threads; `0` means one per available core.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            runs: 10,
            model_name: "mlp".into(),
            world: WorldConfig::default(),
            target: TargetConfig::default(),
            target_training: TargetTraining::default(),
            cav: CavTraining::default(),
            autoencoder: AeConfig::default(),
            align: AlignConfig::default(),
            fusion: FusionConfig::default(),
            attack: None,
            workers: 1,
        }
    }
}

fn check(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(GcavError::InvalidConfig(msg.into()))
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GcavError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(GcavError::io(path))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every default resolved.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn threads(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }

    /// Hex SHA-256 of the effective config without the attack section, which
    /// only affects the attack stage.
    pub fn hash(&self) -> String {
        let base = Self {
            attack: None,
            ..self.clone()
        };
        let digest = Sha256::digest(serde_json::to_vec(&base).expect("config serialises"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, t) = (&self.world, &self.target);
        check(
            self.schema_version == SCHEMA_VERSION,
            format!(
                "schema_version {} (supported: {SCHEMA_VERSION})",
                self.schema_version
            ),
        )?;
        check(self.runs >= 1, "runs must be ≥ 1")?;
        check(!self.model_name.is_empty(), "model_name is empty")?;
        check(
            !self.model_name.contains(['/', '\\']),
            "model_name must not contain path separators",
        )?;
        check(
            w.d_in == t.d_in,
            format!("world.d_in {} ≠ target.d_in {}", w.d_in, t.d_in),
        )?;
        check(
            w.n_classes == t.n_classes,
            format!(
                "world.n_classes {} ≠ target.n_classes {}",
                w.n_classes, t.n_classes
            ),
        )?;
        check(w.n_classes >= 2, "need at least 2 classes")?;
        check(w.n_concepts >= 1, "need at least 1 concept")?;
        check(
            w.n_concepts <= w.d_in,
            format!(
                "{} orthonormal concepts do not fit in d_in = {}",
                w.n_concepts, w.d_in
            ),
        )?;
        check(
            w.probe_size >= 2 && w.examples_per_class >= 2,
            "probe and class sets need ≥ 2 examples",
        )?;
        check(
            w.noise_sigma >= 0.0 && w.random_sigma > 0.0 && w.alpha_range.0 <= w.alpha_range.1,
            "invalid world noise or α range",
        )?;
        check(t.instrumented.len() >= 2, "instrument at least 2 layers")?;
        for name in &t.instrumented {
            let idx = name.strip_prefix('L').and_then(|s| s.parse::<usize>().ok());
            check(
                matches!(idx, Some(i) if (1..=t.depth).contains(&i)),
                format!("instrumented layer `{name}` is not one of L1..L{}", t.depth),
            )?;
        }
        let mut sorted = t.instrumented.clone();
        sorted.sort();
        sorted.dedup();
        check(
            sorted.len() == t.instrumented.len(),
            "duplicate instrumented layers",
        )?;
        check(
            self.cav.epochs >= 1 && self.cav.lr > 0.0 && self.cav.l2 >= 0.0,
            "invalid CAV training",
        )?;
        check(
            self.autoencoder.d_embed >= 1 && self.autoencoder.hidden >= 1,
            "invalid autoencoder sizes",
        )?;
        let a = &self.align;
        check(a.tau > 0.0, "align.tau must be > 0")?;
        check(
            a.lambda_nce >= 0.0 && a.lambda_cons >= 0.0,
            "align weights must be ≥ 0",
        )?;
        check(
            a.negatives_per_anchor >= 1,
            "align.negatives_per_anchor must be ≥ 1",
        )?;
        let f = &self.fusion;
        check(
            f.heads >= 1 && self.autoencoder.d_embed.is_multiple_of(f.heads),
            format!(
                "fusion.heads {} must divide d_embed {}",
                f.heads, self.autoencoder.d_embed
            ),
        )?;
        check(
            (0.0..1.0).contains(&f.dropout),
            "fusion.dropout must be in [0, 1)",
        )?;
        check(f.batch_n >= 2, "fusion.batch_n must be ≥ 2")?;
        check(
            f.lambda_var >= 0.0 && f.lambda_cons >= 0.0,
            "fusion weights must be ≥ 0",
        )?;
        check(
            f.tau0 > 0.0 && f.tau_max >= f.tau0,
            "need 0 < tau0 ≤ tau_max",
        )?;
        if let Some(att) = &self.attack {
            att.validate(self)?;
        }
        Ok(())
    }
}
