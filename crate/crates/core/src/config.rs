//! JSON configuration with full defaulting.
//!
//! Keys starting with `//` are treated as comments at any nesting level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fusenet::{NetDims, TemVariant};
use crate::gcm::DenoiserKind;
use crate::losses::{LossWeights, WeightPreset, EXP_REGION};
use crate::metrics::MetricConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcmMode {
    #[default]
    Full,
    /// Enhanced planes replaced by the source planes.
    Off,
    /// A single gamma iteration.
    N1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    #[default]
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// Module and structural ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub gcm: GcmMode,
    pub ce: Switch,
    pub denoise: Switch,
    pub tem_variant: TemVariant,
}

/// One named entry of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationEntry {
    pub name: String,
    #[serde(default)]
    pub ablation: Ablation,
}

impl AblationEntry {
    fn new(name: &str, f: impl FnOnce(&mut Ablation)) -> Self {
        let mut ablation = Ablation::default();
        f(&mut ablation);
        Self {
            name: name.to_string(),
            ablation,
        }
    }
}

/// The module and TEM ablations.
pub fn default_ablation_grid() -> Vec<AblationEntry> {
    let mut grid = vec![
        AblationEntry::new("full", |_| {}),
        AblationEntry::new("w/o GCM", |a| a.gcm = GcmMode::Off),
        AblationEntry::new("GCM n=1", |a| a.gcm = GcmMode::N1),
        AblationEntry::new("w/o CE", |a| a.ce = Switch::Off),
        AblationEntry::new("w/o Denoise", |a| a.denoise = Switch::Off),
    ];
    for v in &TemVariant::ALL[1..] {
        grid.push(AblationEntry::new(&format!("TEM {v}"), |a| {
            a.tem_variant = *v
        }));
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed step count; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    /// Side of the square training crops.
    pub patch: usize,
    /// Random flips and quarter-turn rotations.
    pub augment: bool,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Train only the curve estimator for this many initial steps.
    pub gcm_first_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            epochs: 200,
            steps: None,
            lr: 1e-6,
            weight_decay: 1e-8,
            patch: 256,
            augment: true,
            checkpoint_every: 0,
            gcm_first_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, pairs: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * pairs.div_ceil(self.batch_size.max(1)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Gamma iterations `N`.
    pub gcm_iterations: usize,
    /// Color-enhancement saturation step.
    pub delta: f64,
    pub loss_weights: LossWeights,
    pub weight_preset: WeightPreset,
    pub denoiser: DenoiserKind,
    pub ablation: Ablation,
    pub patch: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Token grid side the attention bias is stored for.
    pub bias_grid: usize,
    pub shared_encoder: bool,
    pub seed: u64,
    pub metrics: MetricConfig,
    pub train: TrainConfig,
    pub ablation_grid: Vec<AblationEntry>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gcm_iterations: 8,
            delta: 0.2,
            loss_weights: LossWeights::default(),
            weight_preset: WeightPreset::Metrics,
            denoiser: DenoiserKind::ResidualCnn,
            ablation: Ablation::default(),
            patch: 8,
            channels: 32,
            token_dim: 64,
            heads: 4,
            bias_grid: 8,
            shared_encoder: true,
            seed: 0,
            metrics: MetricConfig::default(),
            train: TrainConfig::default(),
            ablation_grid: default_ablation_grid(),
        }
    }
}

fn strip_comments(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| !k.starts_with("//"));
            map.values_mut().for_each(strip_comments);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_comments),
        _ => {}
    }
}

impl FusionConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        strip_comments(&mut v);
        let cfg: FusionConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Small-scale settings for desk runs: 64x64 crops, lr 1e-4, 200 steps,
    /// batch of one and a narrower network.
    pub fn toy(mut self) -> Self {
        self.train.patch = 64;
        self.train.lr = 1e-4;
        self.train.steps = Some(200);
        self.train.batch_size = 1;
        self.channels = 16;
        self.token_dim = 64;
        self.heads = 4;
        self
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        Self {
            ablation,
            ..self.clone()
        }
    }

    /// Number of gamma iterations after ablation.
    pub fn effective_iterations(&self) -> usize {
        match self.ablation.gcm {
            GcmMode::N1 => 1,
            GcmMode::Full => self.gcm_iterations,
            GcmMode::Off => 0,
        }
    }

    /// Denoiser after ablation.
    pub fn effective_denoiser(&self) -> DenoiserKind {
        if self.ablation.denoise.is_on() {
            self.denoiser
        } else {
            DenoiserKind::Identity
        }
    }

    pub fn net_dims(&self) -> NetDims {
        NetDims {
            channels: self.channels,
            patch: self.patch,
            token_dim: self.token_dim,
            heads: self.heads,
            bias_grid: self.bias_grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.gcm_iterations == 0 {
            return bad("gcm_iterations must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0,1), got {}", self.delta));
        }
        self.loss_weights.validate().map_err(Error::Config)?;
        self.net_dims()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.metrics.bins < 2 {
            return bad("metrics.bins must be at least 2".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.patch == 0 || t.lr < 0.0 || t.weight_decay < 0.0 {
            return bad("train sizes must be positive and rates nonnegative".into());
        }
        if !t.patch.is_multiple_of(EXP_REGION) || !t.patch.is_multiple_of(self.patch) {
            return bad(format!(
                "train.patch {} must be divisible by {EXP_REGION} and by the token patch {}",
                t.patch, self.patch
            ));
        }
        Ok(())
    }
}
