//! Flat `key = value` training configuration.

use std::fmt::Write as _;

use crate::deform::FieldConfig;
use crate::{Error, Result};

/// Loss weights; the perceptual term is not modelled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub event: f64,
    pub depth: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            event: 0.5,
            depth: 0.02,
            smooth: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub grid: f64,
    pub decoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            grid: 1.6e-3,
            decoder: 1.6e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    pub from_step: u64,
    pub until_step: u64,
    pub interval: u64,
    /// Threshold on the mean screen-space mean gradient, in normalized
    /// device units.
    pub grad_threshold: f64,
    /// Fraction of the scene diameter separating clone from split.
    pub percent_dense: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            from_step: 100,
            until_step: 2500,
            interval: 100,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            prune_opacity: 0.005,
            max_gaussians: 6000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub l_min: f64,
    pub l_max: f64,
    pub static_steps: u64,
    pub total_steps: u64,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub init_points: usize,
    pub seed: u64,
    /// Overrides the dataset background when set.
    pub background: Option<[f64; 3]>,
    pub field: FieldConfig,
    /// Multiplier on the temporal grid resolution.
    pub motion_degree: f64,
    pub checkpoint_interval: u64,
    /// Second-phase steps over which the sampled time range grows to the
    /// full span; 0 samples the whole span from the start.
    pub time_curriculum: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            l_min: 1e-3,
            l_max: 50e-3,
            static_steps: 500,
            total_steps: 4000,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            init_points: 2000,
            seed: 0,
            background: None,
            field: FieldConfig::default(),
            motion_degree: 1.0,
            checkpoint_interval: 1000,
            time_curriculum: 1500,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $kind:ident),* $(,)?) => {
        impl TrainConfig {
            /// Every recognised key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key,)* "background"];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value::<$kind>(key, value)?,)*
                    "background" => {
                        let v: Vec<f64> = value
                            .split_whitespace()
                            .map(|s| parse_value::<f64>(key, s))
                            .collect::<Result<_>>()?;
                        match v.as_slice() {
                            [r, g, b] => self.background = Some([*r, *g, *b]),
                            [] => self.background = None,
                            _ => return Err(Error::Config(format!("background needs three values, got {value:?}"))),
                        }
                    }
                    other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
                }
                Ok(())
            }

            /// Text form accepted by [`TrainConfig::parse`]; round-trips exactly.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", $key, self.$($field).+);)*
                if let Some([r, g, b]) = self.background {
                    let _ = writeln!(out, "background = {r} {g} {b}");
                }
                out
            }
        }
    };
}

config_keys! {
    "lambda_rgb" => weights.rgb: f64,
    "lambda_event" => weights.event: f64,
    "lambda_depth" => weights.depth: f64,
    "lambda_smooth" => weights.smooth: f64,
    "l_min" => l_min: f64,
    "l_max" => l_max: f64,
    "static_steps" => static_steps: u64,
    "total_steps" => total_steps: u64,
    "lr_position" => lr.position: f64,
    "lr_position_final" => lr.position_final: f64,
    "lr_scale" => lr.scale: f64,
    "lr_rotation" => lr.rotation: f64,
    "lr_opacity" => lr.opacity: f64,
    "lr_color" => lr.color: f64,
    "lr_grid" => lr.grid: f64,
    "lr_decoder" => lr.decoder: f64,
    "densify_from" => densify.from_step: u64,
    "densify_until" => densify.until_step: u64,
    "densify_interval" => densify.interval: u64,
    "densify_grad_threshold" => densify.grad_threshold: f64,
    "percent_dense" => densify.percent_dense: f64,
    "prune_opacity" => densify.prune_opacity: f64,
    "max_gaussians" => densify.max_gaussians: usize,
    "init_points" => init_points: usize,
    "seed" => seed: u64,
    "motion_degree" => motion_degree: f64,
    "grid_spatial_res" => field.spatial_res: usize,
    "grid_time_res" => field.time_res: usize,
    "grid_features" => field.features: usize,
    "decoder_width" => field.width: usize,
    "decoder_depth" => field.depth: usize,
    "time_frequencies" => field.time_freqs: usize,
    "checkpoint_interval" => checkpoint_interval: u64,
    "time_curriculum" => time_curriculum: u64,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`, then validates.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    /// Field shape with the temporal resolution scaled by the motion degree.
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            time_res: ((self.field.time_res as f64 * self.motion_degree).round() as usize).max(3),
            ..self.field
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.rgb, w.event, w.depth, w.smooth].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.l_min > 0.0 && self.l_min <= self.l_max) {
            return Err(Error::Config(format!(
                "need 0 < l_min <= l_max, got {} and {}",
                self.l_min, self.l_max
            )));
        }
        if self.static_steps > self.total_steps {
            return Err(Error::Config(format!(
                "static_steps {} exceeds total_steps {}",
                self.static_steps, self.total_steps
            )));
        }
        let lr = &self.lr;
        if [lr.position, lr.position_final, lr.scale, lr.rotation, lr.opacity, lr.color, lr.grid, lr.decoder]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
            || lr.position_final > 0.0 && lr.position == 0.0
        {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.densify.interval == 0 {
            return Err(Error::Config("densify_interval must be positive".into()));
        }
        if self.init_points == 0 {
            return Err(Error::Config("init_points must be positive".into()));
        }
        if !(self.motion_degree > 0.0) {
            return Err(Error::Config("motion_degree must be positive".into()));
        }
        self.field_config().validate()
    }
}
