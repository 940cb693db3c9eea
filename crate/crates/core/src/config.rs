//! Training configuration and its flat `key = value` file format.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowBackend, FlowPairing};
use crate::types::{MaskMode, DEFAULT_LAMBDA_T, ENCODER_STRIDE, MIN_FRAME_SIDE};
use crate::videonet::Ablation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_flow_finetune: f64,
    pub lr_disc: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub lambda_t: f64,
    pub tau: f32,
    pub window_radius: usize,
    /// Update the flow refiners jointly with stage two.
    pub flow_finetune: bool,
    /// Treat neighbour outputs in the temporal loss as constants.
    pub stop_grad_neighbours: bool,
    pub grad_clip: f64,
    pub loss_flow: bool,
    pub loss_mask_ct: bool,
    pub loss_mask_cl: bool,
    pub loss_temp: bool,
    pub perceptual_weight: f64,
    pub adversarial_weight: f64,
    /// Weight of the attention-map supervision against the synthesis region.
    pub attention_weight: f64,
    pub initial_channels: usize,
    pub feat_channels: usize,
    pub offset_bound: f32,
    pub flow_backend: FlowBackend,
    pub flow_pairing: FlowPairing,
    pub mask_mode: MaskMode,
    pub no_mask: bool,
    pub no_initialnet: bool,
    pub no_alignment: bool,
    pub no_temporal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop_size: 512,
            batch_size: 4,
            lr_stage1: 1e-4,
            lr_stage2: 1e-4,
            lr_flow_finetune: 1e-7,
            lr_disc: 1e-4,
            max_steps: 1000,
            seed: 0,
            lambda_t: DEFAULT_LAMBDA_T,
            tau: crate::initial::DEFAULT_TAU,
            window_radius: 2,
            flow_finetune: true,
            stop_grad_neighbours: false,
            grad_clip: 1.0,
            loss_flow: true,
            loss_mask_ct: true,
            loss_mask_cl: true,
            loss_temp: true,
            perceptual_weight: 1.0,
            adversarial_weight: 1.0,
            attention_weight: 0.0,
            initial_channels: 16,
            feat_channels: 64,
            offset_bound: 8.0,
            flow_backend: FlowBackend::ToyTrainable,
            flow_pairing: FlowPairing::InitialToRainy,
            mask_mode: MaskMode::Hard,
            no_mask: false,
            no_initialnet: false,
            no_alignment: false,
            no_temporal: false,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

fn mask_mode_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::Hard => "hard",
        MaskMode::Soft => "soft",
    }
}

macro_rules! fields {
    ($($key:ident : $kind:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl TrainConfig {
            fn set(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), ()>> {
                match key {
                    $(stringify!($key) => Some(fields!(@parse $kind, value).map(|v| self.$key = v).ok_or(())),)*
                    _ => None,
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), fields!(@show $kind, self.$key))),*]
            }
        }
    };
    (@parse num, $v:expr) => { $v.parse().ok() };
    (@parse flag, $v:expr) => { parse_bool($v) };
    (@parse backend, $v:expr) => { FlowBackend::parse($v).ok() };
    (@parse pairing, $v:expr) => { FlowPairing::parse($v).ok() };
    (@parse mask, $v:expr) => {
        match $v { "hard" => Some(MaskMode::Hard), "soft" => Some(MaskMode::Soft), _ => None }
    };
    (@show num, $x:expr) => { format!("{:?}", $x) };
    (@show flag, $x:expr) => { $x.to_string() };
    (@show backend, $x:expr) => { $x.name().to_string() };
    (@show pairing, $x:expr) => { $x.name().to_string() };
    (@show mask, $x:expr) => { mask_mode_name($x).to_string() };
}

fields! {
    crop_size: num,
    batch_size: num,
    lr_stage1: num,
    lr_stage2: num,
    lr_flow_finetune: num,
    lr_disc: num,
    max_steps: num,
    seed: num,
    lambda_t: num,
    tau: num,
    window_radius: num,
    flow_finetune: flag,
    stop_grad_neighbours: flag,
    grad_clip: num,
    loss_flow: flag,
    loss_mask_ct: flag,
    loss_mask_cl: flag,
    loss_temp: flag,
    perceptual_weight: num,
    adversarial_weight: num,
    attention_weight: num,
    initial_channels: num,
    feat_channels: num,
    offset_bound: num,
    flow_backend: backend,
    flow_pairing: pairing,
    mask_mode: mask,
    no_mask: flag,
    no_initialnet: flag,
    no_alignment: flag,
    no_temporal: flag,
}

impl TrainConfig {
    /// Settings sized for the bundled toy clip.
    pub fn test_default() -> Self {
        Self {
            crop_size: 128,
            ..Self::default()
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_mask: self.no_mask,
            no_initialnet: self.no_initialnet,
            no_alignment: self.no_alignment,
            no_temporal: self.no_temporal,
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.no_mask = a.no_mask;
        self.no_initialnet = a.no_initialnet;
        self.no_alignment = a.no_alignment;
        self.no_temporal = a.no_temporal;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.crop_size % ENCODER_STRIDE != 0 || self.crop_size < MIN_FRAME_SIDE {
            return bad(format!(
                "crop_size must be a multiple of {ENCODER_STRIDE} and at least {MIN_FRAME_SIDE}, got {}",
                self.crop_size
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (k, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("lr_flow_finetune", self.lr_flow_finetune),
            ("lr_disc", self.lr_disc),
            ("perceptual_weight", self.perceptual_weight),
            ("adversarial_weight", self.adversarial_weight),
            ("attention_weight", self.attention_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.lambda_t > 0.0 && self.lambda_t.is_finite()) {
            return bad(format!("lambda_t must be > 0, got {}", self.lambda_t));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.window_radius == 0 {
            return bad("window_radius must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        if self.feat_channels == 0 || self.initial_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.offset_bound > 0.0) {
            return bad("offset_bound must be > 0".into());
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
            match self.set(k, v) {
                None => {
                    return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
                }
                Some(Err(())) => {
                    return Err(Error::Config(format!("line {}: bad value `{v}` for `{k}`", n + 1)));
                }
                Some(Ok(())) => {}
            }
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(format!("config {}", path.display())));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every key, one per line, in declaration order.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        fs::write(path, self.to_config_string()).map_err(|e| Error::io(path, e))
    }
}
