//! Architecture and training constants, presets, validation and the flat
//! JSON config file format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Which bin-width predictor sits on top of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Small full-attention transformer over patches of the decoder output.
    Transbins,
    /// Global average pooling followed by an MLP.
    Gap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Coarse-to-fine upsample, concatenate and convolve.
    IterativeFusion,
    /// Project every level to `C`, resample to 1/4 and fuse with 1x1 convs.
    AllMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub reduction_ratios: [usize; 4],
    pub stage_heads: [usize; 4],
    pub patch_kernels: [usize; 4],
    pub patch_strides: [usize; 4],
    pub patch_paddings: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_channels: usize,
    pub n_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub head_kind: HeadKind,
    pub decoder_kind: DecoderKind,
    /// Patch size of the bin-width transformer.
    pub transbins_patch: usize,
    pub transbins_dim: usize,
    pub transbins_layers: usize,
    pub transbins_heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(vec![format!("unknown preset `{other}` (expected `paper` or `tiny`)")])),
        }
    }
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                stage_channels: [64, 128, 320, 512],
                stage_depths: [3, 8, 27, 3],
                reduction_ratios: [8, 4, 2, 1],
                stage_heads: [1, 2, 5, 8],
                patch_kernels: [7, 3, 3, 3],
                patch_strides: [4, 2, 2, 2],
                patch_paddings: [3, 1, 1, 1],
                mlp_ratio: 4,
                decoder_channels: 128,
                n_bins: 256,
                d_min: 1e-3,
                d_max: 10.0,
                head_kind: HeadKind::Transbins,
                decoder_kind: DecoderKind::IterativeFusion,
                transbins_patch: 16,
                transbins_dim: 128,
                transbins_layers: 4,
                transbins_heads: 4,
            },
            Preset::Tiny => Self {
                stage_channels: [16, 32, 64, 128],
                stage_depths: [1, 1, 2, 1],
                reduction_ratios: [8, 4, 2, 1],
                stage_heads: [1, 2, 4, 8],
                n_bins: 32,
                decoder_channels: 32,
                transbins_dim: 64,
                transbins_layers: 2,
                ..Self::preset(Preset::Paper)
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::preset(name.parse()?))
    }

    /// Spatial size of the map the bin heads read, relative to the input.
    pub fn head_input_divisor(&self) -> usize {
        match self.decoder_kind {
            DecoderKind::IterativeFusion => 2,
            DecoderKind::AllMlp => 4,
        }
    }

    /// Rules the encoder alone depends on: input divisibility, stage
    /// geometry and head/channel divisibility.
    pub fn encoder_violations(&self, input_h: usize, input_w: usize) -> Vec<String> {
        let mut v = Vec::new();
        if input_h == 0 || input_h % 32 != 0 {
            v.push(format!("height not divisible by 32 (got {input_h})"));
        }
        if input_w == 0 || input_w % 32 != 0 {
            v.push(format!("width not divisible by 32 (got {input_w})"));
        }
        for i in 0..4 {
            let (c, h) = (self.stage_channels[i], self.stage_heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                v.push(format!("stage {} channels {c} not divisible by heads {h}", i + 1));
            }
            if self.stage_depths[i] == 0 {
                v.push(format!("stage {} depth must be positive", i + 1));
            }
            let r = self.reduction_ratios[i];
            if r == 0 || !r.is_power_of_two() {
                v.push(format!("stage {} reduction ratio {r} is not a power of two", i + 1));
            }
            if i > 0 && r > self.reduction_ratios[i - 1] {
                v.push("reduction ratios must be weakly decreasing".to_string());
            }
            let (k, s, p) = (self.patch_kernels[i], self.patch_strides[i], self.patch_paddings[i]);
            let expected = if i == 0 { 4 } else { 2 };
            if s != expected {
                v.push(format!("stage {} stride must be {expected} (got {s})", i + 1));
            }
            // output = input / stride exactly iff -stride <= 2p - k < 0
            let slack = 2 * p as isize - k as isize;
            if k == 0 || slack >= 0 || slack < -(s as isize) {
                v.push(format!("stage {} kernel {k}/padding {p} does not divide evenly by stride {s}", i + 1));
            }
            if r > 0 && input_h % 32 == 0 && input_w % 32 == 0 {
                let div = 1usize << (i + 2);
                let (sh, sw) = (input_h / div, input_w / div);
                if sh % r != 0 || sw % r != 0 {
                    v.push(format!("stage {} map {sh}x{sw} not divisible by reduction ratio {r}", i + 1));
                }
            }
        }
        if self.mlp_ratio == 0 {
            v.push("mlp_ratio must be positive".to_string());
        }
        v
    }

    /// Every violated rule for this config applied to an `input_h x input_w`
    /// image. Never stops at the first failure.
    pub fn violations(&self, input_h: usize, input_w: usize) -> Vec<String> {
        let mut v = self.encoder_violations(input_h, input_w);
        if self.decoder_channels == 0 {
            v.push("decoder_channels must be positive".to_string());
        }
        if self.n_bins < 2 {
            v.push(format!("n_bins >= 2 violated (got {})", self.n_bins));
        }
        if !(self.d_min > 0.0 && self.d_max.is_finite()) {
            v.push("depth range must be positive and finite".to_string());
        }
        if !(self.d_min < self.d_max) {
            v.push(format!("d_min < d_max violated ({} >= {})", self.d_min, self.d_max));
        }
        if self.head_kind == HeadKind::Transbins {
            let p = self.transbins_patch;
            let div = self.head_input_divisor();
            if p == 0 || (input_h / div) % p != 0 || (input_w / div) % p != 0 {
                v.push(format!(
                    "head input {}x{} not divisible by transbins patch {p}",
                    input_h / div,
                    input_w / div
                ));
            }
            if self.transbins_heads == 0 || self.transbins_dim % self.transbins_heads != 0 {
                v.push("transbins_dim not divisible by transbins_heads".to_string());
            }
            if self.transbins_layers == 0 {
                v.push("transbins_layers must be positive".to_string());
            }
        }
        v
    }

    pub fn validate(&self, input_h: usize, input_w: usize) -> Result<()> {
        let v = self.violations(input_h, input_w);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub silog_lambda: f64,
    pub silog_alpha: f64,
    pub seed: u64,
    pub crop_h: usize,
    pub crop_w: usize,
    /// Ground-truth points per image entering the Chamfer term.
    pub chamfer_sample_cap: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            weight_decay: 0.1,
            total_steps: 1000,
            batch_size: 16,
            gamma: 0.1,
            silog_lambda: 0.85,
            silog_alpha: 10.0,
            seed: 0,
            crop_h: 448,
            crop_w: 576,
            chamfer_sample_cap: 2048,
            checkpoint_every: 0,
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::default(),
            Preset::Tiny => Self { crop_h: 64, crop_w: 64, batch_size: 8, max_lr: 1e-3, total_steps: 2000, ..Self::default() },
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            v.push("max_lr must be positive".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            v.push("weight_decay must be nonnegative".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".to_string());
        }
        if !(self.gamma >= 0.0) {
            v.push("gamma >= 0 violated".to_string());
        }
        if !(self.silog_lambda > 0.0 && self.silog_lambda <= 1.0) {
            v.push("0 < silog_lambda <= 1 violated".to_string());
        }
        if !(self.silog_alpha > 0.0) {
            v.push("silog_alpha must be positive".to_string());
        }
        if self.crop_h == 0 || self.crop_w == 0 || self.crop_h % 32 != 0 || self.crop_w % 32 != 0 {
            v.push(format!("crop {}x{} not divisible by 32", self.crop_h, self.crop_w));
        }
        if self.chamfer_sample_cap == 0 {
            v.push("chamfer_sample_cap must be positive".to_string());
        }
        v
    }
}

/// Model and training settings as stored in one flat JSON object. An
/// optional `"preset"` key picks the base that the remaining keys override.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        Self { model: ModelConfig::preset(p), train: TrainConfig::preset(p) }
    }

    fn flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        for part in [serde_json::to_value(&self.model), serde_json::to_value(&self.train)] {
            if let Ok(Value::Object(m)) = part {
                out.extend(m);
            }
        }
        out
    }

    fn from_flat(flat: Map<String, Value>) -> Result<Self> {
        let model_keys = ModelConfig::preset(Preset::Tiny);
        let model_keys = match serde_json::to_value(model_keys)? {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        let (mut model, mut train) = (Map::new(), Map::new());
        for (k, v) in flat {
            if model_keys.contains_key(&k) {
                model.insert(k, v);
            } else {
                train.insert(k, v);
            }
        }
        let model = serde_json::from_value(Value::Object(model)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let train = serde_json::from_value(Value::Object(train)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        Ok(Self { model, train })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(s).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
        let Value::Object(mut obj) = value else {
            return Err(Error::Config(vec!["config must be a single JSON object".to_string()]));
        };
        let base = match obj.remove("preset") {
            None => Preset::Tiny,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(vec![format!("preset must be a string, got {other}")])),
        };
        let mut flat = Self::preset(base).flat();
        let mut unknown = Vec::new();
        for (k, v) in obj {
            if flat.contains_key(&k) {
                flat.insert(k, v);
            } else {
                unknown.push(format!("unknown key `{k}`"));
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(unknown));
        }
        Self::from_flat(flat)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.flat())).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Apply a `key=value` override. The value is read as JSON when it
    /// parses, otherwise as a bare string (`head_kind=gap`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not key=value")]))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut flat = self.flat();
        if !flat.contains_key(key) {
            return Err(Error::Config(vec![format!("unknown key `{key}`")]));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        flat.insert(key.to_string(), value);
        *self = Self::from_flat(flat)?;
        Ok(())
    }

    pub fn validate(&self, input_h: usize, input_w: usize) -> Result<()> {
        let mut v = self.model.violations(input_h, input_w);
        v.extend(self.train.violations());
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
