use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// One 3×3 convolution stage of the backbone (padding 1, ReLU after).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub num_prototypes: usize,
    pub num_classes: usize,
    pub backbone: Vec<ConvStage>,
    /// Visualized patch side, in grid cells.
    pub patch_scale: usize,
    pub abstain_epsilon: f32,
    pub relevance_epsilon: f32,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            image_channels: 3,
            num_prototypes: 64,
            num_classes: 2,
            backbone: vec![
                ConvStage { channels: 16, stride: 2 },
                ConvStage { channels: 32, stride: 2 },
                ConvStage { channels: 64, stride: 2 },
                ConvStage { channels: 128, stride: 1 },
            ],
            patch_scale: 2,
            abstain_epsilon: 1e-6,
            relevance_epsilon: 1e-3,
            pixel_mean: [0.5; 3],
            pixel_std: [0.25; 3],
        }
    }
}

const KEYS: &[&str] = &[
    "image_size",
    "image_channels",
    "num_prototypes",
    "num_classes",
    "backbone",
    "patch_scale",
    "abstain_epsilon",
    "relevance_epsilon",
    "pixel_mean",
    "pixel_std",
];

fn parse_triplet(key: &str, raw: &str) -> Result<[f32; 3]> {
    let vals: Vec<f32> = raw
        .split(',')
        .map(|s| s.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("{key}={raw}: {e}")))?;
    vals.try_into()
        .map_err(|_| Error::invalid(format!("{key}={raw}: expected three values")))
}

impl ModelConfig {
    /// Side length of the prototype grid.
    pub fn grid_size(&self) -> usize {
        self.backbone
            .iter()
            .fold(self.image_size, |d, s| (d + 2 - 3) / s.stride + 1)
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.last().map_or(self.image_channels, |s| s.channels)
    }

    /// Pixel stride of one grid cell.
    pub fn cell_size(&self) -> usize {
        self.image_size / self.grid_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.num_prototypes == 0 {
            return Err(Error::invalid("num_prototypes must be at least 1"));
        }
        if self.image_size < 3 || self.image_channels != 3 {
            return Err(Error::invalid("images must be RGB and at least 3 pixels wide"));
        }
        if self.backbone.is_empty() {
            return Err(Error::invalid("backbone needs at least one stage"));
        }
        let mut d = self.image_size;
        for (i, s) in self.backbone.iter().enumerate() {
            if s.stride == 0 || s.channels == 0 {
                return Err(Error::invalid(format!("backbone stage {i}: zero stride or width")));
            }
            if d < 2 {
                return Err(Error::invalid(format!("backbone stage {i}: input {d} too small")));
            }
            d = (d - 1) / s.stride + 1;
        }
        if self.image_size % self.grid_size() != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not a multiple of grid size {}",
                self.image_size,
                self.grid_size()
            )));
        }
        if self.patch_scale == 0 {
            return Err(Error::invalid("patch_scale must be >= 1"));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("pixel_std must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("image_size", self.image_size);
        kv.set("image_channels", self.image_channels);
        kv.set("num_prototypes", self.num_prototypes);
        kv.set("num_classes", self.num_classes);
        let backbone: Vec<String> = self
            .backbone
            .iter()
            .map(|s| format!("{}:{}", s.channels, s.stride))
            .collect();
        kv.set("backbone", backbone.join(","));
        kv.set("patch_scale", self.patch_scale);
        kv.set("abstain_epsilon", self.abstain_epsilon);
        kv.set("relevance_epsilon", self.relevance_epsilon);
        let triplet = |v: [f32; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        kv.set("pixel_mean", triplet(self.pixel_mean));
        kv.set("pixel_std", triplet(self.pixel_std));
        kv
    }

    /// Applies overrides from `kv` on top of `self`. Unknown keys are rejected.
    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        kv.read("image_size", &mut self.image_size)?;
        kv.read("image_channels", &mut self.image_channels)?;
        kv.read("num_prototypes", &mut self.num_prototypes)?;
        kv.read("num_classes", &mut self.num_classes)?;
        kv.read("patch_scale", &mut self.patch_scale)?;
        kv.read("abstain_epsilon", &mut self.abstain_epsilon)?;
        kv.read("relevance_epsilon", &mut self.relevance_epsilon)?;
        if let Some(raw) = kv.get("backbone") {
            self.backbone = raw
                .split(',')
                .map(|part| {
                    let (c, s) = part.trim().split_once(':').ok_or_else(|| {
                        Error::invalid(format!("backbone stage {part:?}: expected channels:stride"))
                    })?;
                    let parse = |v: &str| {
                        v.parse::<usize>()
                            .map_err(|e| Error::invalid(format!("backbone stage {part:?}: {e}")))
                    };
                    Ok(ConvStage {
                        channels: parse(c)?,
                        stride: parse(s)?,
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some(raw) = kv.get("pixel_mean") {
            self.pixel_mean = parse_triplet("pixel_mean", raw)?;
        }
        if let Some(raw) = kv.get("pixel_std") {
            self.pixel_std = parse_triplet("pixel_std", raw)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        ModelConfig::default().apply_kv(kv)
    }
}
