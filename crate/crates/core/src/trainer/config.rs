use crate::error::{Error, Result};
use crate::kv::KvMap;

use super::augment::AugmentPolicy;

/// How the scoring sheet is initialized when classifier training starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SheetInit {
    /// Keep whatever the model already holds.
    Keep,
    Zeros,
    /// Dense `N(mean, 0.1 · mean)` entries, clamped at zero.
    Dense(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_head: f32,
    pub lr_backbone: f32,
    /// Learning rate for backbone and prototype head while pretraining.
    pub lr_pretrain: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub pretrain_updates: usize,
    pub train_updates: usize,
    pub align_weight: f32,
    pub anticollapse_weight: f32,
    /// Per-step shrink of scoring-sheet weights is `sparsity_bias · lr_head`.
    pub sparsity_bias: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    pub sheet_init: SheetInit,
    /// Fraction of `train_updates` between training-curve evaluations.
    pub eval_fraction: f64,
    /// Class treated as positive for F1 on the training curve.
    pub positive_class: usize,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_head: 0.05,
            lr_backbone: 1e-4,
            lr_pretrain: 0.02,
            momentum: 0.9,
            batch_size: 16,
            pretrain_updates: 2000,
            train_updates: 10_000,
            align_weight: 1.0,
            anticollapse_weight: 1.0,
            sparsity_bias: 0.01,
            grad_clip: 5.0,
            sheet_init: SheetInit::Dense(1.0),
            eval_fraction: 0.05,
            positive_class: 1,
            augment: AugmentPolicy::default(),
            seed: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "lr_head",
    "lr_backbone",
    "lr_pretrain",
    "momentum",
    "batch_size",
    "pretrain_updates",
    "train_updates",
    "align_weight",
    "anticollapse_weight",
    "sparsity_bias",
    "grad_clip",
    "sheet_init",
    "eval_fraction",
    "positive_class",
    "aug_shared_flip",
    "aug_mirror",
    "aug_rotate_prob",
    "aug_rotate_deg",
    "aug_crop_min",
    "aug_brightness",
    "aug_contrast",
    "seed",
];

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = KEYS;

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_head", self.lr_head),
            ("lr_backbone", self.lr_backbone),
            ("lr_pretrain", self.lr_pretrain),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return Err(Error::invalid(format!("eval_fraction {} outside (0, 1]", self.eval_fraction)));
        }
        if self.sparsity_bias < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::invalid("sparsity_bias and grad_clip must be non-negative"));
        }
        let a = &self.augment;
        for (name, v) in [
            ("aug_shared_flip", a.shared_flip),
            ("aug_mirror", a.mirror),
            ("aug_rotate_prob", a.rotate_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} is not a probability")));
            }
        }
        if !(a.crop_min > 0.0 && a.crop_min <= 1.0) {
            return Err(Error::invalid(format!("aug_crop_min {} outside (0, 1]", a.crop_min)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr_head", self.lr_head);
        kv.set("lr_backbone", self.lr_backbone);
        kv.set("lr_pretrain", self.lr_pretrain);
        kv.set("momentum", self.momentum);
        kv.set("batch_size", self.batch_size);
        kv.set("pretrain_updates", self.pretrain_updates);
        kv.set("train_updates", self.train_updates);
        kv.set("align_weight", self.align_weight);
        kv.set("anticollapse_weight", self.anticollapse_weight);
        kv.set("sparsity_bias", self.sparsity_bias);
        kv.set("grad_clip", self.grad_clip);
        kv.set(
            "sheet_init",
            match self.sheet_init {
                SheetInit::Keep => "keep".to_string(),
                SheetInit::Zeros => "zeros".to_string(),
                SheetInit::Dense(m) => format!("dense:{m}"),
            },
        );
        kv.set("eval_fraction", self.eval_fraction);
        kv.set("positive_class", self.positive_class);
        kv.set("aug_shared_flip", self.augment.shared_flip);
        kv.set("aug_mirror", self.augment.mirror);
        kv.set("aug_rotate_prob", self.augment.rotate_prob);
        kv.set("aug_rotate_deg", self.augment.rotate_deg);
        kv.set("aug_crop_min", self.augment.crop_min);
        kv.set("aug_brightness", self.augment.brightness);
        kv.set("aug_contrast", self.augment.contrast);
        kv.set("seed", self.seed);
        kv
    }

    /// Overrides fields present in `kv`; unknown keys are an error.
    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        kv.read("lr_head", &mut self.lr_head)?;
        kv.read("lr_backbone", &mut self.lr_backbone)?;
        kv.read("lr_pretrain", &mut self.lr_pretrain)?;
        kv.read("momentum", &mut self.momentum)?;
        kv.read("batch_size", &mut self.batch_size)?;
        kv.read("pretrain_updates", &mut self.pretrain_updates)?;
        kv.read("train_updates", &mut self.train_updates)?;
        kv.read("align_weight", &mut self.align_weight)?;
        kv.read("anticollapse_weight", &mut self.anticollapse_weight)?;
        kv.read("sparsity_bias", &mut self.sparsity_bias)?;
        kv.read("grad_clip", &mut self.grad_clip)?;
        kv.read("eval_fraction", &mut self.eval_fraction)?;
        kv.read("positive_class", &mut self.positive_class)?;
        kv.read("aug_shared_flip", &mut self.augment.shared_flip)?;
        kv.read("aug_mirror", &mut self.augment.mirror)?;
        kv.read("aug_rotate_prob", &mut self.augment.rotate_prob)?;
        kv.read("aug_rotate_deg", &mut self.augment.rotate_deg)?;
        kv.read("aug_crop_min", &mut self.augment.crop_min)?;
        kv.read("aug_brightness", &mut self.augment.brightness)?;
        kv.read("aug_contrast", &mut self.augment.contrast)?;
        kv.read("seed", &mut self.seed)?;
        if let Some(raw) = kv.get("sheet_init") {
            self.sheet_init = match raw {
                "keep" => SheetInit::Keep,
                "zeros" => SheetInit::Zeros,
                other => match other.strip_prefix("dense:").map(str::parse::<f32>) {
                    Some(Ok(m)) if m >= 0.0 => SheetInit::Dense(m),
                    _ => {
                        return Err(Error::invalid(format!(
                            "sheet_init={other}: expected keep, zeros or dense:<mean>"
                        )))
                    }
                },
            };
        }
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut c = TrainConfig::default();
        c.sheet_init = SheetInit::Dense(0.5);
        c.batch_size = 7;
        c.augment.rotate_deg = 4.0;
        assert_eq!(TrainConfig::default().apply_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = |s: &str| TrainConfig::default().apply_kv(&KvMap::parse(s).unwrap()).is_err();
        assert!(bad("lr_head=0"));
        assert!(bad("batch_size=0"));
        assert!(bad("sheet_init=dense:x"));
        assert!(bad("unknown_key=1"));
    }
}
