//! Two-stage training: self-supervised prototype pretraining on view
//! pairs, then scoring-sheet training with light prototype fine-tuning.

pub mod augment;
mod config;
mod optim;
pub mod sampler;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use augment::{augment_pair, augment_view, AugmentPolicy, AugmentedPair};
pub use config::{SheetInit, TrainConfig};
pub use optim::Sgd;
pub use sampler::{balanced_indices, BalancedSampler};

use crate::datasets::DatasetItem;
use crate::error::{Error, Result};
use crate::explainer::metrics::rates;
use crate::numerics::{zero_grads, Tape, Tensor, Var};
use crate::protomodel::{standardize, unit_tensor, ProtoModel, ScoringSheet};

/// Added inside logarithms of probabilities that may underflow.
pub const LOG_EPS: f32 = 1e-8;

/// Unit-range images with their labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn from_items<'a>(items: impl IntoIterator<Item = &'a DatasetItem>) -> Self {
        let mut out = LabeledImages::default();
        for item in items {
            out.images.push(unit_tensor(&item.image));
            out.labels.push(item.label);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub updates: usize,
    pub sparsity: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Sparsity and held-out quality sampled during classifier training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("updates,sparsity,f1,accuracy\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", p.updates, p.sparsity, p.f1, p.accuracy);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("updates,sparsity,f1,accuracy") {
            return Err(Error::invalid("training curve CSV lacks the expected header"));
        }
        let mut points = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("bad training curve row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            points.push(CurvePoint {
                updates: f[0].parse().map_err(|_| bad())?,
                sparsity: f[1].parse().map_err(|_| bad())?,
                f1: f[2].parse().map_err(|_| bad())?,
                accuracy: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(TrainingCurve { points })
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    /// First point at or after `updates`.
    pub fn at_or_after(&self, updates: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.updates >= updates)
    }

    pub fn best_f1(&self) -> Option<f64> {
        self.points.iter().map(|p| p.f1).reduce(f64::max)
    }
}

/// Mean loss values over a pretraining run, sampled in windows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// `(update, mean align loss, mean anticollapse loss)` per window.
    pub windows: Vec<(usize, f64, f64)>,
}

fn check_finite(update: usize, value: f32) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            update,
            value: value as f64,
        })
    }
}

/// Records the alignment and anticollapse losses for a batch of pairs.
///
/// `z` holds `2k` grids: views a in rows `0..k`, views b in `k..2k`; the
/// first `aligned` pairs have correspondence maps in `maps`.
fn pretrain_losses(
    tape: &mut Tape,
    z: Var,
    k: usize,
    maps: Vec<Vec<usize>>,
) -> Result<(Option<Var>, Var)> {
    let aligned = maps.len();
    let align = if aligned > 0 {
        let za = tape.slice_batch(z, 0, aligned)?;
        let zb = tape.slice_batch(z, k, aligned)?;
        let zb = tape.gather_cells(zb, maps)?;
        let prod = tape.mul(za, zb)?;
        let dot = tape.sum_axis(prod, 1)?;
        let dot = tape.add_scalar(dot, LOG_EPS);
        let log = tape.log(dot);
        let mean = tape.mean(log);
        Some(tape.scale(mean, -1.0))
    } else {
        None
    };
    let (p, _) = tape.spatial_max_pool(z)?;
    let total = tape.sum_axis(p, 0)?;
    let t = tape.tanh(total);
    let t = tape.add_scalar(t, LOG_EPS);
    let log = tape.log(t);
    let mean = tape.mean(log);
    let anticollapse = tape.scale(mean, -1.0);
    Ok((align, anticollapse))
}

/// Self-supervised stage: pulls matching grid cells of two augmented views
/// onto the same prototype while keeping every prototype present in each
/// batch. Only backbone and prototype head change; labels are never seen.
pub fn pretrain_prototypes(
    model: &mut ProtoModel,
    images: &[Tensor],
    config: &TrainConfig,
) -> Result<PretrainLog> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("pretraining needs at least one image"));
    }
    let mut log = PretrainLog::default();
    if config.pretrain_updates == 0 {
        return Ok(log);
    }
    let grid = model.config().grid_size();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = Sgd::new(config.momentum);
    let n_params = model.params_mut().len();
    let lrs = vec![config.lr_pretrain; n_params];
    let window = (config.pretrain_updates / 20).max(1);
    let (mut sum_align, mut sum_anti, mut count) = (0.0f64, 0.0f64, 0usize);

    for update in 1..=config.pretrain_updates {
        let b = config.batch_size;
        let mut with_map = Vec::new();
        let mut without = Vec::new();
        for _ in 0..b {
            let idx = rng.gen_range(0..images.len());
            let pair = augment_pair(&images[idx], &config.augment, grid, rng.gen());
            if pair.correspondence.is_some() {
                with_map.push(pair);
            } else {
                without.push(pair);
            }
        }
        let maps: Vec<Vec<usize>> = with_map
            .iter()
            .map(|p| p.correspondence.clone().expect("filtered"))
            .collect();
        let pairs: Vec<&AugmentedPair> = with_map.iter().chain(&without).collect();
        let mut views = Vec::with_capacity(2 * b);
        for p in &pairs {
            views.push(standardize(&p.view_a, model.config())?);
        }
        for p in &pairs {
            views.push(standardize(&p.view_b, model.config())?);
        }
        let refs: Vec<&Tensor> = views.iter().collect();
        let batch = model.batch(&refs)?;

        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let (z, params) = model.record_grid(&mut tape, x, true)?;
        let (align, anti) = pretrain_losses(&mut tape, z, b, maps)?;
        let align_value = align.map_or(0.0, |a| tape.value(a).item());
        let anti_value = tape.value(anti).item();
        let anti_term = tape.scale(anti, config.anticollapse_weight);
        let loss = match align {
            Some(a) => {
                let a = tape.scale(a, config.align_weight);
                tape.add(a, anti_term)?
            }
            None => anti_term,
        };
        check_finite(update, tape.value(loss).item())?;
        let vars = params.vars().to_vec();
        let grads = tape.backward(loss)?;
        let mut ps = model.params_mut();
        for (v, p) in vars.iter().zip(ps.iter_mut()) {
            grads.accumulate_into(*v, p)?;
        }
        Sgd::clip(&mut ps, config.grad_clip);
        opt.step(&mut ps, &lrs);
        zero_grads(ps.into_iter());

        sum_align += align_value as f64;
        sum_anti += anti_value as f64;
        count += 1;
        if update % window == 0 || update == config.pretrain_updates {
            let (ma, mn) = (sum_align / count as f64, sum_anti / count as f64);
            log::info!("pretrain {update}/{}: align {ma:.4} anticollapse {mn:.4}", config.pretrain_updates);
            log.windows.push((update, ma, mn));
            (sum_align, sum_anti, count) = (0.0, 0.0, 0);
        }
    }
    Ok(log)
}

fn init_sheet(model: &mut ProtoModel, init: SheetInit, rng: &mut ChaCha8Rng) -> Result<()> {
    let (p, c) = (model.num_prototypes(), model.config().num_classes);
    let eps = model.config().relevance_epsilon;
    let disabled: Vec<usize> = model.sheet().disabled().iter().copied().collect();
    let mut sheet = match init {
        SheetInit::Keep => return Ok(()),
        SheetInit::Zeros => ScoringSheet::zeros(p, c, eps),
        SheetInit::Dense(mean) => {
            let normal = Normal::new(mean, 0.1 * mean).map_err(|e| Error::invalid(e.to_string()))?;
            let w = Tensor::from_fn(vec![p, c], |_| normal.sample(rng).max(0.0));
            ScoringSheet::from_weights(w, eps)?
        }
    };
    sheet.set_disabled(disabled)?;
    model.set_sheet(sheet)
}

/// Accuracy and F1 of `model` on `eval`, plus the sheet's sparsity.
pub fn evaluate_point(
    model: &ProtoModel,
    eval: &[Tensor],
    labels: &[usize],
    positive: usize,
    updates: usize,
) -> Result<CurvePoint> {
    let preds = model.predict_batch(&eval.iter().collect::<Vec<_>>())?;
    let labels_pred: Vec<_> = preds.iter().map(|p| p.label).collect();
    let r = rates(labels, &labels_pred, positive, model.config().num_classes);
    Ok(CurvePoint {
        updates,
        sparsity: model.sheet().sparsity_ratio(),
        f1: r.f1,
        accuracy: r.accuracy,
    })
}

/// Supervised stage: trains the scoring sheet (lr_head) and fine-tunes
/// backbone and prototypes (lr_backbone) with cross-entropy on
/// `log(1 + scores)`. After every step the sheet is clamped at zero and
/// shrunk by `sparsity_bias · lr_head`. The curve is sampled on `eval`.
pub fn train_classifier(
    model: &mut ProtoModel,
    train: &LabeledImages,
    eval: &LabeledImages,
    config: &TrainConfig,
) -> Result<TrainingCurve> {
    config.validate()?;
    let num_classes = model.config().num_classes;
    let present: std::collections::BTreeSet<usize> = train.labels.iter().copied().collect();
    if present.len() < 2 {
        return Err(Error::invalid(format!(
            "classifier training needs at least two classes, found {present:?}"
        )));
    }
    if let Some(&bad) = present.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
    }
    if config.positive_class >= num_classes {
        return Err(Error::invalid(format!(
            "positive_class {} out of range for {num_classes} classes",
            config.positive_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    init_sheet(model, config.sheet_init, &mut rng)?;
    let mut sampler = BalancedSampler::new(&train.labels, num_classes, config.seed)?;
    let eval_std: Vec<Tensor> = eval
        .images
        .iter()
        .map(|t| standardize(t, model.config()))
        .collect::<Result<_>>()?;

    let mut curve = TrainingCurve::default();
    let total = config.train_updates;
    if total == 0 {
        return Ok(curve);
    }
    let interval = ((config.eval_fraction * total as f64).round() as usize).max(1);
    let mut opt = Sgd::new(config.momentum);
    let n_backbone = model.params_mut().len();
    let mut lrs = vec![config.lr_backbone; n_backbone];
    lrs.push(config.lr_head);
    let mut sheet_param = model.sheet().raw().clone().with_grad();
    let shrink = config.sparsity_bias * config.lr_head;

    for update in 1..=total {
        let idx: Vec<usize> = sampler.by_ref().take(config.batch_size).collect();
        let mut views = Vec::with_capacity(idx.len());
        for &i in &idx {
            let v = augment_view(&train.images[i], &config.augment, rng.gen());
            views.push(standardize(&v, model.config())?);
        }
        let targets: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let refs: Vec<&Tensor> = views.iter().collect();
        let batch = model.batch(&refs)?;

        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let (z, params) = model.record_grid(&mut tape, x, true)?;
        let (p, _) = tape.spatial_max_pool(z)?;
        let w_leaf = tape.leaf(&sheet_param);
        let w = if model.sheet().disabled().is_empty() {
            w_leaf
        } else {
            let mask = Tensor::from_fn(vec![model.num_prototypes(), num_classes], |i| {
                f32::from(!model.sheet().is_disabled(i / num_classes))
            });
            let m = tape.constant(mask);
            tape.mul(w_leaf, m)?
        };
        let scores = tape.matmul(p, w)?;
        let logits = tape.log1p(scores);
        let loss = tape.cross_entropy(logits, &targets)?;
        check_finite(update, tape.value(loss).item())?;

        let mut vars = params.vars().to_vec();
        vars.push(w_leaf);
        let grads = tape.backward(loss)?;
        {
            let mut ps = model.params_mut();
            ps.push(&mut sheet_param);
            for (v, t) in vars.iter().zip(ps.iter_mut()) {
                grads.accumulate_into(*v, t)?;
            }
            Sgd::clip(&mut ps, config.grad_clip);
            opt.step(&mut ps, &lrs);
            zero_grads(ps.into_iter());
        }
        for v in sheet_param.data_mut() {
            *v = (*v - shrink).max(0.0);
        }
        let raw = model.sheet_mut().raw_mut();
        raw.data_mut().copy_from_slice(sheet_param.data());

        if update % interval == 0 || update == total {
            let point = evaluate_point(model, &eval_std, &eval.labels, config.positive_class, update)?;
            log::info!(
                "train {update}/{total}: sparsity {:.3} f1 {:.3} acc {:.3}",
                point.sparsity,
                point.f1,
                point.accuracy
            );
            curve.points.push(point);
        }
    }
    Ok(curve)
}
