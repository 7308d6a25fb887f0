//! Prototype cards, local and global explanations, and evaluation metrics.

pub mod metrics;

use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use metrics::{rates, Confusion, Rates};

use crate::datasets::DatasetItem;
use crate::error::{Error, Result};
use crate::protomodel::{
    classify, GridCell, Label, PixelRect, Prediction, PresenceVector, ProtoModel, ScoringSheet,
};

/// A prototype counts as found in an image above this presence.
pub const FOUND_THRESHOLD: f32 = 0.1;

/// Presence vectors of a set of images, computed once.
///
/// Presence does not depend on the scoring sheet, so predictions under a
/// changed sheet (after disabling) are recomputed without re-encoding.
#[derive(Clone, Debug)]
pub struct Scan {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub presence: Vec<PresenceVector>,
}

impl Scan {
    pub fn new(model: &ProtoModel, items: &[&DatasetItem]) -> Result<Scan> {
        let images = items
            .iter()
            .map(|i| model.preprocess(&i.image))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = images.iter().collect();
        let presence = model
            .encode_batch(&refs)?
            .iter()
            .map(crate::protomodel::pool_presence)
            .collect();
        Ok(Scan {
            ids: items.iter().map(|i| i.relpath.clone()).collect(),
            labels: items.iter().map(|i| i.label).collect(),
            presence,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn predictions(&self, model: &ProtoModel) -> Vec<Prediction> {
        self.presence
            .iter()
            .map(|p| classify(p.clone(), model.sheet(), model.config().abstain_epsilon))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub image: String,
    pub cell: GridCell,
    pub rect: PixelRect,
    pub presence: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCard {
    pub prototype: usize,
    /// Effective per-class weights.
    pub weights: Vec<f32>,
    pub status: Status,
    pub patches: Vec<Patch>,
}

fn status(sheet: &ScoringSheet, id: usize) -> Status {
    if sheet.is_disabled(id) {
        Status::Disabled
    } else {
        Status::Active
    }
}

fn check_prototype(model: &ProtoModel, id: usize) -> Result<()> {
    if id >= model.num_prototypes() {
        return Err(Error::invalid(format!(
            "prototype {id} out of range (model has {})",
            model.num_prototypes()
        )));
    }
    Ok(())
}

/// The `k` images where prototype `id` is most present, with the patch at
/// its arg-max cell. Zero-weight and disabled prototypes are included.
pub fn top_patches_from(model: &ProtoModel, scan: &Scan, id: usize, k: usize) -> Result<PrototypeCard> {
    check_prototype(model, id)?;
    if scan.is_empty() {
        return Err(Error::invalid("cannot rank patches over an empty dataset"));
    }
    let mut order: Vec<usize> = (0..scan.len()).collect();
    // stable: equal presence keeps dataset order
    order.sort_by(|&a, &b| scan.presence[b].values[id].total_cmp(&scan.presence[a].values[id]));
    let patches = order
        .into_iter()
        .take(k)
        .map(|i| {
            let cell = scan.presence[i].locations[id];
            Ok(Patch {
                image: scan.ids[i].clone(),
                cell,
                rect: model.patch_rectangle(cell)?,
                presence: scan.presence[i].values[id],
            })
        })
        .collect::<Result<_>>()?;
    Ok(PrototypeCard {
        prototype: id,
        weights: model.sheet().effective_row(id),
        status: status(model.sheet(), id),
        patches,
    })
}

pub fn top_patches(model: &ProtoModel, items: &[&DatasetItem], id: usize, k: usize) -> Result<PrototypeCard> {
    check_prototype(model, id)?;
    if items.is_empty() {
        return Err(Error::invalid("cannot rank patches over an empty dataset"));
    }
    top_patches_from(model, &Scan::new(model, items)?, id, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub prototype: usize,
    pub presence: f32,
    pub cell: GridCell,
    pub rect: PixelRect,
    /// `p[i] · W_eff[i, c]` per class.
    pub contributions: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub label: Label,
    pub scores: Vec<f32>,
    pub abstain: bool,
    /// Found (`p > 0.1`) and relevant prototypes, by descending presence.
    pub entries: Vec<ExplanationEntry>,
}

/// Full `P × C` contribution table `p[i] · W_eff[i, c]`.
pub fn contributions(presence: &[f32], sheet: &ScoringSheet) -> Vec<Vec<f32>> {
    presence
        .iter()
        .enumerate()
        .map(|(i, &p)| sheet.effective_row(i).into_iter().map(|w| p * w).collect())
        .collect()
}

/// Explanation of an already computed prediction.
pub fn explain(model: &ProtoModel, prediction: &Prediction) -> Result<Explanation> {
    let sheet = model.sheet();
    let mut entries = Vec::new();
    if !prediction.label.is_abstain() {
        for (i, &p) in prediction.presence.values.iter().enumerate() {
            if p > FOUND_THRESHOLD && sheet.is_relevant(i) {
                let cell = prediction.presence.locations[i];
                entries.push(ExplanationEntry {
                    prototype: i,
                    presence: p,
                    cell,
                    rect: model.patch_rectangle(cell)?,
                    contributions: sheet.effective_row(i).into_iter().map(|w| p * w).collect(),
                });
            }
        }
    }
    entries.sort_by(|a, b| b.presence.total_cmp(&a.presence));
    Ok(Explanation {
        label: prediction.label,
        scores: prediction.scores.clone(),
        abstain: prediction.label.is_abstain(),
        entries,
    })
}

/// Predicts a preprocessed image and explains the result.
pub fn local_explanation(model: &ProtoModel, image: &crate::numerics::Tensor) -> Result<(Prediction, Explanation)> {
    let pred = model.predict(image)?;
    let exp = explain(model, &pred)?;
    Ok((pred, exp))
}

/// Number of found and relevant prototypes (the local explanation size).
pub fn local_size(presence: &[f32], sheet: &ScoringSheet) -> usize {
    presence
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > FOUND_THRESHOLD && sheet.is_relevant(i))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub positive_class: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub sparsity_ratio: f64,
    pub global_size: usize,
    pub mean_local_size: f64,
    pub abstain_fraction: f64,
    pub confusion: Confusion,
}

/// Metrics of the model's current sheet over a scan. Abstentions are
/// wrong for accuracy and F1 and negative for sensitivity.
pub fn metrics_from_scan(model: &ProtoModel, scan: &Scan, positive_class: usize) -> Result<MetricsReport> {
    if scan.is_empty() {
        return Err(Error::invalid("cannot compute metrics on an empty dataset"));
    }
    let c = model.config().num_classes;
    if positive_class >= c {
        return Err(Error::invalid(format!("positive class {positive_class} out of range for {c} classes")));
    }
    let preds = scan.predictions(model);
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let r = rates(&scan.labels, &labels, positive_class, c);
    let sheet = model.sheet();
    let local_total: usize = preds
        .iter()
        .filter(|p| !p.label.is_abstain())
        .map(|p| local_size(&p.presence.values, sheet))
        .sum();
    Ok(MetricsReport {
        images: scan.len(),
        positive_class,
        accuracy: r.accuracy,
        f1: r.f1,
        sensitivity: r.sensitivity,
        specificity: r.specificity,
        sparsity_ratio: sheet.sparsity_ratio(),
        global_size: sheet.global_size(),
        mean_local_size: local_total as f64 / scan.len() as f64,
        abstain_fraction: r.abstain_fraction,
        confusion: r.confusion,
    })
}

pub fn compute_metrics(model: &ProtoModel, items: &[&DatasetItem], positive_class: usize) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::invalid("cannot compute metrics on an empty dataset"));
    }
    metrics_from_scan(model, &Scan::new(model, items)?, positive_class)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalEntry {
    pub prototype: usize,
    pub weights: Vec<f32>,
    pub max_weight: f32,
    pub top_class: usize,
}

/// Every prototype with a nonzero effective weight, by descending largest
/// class weight (ties by id).
pub fn global_explanation(model: &ProtoModel) -> Vec<GlobalEntry> {
    let sheet = model.sheet();
    let mut out: Vec<GlobalEntry> = sheet
        .relevant_prototypes()
        .into_iter()
        .map(|i| {
            let weights = sheet.effective_row(i);
            let mut top = 0;
            for (c, &w) in weights.iter().enumerate() {
                if w > weights[top] {
                    top = c;
                }
            }
            GlobalEntry {
                prototype: i,
                max_weight: weights[top],
                top_class: top,
                weights,
            }
        })
        .collect();
    out.sort_by(|a, b| b.max_weight.total_cmp(&a.max_weight).then(a.prototype.cmp(&b.prototype)));
    out
}

/// Crops a patch out of its source image.
pub fn crop(image: &RgbImage, rect: &PixelRect) -> RgbImage {
    image::imageops::crop_imm(
        image,
        rect.left as u32,
        rect.top as u32,
        (rect.right - rect.left) as u32,
        (rect.bottom - rect.top) as u32,
    )
    .to_image()
}

#[derive(Serialize)]
struct IndexEntry<'a> {
    prototype: usize,
    rank: usize,
    file: String,
    image: &'a str,
    rect: PixelRect,
    presence: f32,
}

/// Writes each card's patches as PNG crops plus an `index.json`.
pub fn export_cards(
    cards: &[PrototypeCard],
    lookup: impl Fn(&str) -> Option<RgbImage>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for card in cards {
        for (rank, patch) in card.patches.iter().enumerate() {
            let src = lookup(&patch.image)
                .ok_or_else(|| Error::invalid(format!("no image {} for export", patch.image)))?;
            let file = format!("proto{:03}_{rank:02}.png", card.prototype);
            let path = dir.join(&file);
            crop(&src, &patch.rect)
                .save(&path)
                .map_err(|e| Error::Image { path: path.clone(), source: e })?;
            index.push(IndexEntry {
                prototype: card.prototype,
                rank,
                file,
                image: &patch.image,
                rect: patch.rect,
                presence: patch.presence,
            });
        }
    }
    let ipath = dir.join("index.json");
    fs::write(&ipath, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&ipath, e))
}
