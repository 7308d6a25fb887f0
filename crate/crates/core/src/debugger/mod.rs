//! Shortcut detection by mask overlap, prototype disabling with an audit
//! trail, counterfactual evaluation and abstention reporting.

mod log;

use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use log::{Action, InterventionLog, LogEntry};

use crate::datasets::{insert_artifact, ArtifactSpec, DatasetItem};
use crate::error::{Error, Result};
use crate::explainer::Scan;
use crate::protomodel::{Label, PixelRect, ProtoModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub presence: f32,
    pub overlap: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            presence: 0.1,
            overlap: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeOverlap {
    pub prototype: usize,
    /// Images where presence exceeds the presence threshold.
    pub activations: usize,
    /// Of those, images whose arg-max patch touches the artifact mask.
    pub overlaps: usize,
    pub fraction: f64,
    pub flagged: bool,
    /// Effective per-class weights at detection time.
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortcutReport {
    pub thresholds: Thresholds,
    pub images: usize,
    pub prototypes: Vec<PrototypeOverlap>,
}

impl ShortcutReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.prototypes
            .iter()
            .filter(|p| p.flagged)
            .map(|p| p.prototype)
            .collect()
    }
}

/// True when at least one mask pixel inside `rect` is set.
pub fn rect_touches_mask(rect: &PixelRect, mask: &GrayImage) -> bool {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    (rect.top..rect.bottom.min(h))
        .any(|y| (rect.left..rect.right.min(w)).any(|x| mask.get_pixel(x as u32, y as u32).0[0] > 0))
}

fn no_masks() -> Error {
    Error::Precondition(
        "no artifact masks in the dataset; generate it with a nonzero confound_rate so artifacted images carry masks"
            .into(),
    )
}

/// Overlap statistics over precomputed presence. `masks[i]` belongs to
/// `scan` image `i`; images without a mask never overlap.
pub fn detect_shortcuts_from(
    model: &ProtoModel,
    scan: &Scan,
    masks: &[Option<&GrayImage>],
    thresholds: Thresholds,
) -> Result<ShortcutReport> {
    if masks.len() != scan.len() {
        return Err(Error::invalid("one mask slot per scanned image is required"));
    }
    if masks.iter().all(Option::is_none) {
        return Err(no_masks());
    }
    let mut prototypes = Vec::with_capacity(model.num_prototypes());
    for id in 0..model.num_prototypes() {
        let (mut activations, mut overlaps) = (0usize, 0usize);
        for (pv, mask) in scan.presence.iter().zip(masks) {
            if pv.values[id] <= thresholds.presence {
                continue;
            }
            activations += 1;
            if let Some(mask) = mask {
                let rect = model.patch_rectangle(pv.locations[id])?;
                if rect_touches_mask(&rect, mask) {
                    overlaps += 1;
                }
            }
        }
        let fraction = if activations == 0 {
            0.0
        } else {
            overlaps as f64 / activations as f64
        };
        prototypes.push(PrototypeOverlap {
            prototype: id,
            activations,
            overlaps,
            fraction,
            flagged: activations > 0 && fraction >= thresholds.overlap,
            weights: model.sheet().effective_row(id),
        });
    }
    Ok(ShortcutReport {
        thresholds,
        images: scan.len(),
        prototypes,
    })
}

pub fn detect_shortcuts(model: &ProtoModel, items: &[&DatasetItem], thresholds: Thresholds) -> Result<ShortcutReport> {
    if !items.iter().any(|i| i.has_artifact()) {
        return Err(no_masks());
    }
    let scan = Scan::new(model, items)?;
    let masks: Vec<Option<&GrayImage>> = items.iter().map(|i| i.artifact_mask.as_ref()).collect();
    detect_shortcuts_from(model, &scan, &masks, thresholds)
}

/// Disables `ids` and appends one log entry per id. Returns the ids whose
/// state changed.
pub fn disable(model: &mut ProtoModel, ids: &[usize], log: &mut InterventionLog, actor: &str) -> Result<Vec<usize>> {
    let changed = model.sheet_mut().disable(ids)?;
    for &id in ids {
        log.append(LogEntry::now(id, Action::Disable, actor))?;
    }
    Ok(changed)
}

pub fn enable(model: &mut ProtoModel, ids: &[usize], log: &mut InterventionLog, actor: &str) -> Result<Vec<usize>> {
    let changed = model.sheet_mut().enable(ids)?;
    for &id in ids {
        log.append(LogEntry::now(id, Action::Enable, actor))?;
    }
    Ok(changed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub images: usize,
    pub original: f64,
    pub adapted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub target_class: usize,
    /// Prototypes disabled in the adapted model (on top of any already disabled).
    pub disabled: Vec<usize>,
    /// Every given test image.
    pub full: SubsetAccuracy,
    /// Test images that carry no artifact.
    pub without_artifacts: SubsetAccuracy,
    /// Target-class images with an artifact inserted.
    pub target_with_artifacts: SubsetAccuracy,
    /// Other-class images with an artifact inserted.
    pub other_with_artifacts: SubsetAccuracy,
    /// Other-class images as given (reference for the inserted row).
    pub other_clean: SubsetAccuracy,
}

fn accuracy(labels: &[usize], preds: &[Label], keep: impl Fn(usize) -> bool) -> (usize, f64) {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| keep(i)).collect();
    if idx.is_empty() {
        return (0, 0.0);
    }
    let correct = idx.iter().filter(|&&i| preds[i].class() == Some(labels[i])).count();
    (idx.len(), correct as f64 / idx.len() as f64)
}

/// Table-style comparison of the current model against a copy with
/// `flagged` disabled, on clean images and on copies with the artifact
/// inserted (placements drawn from `seed`).
pub fn counterfactual_eval(
    model: &ProtoModel,
    test: &[&DatasetItem],
    artifact: &ArtifactSpec,
    target_class: usize,
    flagged: &[usize],
    seed: u64,
) -> Result<CounterfactualReport> {
    if test.is_empty() {
        return Err(Error::invalid("counterfactual evaluation needs test images"));
    }
    let mut adapted = model.clone();
    adapted.sheet_mut().disable(flagged)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = model.config().image_size;
    let inserted: Vec<DatasetItem> = test
        .iter()
        .map(|item| {
            let placement = artifact.place(size, &mut rng)?;
            let (image, mask) = insert_artifact(&item.image, &placement)?;
            Ok(DatasetItem {
                image,
                artifact_mask: Some(mask),
                ..(*item).clone()
            })
        })
        .collect::<Result<_>>()?;
    let inserted_refs: Vec<&DatasetItem> = inserted.iter().collect();

    let clean = Scan::new(model, test)?;
    let dirty = Scan::new(model, &inserted_refs)?;
    let labels = &clean.labels;
    let preds = |scan: &Scan, m: &ProtoModel| -> Vec<Label> { scan.predictions(m).iter().map(|p| p.label).collect() };
    let (co, ca) = (preds(&clean, model), preds(&clean, &adapted));
    let (do_, da) = (preds(&dirty, model), preds(&dirty, &adapted));

    let row = |o: &[Label], a: &[Label], keep: &dyn Fn(usize) -> bool| {
        let (n, orig) = accuracy(labels, o, keep);
        let (_, adap) = accuracy(labels, a, keep);
        SubsetAccuracy {
            images: n,
            original: orig,
            adapted: adap,
        }
    };
    Ok(CounterfactualReport {
        target_class,
        disabled: flagged.to_vec(),
        full: row(&co, &ca, &|_| true),
        without_artifacts: row(&co, &ca, &|i| !test[i].has_artifact()),
        target_with_artifacts: row(&do_, &da, &|i| labels[i] == target_class),
        other_with_artifacts: row(&do_, &da, &|i| labels[i] != target_class),
        other_clean: row(&co, &ca, &|i| labels[i] != target_class),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbstentionReport {
    pub images: usize,
    pub fraction: f64,
    /// Ids of abstained images, sorted.
    pub abstained: Vec<String>,
}

pub fn abstention_from_scan(model: &ProtoModel, scan: &Scan) -> AbstentionReport {
    let preds = scan.predictions(model);
    let mut abstained: Vec<String> = preds
        .iter()
        .zip(&scan.ids)
        .filter(|(p, _)| p.label.is_abstain())
        .map(|(_, id)| id.clone())
        .collect();
    abstained.sort();
    AbstentionReport {
        images: scan.len(),
        fraction: if scan.is_empty() {
            0.0
        } else {
            abstained.len() as f64 / scan.len() as f64
        },
        abstained,
    }
}

pub fn abstention_report(model: &ProtoModel, items: &[&DatasetItem]) -> Result<AbstentionReport> {
    Ok(abstention_from_scan(model, &Scan::new(model, items)?))
}

#[cfg(test)]
mod tests;
