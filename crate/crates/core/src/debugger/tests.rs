use image::{Luma, Rgb, RgbImage};

use super::*;
use crate::datasets::{CornerChoice, Split};
use crate::numerics::Tensor;
use crate::protomodel::{ConvStage, GridCell, ModelConfig, PresenceVector, ScoringSheet};

fn model(p: usize, weights: Vec<f32>) -> ProtoModel {
    let cfg = ModelConfig {
        image_size: 16,
        num_prototypes: p,
        backbone: vec![
            ConvStage { channels: 4, stride: 2 },
            ConvStage { channels: 8, stride: 2 },
        ],
        ..ModelConfig::default()
    };
    let mut m = ProtoModel::new(cfg, 9).unwrap();
    m.set_sheet(ScoringSheet::from_weights(Tensor::new(vec![p, 2], weights).unwrap(), 1e-3).unwrap())
        .unwrap();
    m
}

fn corner_mask() -> GrayImage {
    let mut m = GrayImage::new(16, 16);
    m.put_pixel(1, 1, Luma([255]));
    m
}

/// Ten images where prototype 0 is present; the first `hits` have it at
/// the masked corner, the rest far away.
fn scan_with_hits(hits: usize) -> (Scan, Vec<Option<GrayImage>>) {
    let mut presence = Vec::new();
    let mut masks = Vec::new();
    for i in 0..10 {
        let cell = if i < hits { GridCell { row: 0, col: 0 } } else { GridCell { row: 3, col: 3 } };
        presence.push(PresenceVector {
            values: vec![0.8, 0.05],
            locations: vec![cell, GridCell { row: 0, col: 0 }],
            source_images: vec![0, 0],
        });
        masks.push(Some(corner_mask()));
    }
    let scan = Scan {
        ids: (0..10).map(|i| format!("img{i}")).collect(),
        labels: vec![0; 10],
        presence,
    };
    (scan, masks)
}

fn report(hits: usize) -> ShortcutReport {
    let m = model(2, vec![1.0, 0.0, 0.0, 1.0]);
    let (scan, masks) = scan_with_hits(hits);
    let refs: Vec<Option<&GrayImage>> = masks.iter().map(Option::as_ref).collect();
    detect_shortcuts_from(&m, &scan, &refs, Thresholds::default()).unwrap()
}

#[test]
fn three_of_ten_is_flagged() {
    let r = report(3);
    let p0 = &r.prototypes[0];
    assert_eq!((p0.activations, p0.overlaps), (10, 3));
    assert!((p0.fraction - 0.3).abs() < 1e-12 && p0.flagged);
    // prototype 1 never exceeds the presence threshold
    assert_eq!(r.prototypes[1].activations, 0);
    assert!(!r.prototypes[1].flagged);
    assert_eq!(r.flagged(), vec![0]);
}

#[test]
fn one_of_ten_is_not_flagged() {
    let r = report(1);
    assert!((r.prototypes[0].fraction - 0.1).abs() < 1e-12);
    assert!(r.flagged().is_empty());
}

#[test]
fn detection_is_order_invariant() {
    let m = model(2, vec![1.0, 0.0, 0.0, 1.0]);
    let (mut scan, mut masks) = scan_with_hits(4);
    let a = {
        let refs: Vec<Option<&GrayImage>> = masks.iter().map(Option::as_ref).collect();
        detect_shortcuts_from(&m, &scan, &refs, Thresholds::default()).unwrap()
    };
    scan.presence.reverse();
    scan.ids.reverse();
    masks.reverse();
    let refs: Vec<Option<&GrayImage>> = masks.iter().map(Option::as_ref).collect();
    let b = detect_shortcuts_from(&m, &scan, &refs, Thresholds::default()).unwrap();
    assert_eq!(a, b);
}

fn item(i: usize, label: usize) -> DatasetItem {
    DatasetItem {
        relpath: format!("test/{label}/s{i}_0.png"),
        split: Split::Test,
        image: RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 9 + i as u32 * 40) as u8, (y * 13) as u8, (label * 120) as u8])),
        label,
        study_id: format!("s{i}"),
        artifact_mask: None,
    }
}

#[test]
fn no_masks_is_rejected_with_guidance() {
    let m = model(2, vec![1.0; 4]);
    let items = [item(0, 0)];
    let err = detect_shortcuts(&m, &[&items[0]], Thresholds::default()).unwrap_err();
    assert!(err.to_string().contains("confound_rate"), "{err}");
}

#[test]
fn disable_enable_roundtrip_and_idempotence() {
    let mut m = model(3, vec![0.5, 0.1, 0.0, 0.7, 0.3, 0.3]);
    let items: Vec<DatasetItem> = (0..4).map(|i| item(i, i % 2)).collect();
    let refs: Vec<&DatasetItem> = items.iter().collect();
    let scan = Scan::new(&m, &refs).unwrap();
    let before = scan.predictions(&m);
    let mut log = InterventionLog::in_memory();
    assert_eq!(disable(&mut m, &[1], &mut log, "t").unwrap(), vec![1]);
    let once = scan.predictions(&m);
    assert!(disable(&mut m, &[1], &mut log, "t").unwrap().is_empty());
    assert_eq!(scan.predictions(&m), once);
    enable(&mut m, &[1], &mut log, "t").unwrap();
    assert_eq!(scan.predictions(&m), before);
    assert_eq!(log.len(), 3);
}

#[test]
fn log_replay_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("interventions.jsonl");
    let mut m = model(4, vec![1.0; 8]);
    let base = m.sheet().clone();
    let mut log = InterventionLog::open(&path).unwrap();
    disable(&mut m, &[0, 2], &mut log, "alice").unwrap();
    enable(&mut m, &[0], &mut log, "alice").unwrap();
    disable(&mut m, &[3], &mut log, "bob").unwrap();
    assert_eq!(log.replay(&base).unwrap().disabled(), m.sheet().disabled());
    let reloaded = InterventionLog::open(&path).unwrap();
    assert_eq!(reloaded.entries(), log.entries());
    assert_eq!(reloaded.entries()[1].action, Action::Disable);
    fs::write(&path, "not json\n").unwrap();
    assert!(InterventionLog::open(&path).is_err());
}

use std::fs;

#[test]
fn zero_size_artifact_rows_match_clean() {
    let m = model(3, vec![0.5, 0.1, 0.0, 0.7, 0.3, 0.3]);
    let items: Vec<DatasetItem> = (0..6).map(|i| item(i, i % 2)).collect();
    let refs: Vec<&DatasetItem> = items.iter().collect();
    let spec = ArtifactSpec {
        size_frac: 0.0,
        corner: CornerChoice::Random,
        ..ArtifactSpec::default()
    };
    let r = counterfactual_eval(&m, &refs, &spec, 1, &[1], 0).unwrap();
    assert_eq!(r.other_with_artifacts, r.other_clean);
    let target: Vec<&DatasetItem> = refs.iter().copied().filter(|i| i.label == 1).collect();
    let scan = Scan::new(&m, &target).unwrap();
    let correct = scan.predictions(&m).iter().filter(|p| p.label == Label::Class(1)).count();
    assert_eq!(r.target_with_artifacts.original, correct as f64 / target.len() as f64);
    assert_eq!(r.full.images, 6);
    assert_eq!(r.without_artifacts, r.full);
}

#[test]
fn all_disabled_abstains_everywhere() {
    let mut m = model(3, vec![0.5, 0.1, 0.0, 0.7, 0.3, 0.3]);
    let items: Vec<DatasetItem> = (0..5).map(|i| item(i, i % 2)).collect();
    let mut refs: Vec<&DatasetItem> = items.iter().collect();
    m.sheet_mut().disable(&[0, 1, 2]).unwrap();
    let a = abstention_report(&m, &refs).unwrap();
    assert_eq!(a.fraction, 1.0);
    assert_eq!(a.abstained.len(), 5);
    refs.reverse();
    assert_eq!(abstention_report(&m, &refs).unwrap(), a);
}
