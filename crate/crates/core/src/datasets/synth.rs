//! Synthetic two-class lesion images with an optional colored-square
//! confound on class 1.
//!
//! Class 0 lesions have an irregular perimeter (many random harmonics);
//! class 1 lesions are near-circular discs. Both sit on noisy skin-like
//! backgrounds with per-study color variation.

use std::f32::consts::PI;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::artifact::{insert_artifact, ArtifactSpec, Corner, CornerChoice};
use super::split::{split_by_study, SplitManifest};
use super::{Dataset, DatasetItem, Split};
use crate::error::{Error, Result};
use crate::kv::KvMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Images per class `[class 0, class 1]` in the training split.
    pub train_counts: [usize; 2],
    pub test_counts: [usize; 2],
    /// Fraction of class-1 training images that get the artifact.
    pub confound_rate: f64,
    pub artifact: ArtifactSpec,
    /// Studies hold between 1 and this many images.
    pub max_study_size: usize,
    /// Perimeter irregularity (relative radius deviation) per class.
    pub irregularity: [f32; 2],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            train_counts: [800, 1200],
            test_counts: [300, 300],
            confound_rate: 0.5,
            artifact: ArtifactSpec::default(),
            max_study_size: 3,
            irregularity: [0.16, 0.03],
            seed: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "image_size",
    "train_class0",
    "train_class1",
    "test_class0",
    "test_class1",
    "confound_rate",
    "artifact_size",
    "artifact_color",
    "artifact_corner",
    "artifact_margin",
    "max_study_size",
    "irregularity0",
    "irregularity1",
    "seed",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confound_rate) {
            return Err(Error::invalid(format!(
                "confound_rate {} outside [0, 1]",
                self.confound_rate
            )));
        }
        self.artifact.validate(self.image_size)?;
        if self.image_size < 16 {
            return Err(Error::invalid("image_size must be at least 16"));
        }
        if self.max_study_size == 0 {
            return Err(Error::invalid("max_study_size must be at least 1"));
        }
        for c in 0..2 {
            if self.train_counts[c] == 0 || self.test_counts[c] == 0 {
                return Err(Error::invalid(format!(
                    "class {c} needs at least one train and one test image"
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("image_size", self.image_size);
        kv.set("train_class0", self.train_counts[0]);
        kv.set("train_class1", self.train_counts[1]);
        kv.set("test_class0", self.test_counts[0]);
        kv.set("test_class1", self.test_counts[1]);
        kv.set("confound_rate", self.confound_rate);
        kv.set("artifact_size", self.artifact.size_frac);
        let [r, g, b] = self.artifact.color;
        kv.set("artifact_color", format!("{r},{g},{b}"));
        kv.set(
            "artifact_corner",
            match self.artifact.corner {
                CornerChoice::Random => "random",
                CornerChoice::Fixed(c) => c.name(),
            },
        );
        kv.set("artifact_margin", self.artifact.margin);
        kv.set("max_study_size", self.max_study_size);
        kv.set("irregularity0", self.irregularity[0]);
        kv.set("irregularity1", self.irregularity[1]);
        kv.set("seed", self.seed);
        kv
    }

    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        kv.read("image_size", &mut self.image_size)?;
        kv.read("train_class0", &mut self.train_counts[0])?;
        kv.read("train_class1", &mut self.train_counts[1])?;
        kv.read("test_class0", &mut self.test_counts[0])?;
        kv.read("test_class1", &mut self.test_counts[1])?;
        kv.read("confound_rate", &mut self.confound_rate)?;
        kv.read("artifact_size", &mut self.artifact.size_frac)?;
        kv.read("artifact_margin", &mut self.artifact.margin)?;
        kv.read("max_study_size", &mut self.max_study_size)?;
        kv.read("irregularity0", &mut self.irregularity[0])?;
        kv.read("irregularity1", &mut self.irregularity[1])?;
        kv.read("seed", &mut self.seed)?;
        if let Some(raw) = kv.get("artifact_color") {
            let parts: Vec<u8> = raw
                .split(',')
                .map(|s| s.trim().parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("artifact_color={raw}: {e}")))?;
            self.artifact.color = parts
                .try_into()
                .map_err(|_| Error::invalid(format!("artifact_color={raw}: need r,g,b")))?;
        }
        if let Some(raw) = kv.get("artifact_corner") {
            self.artifact.corner = match raw {
                "random" => CornerChoice::Random,
                other => CornerChoice::Fixed(Corner::parse(other).ok_or_else(|| {
                    Error::invalid(format!("artifact_corner={other}: unknown corner"))
                })?),
            };
        }
        self.validate()?;
        Ok(self)
    }
}

/// Stream ids for the per-purpose RNGs derived from the spec seed.
const STREAM_STUDIES: u64 = 1;
const STREAM_ARTIFACTS: u64 = 2;
const STREAM_IMAGES: u64 = 1 << 32;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shape and color parameters shared by every image of one study.
#[derive(Clone, Debug)]
struct StudyLook {
    radius: f32,
    harmonics: Vec<(f32, f32, f32)>, // (frequency, amplitude, phase)
    skin: [f32; 3],
    lesion: [f32; 3],
}

impl StudyLook {
    fn draw(class: usize, irregularity: f32, rng: &mut ChaCha8Rng) -> Self {
        let radius = rng.gen_range(12.0..17.0);
        let freqs: Vec<f32> = if class == 0 {
            (3..=11).map(|k| k as f32).collect()
        } else {
            vec![2.0, 3.0]
        };
        let raw: Vec<f32> = freqs.iter().map(|_| rng.gen_range(0.3..1.0f32)).collect();
        // scale amplitudes so the RMS deviation equals `irregularity`
        let rms = (raw.iter().map(|a| a * a).sum::<f32>() / 2.0).sqrt();
        let harmonics = freqs
            .iter()
            .zip(&raw)
            .map(|(&k, &a)| (k, a / rms * irregularity, rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let skin = [
            rng.gen_range(190.0..225.0),
            rng.gen_range(145.0..180.0),
            rng.gen_range(120.0..155.0),
        ];
        let lesion = [
            rng.gen_range(95.0..140.0),
            rng.gen_range(60.0..90.0),
            rng.gen_range(45.0..75.0),
        ];
        StudyLook {
            radius,
            harmonics,
            skin,
            lesion,
        }
    }

    fn radius_at(&self, theta: f32) -> f32 {
        let dev: f32 = self
            .harmonics
            .iter()
            .map(|&(k, a, ph)| a * (k * theta + ph).sin())
            .sum();
        self.radius * (1.0 + dev)
    }
}

fn render(look: &StudyLook, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let half = size as f32 / 2.0;
    let cx = half + rng.gen_range(-5.0..5.0);
    let cy = half + rng.gen_range(-5.0..5.0);
    let spin = rng.gen_range(0.0..2.0 * PI);
    let scale = rng.gen_range(0.9..1.1f32);
    let light = rng.gen_range(-12.0..12.0f32);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx) - spin;
            let edge = look.radius_at(theta) * scale;
            let alpha = (edge - d + 0.5).clamp(0.0, 1.0);
            let grain = rng.gen_range(-9.0..9.0f32);
            let mottle = rng.gen_range(-6.0..6.0f32) * alpha;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = look.skin[c] * (1.0 - alpha) + look.lesion[c] * alpha + grain + mottle + light;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

struct Planned {
    class: usize,
    study: String,
    view: usize,
    look: usize,
}

/// Generates the full dataset in memory. Pure function of `spec`.
///
/// Studies are drawn per class until the combined train + test image count
/// is reached, then split by study per class. Exactly
/// `round(confound_rate · |class-1 train|)` class-1 training images get the
/// artifact. The counterfactual split holds every class-0 test image with
/// an artifact inserted.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, SplitManifest)> {
    spec.validate()?;
    let mut study_rng = stream_rng(spec.seed, STREAM_STUDIES);
    let mut looks = Vec::new();
    let mut planned: Vec<Planned> = Vec::new();
    let mut study_no = 0usize;
    for class in 0..2 {
        let target = spec.train_counts[class] + spec.test_counts[class];
        let mut made = 0;
        while made < target {
            let n = study_rng.gen_range(1..=spec.max_study_size).min(target - made);
            let study = format!("s{study_no:05}");
            study_no += 1;
            looks.push(StudyLook::draw(class, spec.irregularity[class], &mut study_rng));
            for view in 0..n {
                planned.push(Planned {
                    class,
                    study: study.clone(),
                    view,
                    look: looks.len() - 1,
                });
            }
            made += n;
        }
    }

    let relpath = |split: Split, p: &Planned| {
        format!("{}/{}/{}_{}.png", split.dir(), p.class, p.study, p.view)
    };
    let mut split = SplitManifest {
        train: Vec::new(),
        test: Vec::new(),
        seed: spec.seed,
        fraction: 0.0,
    };
    let mut is_test = vec![false; planned.len()];
    for class in 0..2 {
        let idx: Vec<usize> = (0..planned.len()).filter(|&i| planned[i].class == class).collect();
        let pairs: Vec<(String, String)> = idx
            .iter()
            .map(|&i| (i.to_string(), planned[i].study.clone()))
            .collect();
        let fraction = spec.test_counts[class] as f64
            / (spec.train_counts[class] + spec.test_counts[class]) as f64;
        let m = split_by_study(&pairs, fraction, spec.seed.wrapping_add(class as u64))?;
        for id in &m.test {
            is_test[id.parse::<usize>().expect("numeric id")] = true;
        }
    }
    let total_test: usize = spec.test_counts.iter().sum();
    split.fraction = total_test as f64 / planned.len() as f64;

    let mut art_rng = stream_rng(spec.seed, STREAM_ARTIFACTS);
    let mut confounded: Vec<usize> = (0..planned.len())
        .filter(|&i| !is_test[i] && planned[i].class == 1)
        .collect();
    let n_art = (spec.confound_rate * confounded.len() as f64).round() as usize;
    confounded.shuffle(&mut art_rng);
    let mut chosen = confounded[..n_art].to_vec();
    chosen.sort_unstable();

    let mut items = Vec::with_capacity(planned.len());
    for (i, p) in planned.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, STREAM_IMAGES + i as u64);
        let image = render(&looks[p.look], spec.image_size, &mut rng);
        let side = if is_test[i] { Split::Test } else { Split::Train };
        let path = relpath(side, p);
        if is_test[i] {
            split.test.push(path.clone());
        } else {
            split.train.push(path.clone());
        }
        items.push(DatasetItem {
            relpath: path,
            split: side,
            image,
            label: p.class,
            study_id: p.study.clone(),
            artifact_mask: None,
        });
    }

    for i in chosen {
        let placement = spec.artifact.place(spec.image_size, &mut art_rng)?;
        let (img, mask) = insert_artifact(&items[i].image, &placement)?;
        items[i].image = img;
        items[i].artifact_mask = Some(mask);
    }

    let cf: Vec<usize> = (0..items.len())
        .filter(|&i| items[i].split == Split::Test && items[i].label == 0)
        .collect();
    for i in cf {
        let placement = spec.artifact.place(spec.image_size, &mut art_rng)?;
        let (img, mask) = insert_artifact(&items[i].image, &placement)?;
        let src = &items[i];
        let p = &planned[i];
        items.push(DatasetItem {
            relpath: relpath(Split::Counterfactual, p),
            split: Split::Counterfactual,
            image: img,
            label: src.label,
            study_id: src.study_id.clone(),
            artifact_mask: Some(mask),
        });
    }

    Ok((Dataset { items }, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::artifact::mask_pixel_count;

    fn small(rate: f64) -> SyntheticSpec {
        SyntheticSpec {
            image_size: 32,
            train_counts: [20, 40],
            test_counts: [10, 10],
            confound_rate: rate,
            seed: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn no_confound_no_masks() {
        let (ds, _) = generate(&small(0.0)).unwrap();
        assert!(ds
            .items
            .iter()
            .filter(|i| i.split != Split::Counterfactual)
            .all(|i| i.artifact_mask.is_none()));
    }

    #[test]
    fn exact_artifact_count_and_placement_rules() {
        let (ds, split) = generate(&small(0.5)).unwrap();
        let class1_train = ds
            .items
            .iter()
            .filter(|i| i.split == Split::Train && i.label == 1)
            .count();
        let artifacted: Vec<_> = ds
            .items
            .iter()
            .filter(|i| i.split == Split::Train && i.artifact_mask.is_some())
            .collect();
        assert_eq!(artifacted.len(), (0.5 * class1_train as f64).round() as usize);
        assert!(artifacted.iter().all(|i| i.label == 1));
        assert!(ds
            .items
            .iter()
            .filter(|i| i.split == Split::Test)
            .all(|i| i.artifact_mask.is_none()));
        let side = small(0.5).artifact.side(32);
        for item in ds.items.iter().filter(|i| i.artifact_mask.is_some()) {
            assert_eq!(mask_pixel_count(item.artifact_mask.as_ref().unwrap()), side * side);
        }
        let cf: Vec<_> = ds.items.iter().filter(|i| i.split == Split::Counterfactual).collect();
        assert!(!cf.is_empty() && cf.iter().all(|i| i.label == 0 && i.artifact_mask.is_some()));

        let train = split.train_set();
        let test = split.test_set();
        assert!(train.is_disjoint(&test));
        let study_of = |p: &str| ds.items.iter().find(|i| i.relpath == p).unwrap().study_id.clone();
        let train_studies: std::collections::BTreeSet<_> = train.iter().map(|p| study_of(p)).collect();
        assert!(test.iter().all(|p| !train_studies.contains(&study_of(p))));
    }

    #[test]
    fn deterministic() {
        let (a, sa) = generate(&small(0.5)).unwrap();
        let (b, sb) = generate(&small(0.5)).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.items.len(), b.items.len());
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.relpath, y.relpath);
            assert_eq!(x.image, y.image);
            assert_eq!(x.artifact_mask, y.artifact_mask);
        }
    }

    #[test]
    fn kv_roundtrip() {
        let mut spec = small(0.25);
        spec.artifact.corner = CornerChoice::Fixed(Corner::TopRight);
        spec.artifact.color = [1, 2, 3];
        let back = SyntheticSpec::default().apply_kv(&spec.to_kv()).unwrap();
        assert_eq!(back, spec);
        assert!(SyntheticSpec::default()
            .apply_kv(&KvMap::parse("confound_rate=1.5").unwrap())
            .is_err());
    }
}
