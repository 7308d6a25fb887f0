//! Image datasets: synthetic generation, on-disk layout, per-study splits
//! and artifact insertion.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest                 <relpath>,<label>,<study_id>,<has_artifact>
//! train/<class>/<study>_<n>.png
//! test/<class>/...
//! counterfactual/<class>/...
//! masks/<relpath>          0/255 mask, only for artifacted images
//! ```

pub mod artifact;
pub mod split;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

pub use artifact::{insert_artifact, mask_pixel_count, ArtifactPlacement, ArtifactSpec, Corner, CornerChoice};
pub use split::{split_by_study, SplitManifest};
pub use synth::{generate, SyntheticSpec};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest";
pub const SPLIT_FILE: &str = "split.json";
pub const SPEC_FILE: &str = "spec";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Counterfactual,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Counterfactual];

    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Counterfactual => "counterfactual",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.dir() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    /// Path relative to the dataset root; doubles as the item id.
    pub relpath: String,
    pub split: Split,
    pub image: RgbImage,
    pub label: usize,
    pub study_id: String,
    pub artifact_mask: Option<GrayImage>,
}

impl DatasetItem {
    pub fn has_artifact(&self) -> bool {
        self.artifact_mask.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>) -> Self {
        Dataset { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// Owned copy of one split.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset::new(self.items.iter().filter(|i| i.split == split).cloned().collect())
    }

    pub fn get(&self, relpath: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.relpath == relpath)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.items.iter().map(|i| i.label + 1).max().unwrap_or(0)
    }

    pub fn has_masks(&self) -> bool {
        self.items.iter().any(DatasetItem::has_artifact)
    }

    /// Groups item indices by study id, in order of first appearance.
    pub fn studies(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (i, item) in self.items.iter().enumerate() {
            let slot = *index.entry(item.study_id.clone()).or_insert_with(|| {
                out.push((item.study_id.clone(), Vec::new()));
                out.len() - 1
            });
            out[slot].1.push(i);
        }
        out
    }

    /// Writes images, masks and the manifest. The target directory must be
    /// empty or absent.
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut manifest = String::new();
        for item in &self.items {
            let path = root.join(&item.relpath);
            write_image(&path, |p| item.image.save(p))?;
            if let Some(mask) = &item.artifact_mask {
                let mpath = root.join("masks").join(&item.relpath);
                write_image(&mpath, |p| mask.save(p))?;
            }
            manifest.push_str(&format!(
                "{},{},{},{}\n",
                item.relpath,
                item.label,
                item.study_id,
                u8::from(item.has_artifact())
            ));
        }
        let mpath = root.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    /// Reads a dataset written by [`Dataset::save`].
    pub fn load(root: &Path) -> Result<Dataset> {
        let mpath = root.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Format {
                what: "manifest",
                path: mpath.clone(),
                detail: format!("line {}: {detail}", lineno + 1),
            };
            let fields: Vec<&str> = line.split(',').collect();
            let [relpath, label, study, has] = fields[..] else {
                return Err(bad(format!("expected 4 comma-separated fields, got {}", fields.len())));
            };
            let split = relpath
                .split('/')
                .next()
                .and_then(Split::parse)
                .ok_or_else(|| bad(format!("{relpath}: unknown split directory")))?;
            let label: usize = label.parse().map_err(|_| bad(format!("bad label {label:?}")))?;
            let has = match has {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(bad(format!("bad artifact flag {other:?}"))),
            };
            let image = read_rgb(&root.join(relpath))?;
            let artifact_mask = if has {
                let p = root.join("masks").join(relpath);
                let m = image::open(&p)
                    .map_err(|e| Error::Image { path: p.clone(), source: e })?
                    .into_luma8();
                Some(m)
            } else {
                None
            };
            items.push(DatasetItem {
                relpath: relpath.to_string(),
                split,
                image,
                label,
                study_id: study.to_string(),
                artifact_mask,
            });
        }
        Ok(Dataset { items })
    }
}

fn write_image(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_rgb8())
}

/// Generates a synthetic dataset and writes it with its spec and split
/// manifest under `root`.
pub fn generate_to_disk(spec: &SyntheticSpec, root: &Path) -> Result<(Dataset, SplitManifest)> {
    let (ds, split) = generate(spec)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    ds.save(root)?;
    let spath: PathBuf = root.join(SPLIT_FILE);
    fs::write(&spath, serde_json::to_string_pretty(&split)?).map_err(|e| Error::io(&spath, e))?;
    let kpath = root.join(SPEC_FILE);
    fs::write(&kpath, spec.to_kv().to_text()).map_err(|e| Error::io(&kpath, e))?;
    Ok((ds, split))
}

/// The generation spec stored next to a synthetic dataset, if any.
pub fn load_spec(root: &Path) -> Result<Option<SyntheticSpec>> {
    let path = root.join(SPEC_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(SyntheticSpec::default().apply_kv(&crate::kv::KvMap::parse(&text)?)?))
}
