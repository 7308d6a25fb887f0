//! The prototype model: convolutional backbone, prototype grid `z`,
//! max-pooled presence vector `p` and the scoring sheet.

mod checkpoint;
mod config;
mod sheet;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ConvStage, ModelConfig};
pub use sheet::ScoringSheet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{max_pool_planes, Tape, Tensor, Var};

/// Images per forward pass when scanning many images.
pub const EVAL_CHUNK: usize = 32;

/// Location in the prototype grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
}

/// Half-open pixel rectangle `[top, bottom) × [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }
}

impl std::fmt::Display for PixelRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{})-({},{})",
            self.top, self.left, self.bottom, self.right
        )
    }
}

/// Per-image prototype activations, `[P, H', W']`, softmax-normalized over `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub values: Tensor,
}

impl FeatureGrid {
    pub fn num_prototypes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, prototype: usize, cell: GridCell) -> f32 {
        self.values.at(&[prototype, cell.row, cell.col])
    }
}

/// Max-pooled prototype presence with the cell (and, for studies, the
/// image) where each maximum was found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresenceVector {
    pub values: Vec<f32>,
    pub locations: Vec<GridCell>,
    /// Index of the source image within a study; all zero for one image.
    pub source_images: Vec<usize>,
}

impl PresenceVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    Abstain,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Abstain => None,
        }
    }

    pub fn is_abstain(self) -> bool {
        matches!(self, Label::Abstain)
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Abstain => f.write_str("abstain"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Unnormalized, non-negative class scores.
    pub scores: Vec<f32>,
    pub label: Label,
    pub presence: PresenceVector,
}

/// One convolution with its trainable kernel and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn init(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        let kernel = Tensor::from_fn(vec![cout, cin, k, k], |_| normal.sample(rng)).with_grad();
        ConvLayer {
            kernel,
            bias: Tensor::zeros(vec![cout]).with_grad(),
            stride,
            padding: k / 2,
        }
    }
}

/// Parameter handles recorded on a tape by [`ProtoModel::record_grid`].
pub struct RecordedParams {
    vars: Vec<Var>,
}

impl RecordedParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoModel {
    config: ModelConfig,
    backbone: Vec<ConvLayer>,
    head: ConvLayer,
    sheet: ScoringSheet,
}

impl ProtoModel {
    /// Randomly initialized backbone and head; all-zero scoring sheet.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = config.image_channels;
        let backbone = config
            .backbone
            .iter()
            .map(|s| {
                let layer = ConvLayer::init(cin, s.channels, 3, s.stride, &mut rng);
                cin = s.channels;
                layer
            })
            .collect();
        let head = ConvLayer::init(cin, config.num_prototypes, 1, 1, &mut rng);
        let sheet = ScoringSheet::zeros(
            config.num_prototypes,
            config.num_classes,
            config.relevance_epsilon,
        );
        Ok(ProtoModel {
            config,
            backbone,
            head,
            sheet,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        backbone: Vec<ConvLayer>,
        head: ConvLayer,
        sheet: ScoringSheet,
    ) -> Self {
        ProtoModel {
            config,
            backbone,
            head,
            sheet,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sheet(&self) -> &ScoringSheet {
        &self.sheet
    }

    pub fn sheet_mut(&mut self) -> &mut ScoringSheet {
        &mut self.sheet
    }

    pub fn set_sheet(&mut self, sheet: ScoringSheet) -> Result<()> {
        if sheet.num_prototypes() != self.config.num_prototypes
            || sheet.num_classes() != self.config.num_classes
        {
            return Err(Error::shape(
                "set_sheet",
                format!(
                    "sheet is {}x{}, model needs {}x{}",
                    sheet.num_prototypes(),
                    sheet.num_classes(),
                    self.config.num_prototypes,
                    self.config.num_classes
                ),
            ));
        }
        self.sheet = sheet;
        Ok(())
    }

    pub fn num_prototypes(&self) -> usize {
        self.config.num_prototypes
    }

    /// Backbone and head parameters with stable names, in recording order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("stage{i}.kernel"), &l.kernel));
            out.push((format!("stage{i}.bias"), &l.bias));
        }
        out.push(("head.kernel".into(), &self.head.kernel));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable parameters in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.backbone.iter_mut() {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.kernel);
        out.push(&mut self.head.bias);
        out
    }

    pub(crate) fn layers(&self) -> (&[ConvLayer], &ConvLayer) {
        (&self.backbone, &self.head)
    }

    /// Number of backbone tensors (the head's two tensors follow them).
    pub fn backbone_param_count(&self) -> usize {
        2 * self.backbone.len()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        let expect = [self.config.image_channels, s, s];
        if image.shape() != expect {
            return Err(Error::shape(
                "encode",
                format!("image shape {:?}, model expects {:?}", image.shape(), expect),
            ));
        }
        Ok(())
    }

    /// Stacks images into an `[N, C, S, S]` batch after validating sizes.
    pub fn batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        for img in images {
            self.check_image(img)?;
        }
        Tensor::stack(images)
    }

    /// Records backbone → head → channel softmax on `tape`, returning `z`
    /// as `[N, P, H', W']`. With `trainable`, parameters are recorded as
    /// gradient-requiring leaves whose handles are returned.
    pub fn record_grid(
        &self,
        tape: &mut Tape,
        images: Var,
        trainable: bool,
    ) -> Result<(Var, RecordedParams)> {
        let mut vars = Vec::new();
        let mut record = |tape: &mut Tape, t: &Tensor| {
            let v = if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            v
        };
        let mut x = images;
        for layer in &self.backbone {
            let k = record(tape, &layer.kernel);
            let b = record(tape, &layer.bias);
            let y = tape.conv2d(x, k, Some(b), layer.stride, layer.padding)?;
            x = tape.relu(y);
        }
        let k = record(tape, &self.head.kernel);
        let b = record(tape, &self.head.bias);
        let logits = tape.conv2d(x, k, Some(b), 1, 0)?;
        let z = tape.softmax_channel(logits)?;
        Ok((z, RecordedParams { vars }))
    }

    /// Feature grids for a batch of preprocessed images.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Vec<FeatureGrid>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let batch = self.batch(chunk)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let (z, _) = self.record_grid(&mut tape, x, false)?;
            let zt = tape.value(z);
            let per: usize = zt.shape()[1..].iter().product();
            let shape = zt.shape()[1..].to_vec();
            for i in 0..chunk.len() {
                let values = Tensor::new(shape.clone(), zt.data()[i * per..(i + 1) * per].to_vec())?;
                out.push(FeatureGrid { values });
            }
        }
        Ok(out)
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureGrid> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn classify(&self, presence: PresenceVector) -> Prediction {
        classify(presence, &self.sheet, self.config.abstain_epsilon)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let z = self.encode(image)?;
        Ok(self.classify(pool_presence(&z)))
    }

    pub fn predict_batch(&self, images: &[&Tensor]) -> Result<Vec<Prediction>> {
        Ok(self
            .encode_batch(images)?
            .iter()
            .map(|z| self.classify(pool_presence(z)))
            .collect())
    }

    /// Multi-image study: per-prototype max over every image's presence.
    pub fn predict_study(&self, images: &[&Tensor]) -> Result<Prediction> {
        if images.is_empty() {
            return Err(Error::invalid("a study needs at least one image"));
        }
        let grids = self.encode_batch(images)?;
        let per_image: Vec<PresenceVector> = grids.iter().map(pool_presence).collect();
        Ok(self.classify(study_presence(&per_image)?))
    }

    pub fn patch_rectangle(&self, cell: GridCell) -> Result<PixelRect> {
        patch_rectangle(cell, &self.config)
    }

    /// Converts an 8-bit RGB image into the model's standardized input.
    pub fn preprocess(&self, rgb: &image::RgbImage) -> Result<Tensor> {
        preprocess(rgb, &self.config)
    }
}

/// Spatial max of each prototype channel with first-in-scan-order argmax.
pub fn pool_presence(z: &FeatureGrid) -> PresenceVector {
    let (p, w) = (z.num_prototypes(), z.width());
    let (values, argmax) = max_pool_planes(z.values.data(), p, z.height() * w);
    PresenceVector {
        values,
        locations: argmax
            .into_iter()
            .map(|a| GridCell {
                row: a / w,
                col: a % w,
            })
            .collect(),
        source_images: vec![0; p],
    }
}

/// Elementwise max over per-image presence vectors; ties keep the earliest image.
pub fn study_presence(per_image: &[PresenceVector]) -> Result<PresenceVector> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::invalid("a study needs at least one image"))?;
    let mut out = first.clone();
    out.source_images = vec![0; first.len()];
    for (img, pv) in per_image.iter().enumerate().skip(1) {
        if pv.len() != out.len() {
            return Err(Error::shape("study_presence", "presence vectors differ in length"));
        }
        for i in 0..pv.len() {
            if pv.values[i] > out.values[i] {
                out.values[i] = pv.values[i];
                out.locations[i] = pv.locations[i];
                out.source_images[i] = img;
            }
        }
    }
    Ok(out)
}

/// Scores `presence` with the effective weights of `sheet`.
///
/// Abstains iff every class score is below `abstain_epsilon`; otherwise
/// the label is the arg-max class, lowest id on ties.
pub fn classify(presence: PresenceVector, sheet: &ScoringSheet, abstain_epsilon: f32) -> Prediction {
    let scores = sheet.scores(&presence.values);
    let label = if scores.iter().all(|&s| s < abstain_epsilon) {
        Label::Abstain
    } else {
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        Label::Class(best)
    };
    Prediction {
        scores,
        label,
        presence,
    }
}

/// Pixel rectangle visualizing grid cell `(i, j)`:
/// `[i·s, i·s + r) × [j·s, j·s + r)` with `s` the cell size and
/// `r = s · patch_scale`, clipped to the image.
pub fn patch_rectangle(cell: GridCell, config: &ModelConfig) -> Result<PixelRect> {
    let g = config.grid_size();
    if cell.row >= g || cell.col >= g {
        return Err(Error::invalid(format!(
            "grid cell ({}, {}) outside {g}x{g} grid",
            cell.row, cell.col
        )));
    }
    let s = config.cell_size();
    let r = s * config.patch_scale;
    let n = config.image_size;
    Ok(PixelRect {
        top: cell.row * s,
        left: cell.col * s,
        bottom: (cell.row * s + r).min(n),
        right: (cell.col * s + r).min(n),
    })
}

/// Standardized model input for an 8-bit RGB image of the configured size.
pub fn preprocess(rgb: &image::RgbImage, config: &ModelConfig) -> Result<Tensor> {
    let n = config.image_size as u32;
    if rgb.width() != n || rgb.height() != n {
        return Err(Error::shape(
            "preprocess",
            format!("image is {}x{}, model expects {n}x{n}", rgb.width(), rgb.height()),
        ));
    }
    standardize(&unit_tensor(rgb), config)
}

/// `[3, H, W]` tensor with channel values scaled to `[0, 1]`.
pub fn unit_tensor(rgb: &image::RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + idx] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized from image")
}

/// Applies the per-channel mean/std normalization to a unit-range image.
pub fn standardize(unit: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    if unit.rank() != 3 || unit.shape()[0] != 3 {
        return Err(Error::shape(
            "standardize",
            format!("expected [3, H, W], got {:?}", unit.shape()),
        ));
    }
    let plane = unit.shape()[1] * unit.shape()[2];
    let mut out = unit.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - config.pixel_mean[c]) / config.pixel_std[c];
    }
    Ok(out)
}
