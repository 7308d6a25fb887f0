//! View augmentation for unit-range `[3, S, S]` images.
//!
//! A pair shares one crop-resize and one horizontal flip; after that each
//! view independently draws rotation and brightness/contrast jitter, and
//! view b may be mirrored relative to view a. The grid correspondence map
//! follows the relative mirror. Any rotation makes the pixel shift
//! non-integral on the grid, so such pairs carry no map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Probability of a horizontal flip applied to both views.
    pub shared_flip: f32,
    /// Probability that view b is mirrored relative to view a.
    pub mirror: f32,
    /// Per-view rotation probability and maximum angle in degrees.
    pub rotate_prob: f32,
    pub rotate_deg: f32,
    /// Smallest crop side as a fraction of the image (1 disables cropping).
    pub crop_min: f32,
    /// Additive brightness range `±brightness`.
    pub brightness: f32,
    /// Multiplicative contrast range `1 ± contrast`.
    pub contrast: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            shared_flip: 0.5,
            mirror: 0.5,
            rotate_prob: 0.2,
            rotate_deg: 10.0,
            crop_min: 0.9,
            brightness: 0.1,
            contrast: 0.2,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            shared_flip: 0.0,
            mirror: 0.0,
            rotate_prob: 0.0,
            rotate_deg: 0.0,
            crop_min: 1.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    /// View b is always the mirror image of view a.
    pub fn flip_only() -> Self {
        AugmentPolicy {
            mirror: 1.0,
            ..AugmentPolicy::identity()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view_a: Tensor,
    pub view_b: Tensor,
    /// `map[s]` is the view-b grid cell matching view-a cell `s` (row-major);
    /// `None` when a rotation broke the cell correspondence.
    pub correspondence: Option<Vec<usize>>,
}

/// Two augmented views of `image` plus their grid correspondence on a
/// `grid × grid` feature map. Deterministic in `seed`.
pub fn augment_pair(image: &Tensor, policy: &AugmentPolicy, grid: usize, seed: u64) -> AugmentedPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = shared_geometry(image, policy, &mut rng);
    let mirrored = rng.gen::<f32>() < policy.mirror;
    let (view_a, rot_a) = view_ops(&base, policy, &mut rng);
    if mirrored {
        base = flip_h(&base);
    }
    let (view_b, rot_b) = view_ops(&base, policy, &mut rng);
    let correspondence = (!rot_a && !rot_b).then(|| {
        (0..grid * grid)
            .map(|s| {
                let (r, c) = (s / grid, s % grid);
                if mirrored {
                    r * grid + (grid - 1 - c)
                } else {
                    s
                }
            })
            .collect()
    });
    AugmentedPair {
        view_a,
        view_b,
        correspondence,
    }
}

/// A single augmented view (shared and per-view ops, no pairing).
pub fn augment_view(image: &Tensor, policy: &AugmentPolicy, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = shared_geometry(image, policy, &mut rng);
    view_ops(&base, policy, &mut rng).0
}

fn shared_geometry(image: &Tensor, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = image.clone();
    if policy.crop_min < 1.0 {
        let size = image.shape()[1] as f32;
        let side = size * rng.gen_range(policy.crop_min..=1.0);
        let top = rng.gen_range(0.0..=size - side);
        let left = rng.gen_range(0.0..=size - side);
        out = crop_resize(&out, top, left, side);
    }
    if rng.gen::<f32>() < policy.shared_flip {
        out = flip_h(&out);
    }
    out
}

/// Returns the view and whether it was rotated.
fn view_ops(base: &Tensor, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> (Tensor, bool) {
    let mut out = base.clone();
    let rotated = rng.gen::<f32>() < policy.rotate_prob && policy.rotate_deg > 0.0;
    if rotated {
        let deg = rng.gen_range(-policy.rotate_deg..=policy.rotate_deg);
        out = rotate(&out, deg);
    }
    if policy.brightness > 0.0 || policy.contrast > 0.0 {
        let b = if policy.brightness > 0.0 {
            rng.gen_range(-policy.brightness..=policy.brightness)
        } else {
            0.0
        };
        let c = if policy.contrast > 0.0 {
            rng.gen_range(1.0 - policy.contrast..=1.0 + policy.contrast)
        } else {
            1.0
        };
        for v in out.data_mut() {
            *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        }
    }
    (out, rotated)
}

pub fn flip_h(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let src = t.data();
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let (plane, rem) = (i / (h * w), i % (h * w));
        let (y, x) = (rem / w, rem % w);
        src[plane * h * w + y * w + (w - 1 - x)]
    })
}

/// Bilinear sample with edge clamping at continuous pixel coordinates.
fn sample(src: &[f32], h: usize, w: usize, plane: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let at = |yy: usize, xx: usize| src[plane * h * w + yy * w + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn crop_resize(t: &Tensor, top: f32, left: f32, side: f32) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let src = t.data();
    let scale = side / h as f32;
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let (plane, rem) = (i / (h * w), i % (h * w));
        let (y, x) = ((rem / w) as f32, (rem % w) as f32);
        let sy = top + (y + 0.5) * scale - 0.5;
        let sx = left + (x + 0.5) * scale - 0.5;
        sample(src, h, w, plane, sy, sx)
    })
}

fn rotate(t: &Tensor, degrees: f32) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let src = t.data();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let (plane, rem) = (i / (h * w), i % (h * w));
        let (dy, dx) = ((rem / w) as f32 - cy, (rem % w) as f32 - cx);
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        sample(src, h, w, plane, sy, sx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::from_fn(vec![3, 16, 16], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    #[test]
    fn identity_policy_returns_image() {
        let img = image();
        let pair = augment_pair(&img, &AugmentPolicy::identity(), 4, 9);
        assert_eq!(pair.view_a, img);
        assert_eq!(pair.view_b, img);
        assert_eq!(pair.correspondence, Some((0..16).collect()));
    }

    #[test]
    fn flip_only_mirrors_view_b() {
        let img = image();
        let pair = augment_pair(&img, &AugmentPolicy::flip_only(), 4, 3);
        assert_eq!(pair.view_b, flip_h(&pair.view_a));
        let map = pair.correspondence.unwrap();
        assert_eq!(&map[..4], &[3, 2, 1, 0]);
        assert_eq!(map[5], 6);
    }

    #[test]
    fn fixed_seed_repeats() {
        let img = image();
        let p = AugmentPolicy::default();
        assert_eq!(augment_pair(&img, &p, 4, 11), augment_pair(&img, &p, 4, 11));
        assert_eq!(augment_view(&img, &p, 5), augment_view(&img, &p, 5));
    }

    #[test]
    fn rotation_drops_correspondence() {
        let p = AugmentPolicy {
            rotate_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let p = AugmentPolicy { rotate_deg: 10.0, ..p };
        assert!(augment_pair(&image(), &p, 4, 0).correspondence.is_none());
    }

    #[test]
    fn zero_rotation_and_full_crop_are_exact() {
        let img = image();
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(crop_resize(&img, 0.0, 0.0, 16.0), img);
        assert_eq!(flip_h(&flip_h(&img)), img);
    }

    #[test]
    fn values_stay_in_unit_range() {
        let v = augment_view(&image(), &AugmentPolicy::default(), 1);
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
