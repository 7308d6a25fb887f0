use image::{GrayImage, Luma, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [
        Corner::TopLeft,
        Corner::TopRight,
        Corner::BottomLeft,
        Corner::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corner::TopLeft => "top-left",
            Corner::TopRight => "top-right",
            Corner::BottomLeft => "bottom-left",
            Corner::BottomRight => "bottom-right",
        }
    }

    pub fn parse(s: &str) -> Option<Corner> {
        Corner::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Which corner an artifact goes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CornerChoice {
    Random,
    Fixed(Corner),
}

/// Colored square artifact: side as a fraction of the image side, inset
/// `margin` pixels from the chosen corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub size_frac: f32,
    pub color: [u8; 3],
    pub corner: CornerChoice,
    pub margin: usize,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        ArtifactSpec {
            size_frac: 0.2,
            color: [40, 210, 70],
            corner: CornerChoice::Random,
            margin: 3,
        }
    }
}

/// A concrete square: top-left pixel and side length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactPlacement {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub color: [u8; 3],
}

impl ArtifactSpec {
    pub fn side(&self, image_size: usize) -> usize {
        (self.size_frac * image_size as f32).round() as usize
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.size_frac) {
            return Err(Error::invalid(format!(
                "artifact size fraction {} outside [0, 1]",
                self.size_frac
            )));
        }
        if self.side(image_size) + self.margin > image_size {
            return Err(Error::invalid(format!(
                "artifact of side {} with margin {} does not fit a {image_size}px image",
                self.side(image_size),
                self.margin
            )));
        }
        Ok(())
    }

    /// Resolves the corner (drawing one when random) into a placement.
    pub fn place<R: Rng>(&self, image_size: usize, rng: &mut R) -> Result<ArtifactPlacement> {
        self.validate(image_size)?;
        let corner = match self.corner {
            CornerChoice::Fixed(c) => c,
            CornerChoice::Random => Corner::ALL[rng.gen_range(0..4)],
        };
        let size = self.side(image_size);
        let far = image_size - self.margin - size;
        let (top, left) = match corner {
            Corner::TopLeft => (self.margin, self.margin),
            Corner::TopRight => (self.margin, far),
            Corner::BottomLeft => (far, self.margin),
            Corner::BottomRight => (far, far),
        };
        Ok(ArtifactPlacement {
            top,
            left,
            size,
            color: self.color,
        })
    }
}

/// Pastes a hard-edged colored square. Returns the new image and a 0/255
/// mask of exactly the replaced pixels; every other pixel is untouched.
pub fn insert_artifact(image: &RgbImage, placement: &ArtifactPlacement) -> Result<(RgbImage, GrayImage)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if placement.top + placement.size > h || placement.left + placement.size > w {
        return Err(Error::invalid(format!(
            "artifact at ({}, {}) of side {} exceeds {w}x{h} image",
            placement.top, placement.left, placement.size
        )));
    }
    let mut out = image.clone();
    let mut mask = GrayImage::new(w as u32, h as u32);
    for y in placement.top..placement.top + placement.size {
        for x in placement.left..placement.left + placement.size {
            out.put_pixel(x as u32, y as u32, image::Rgb(placement.color));
            mask.put_pixel(x as u32, y as u32, Luma([255]));
        }
    }
    Ok((out, mask))
}

pub fn mask_pixel_count(mask: &GrayImage) -> usize {
    mask.pixels().filter(|p| p.0[0] > 0).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn place(top: usize, left: usize, size: usize) -> ArtifactPlacement {
        ArtifactPlacement {
            top,
            left,
            size,
            color: [255, 0, 0],
        }
    }

    #[test]
    fn zero_size_is_noop() {
        let img = RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]));
        let (out, mask) = insert_artifact(&img, &place(2, 2, 0)).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask_pixel_count(&mask), 0);
    }

    #[test]
    fn red_square_on_black() {
        let img = RgbImage::new(64, 64);
        let (out, mask) = insert_artifact(&img, &place(0, 0, 16)).unwrap();
        let red = out.pixels().filter(|p| p.0 == [255, 0, 0]).count();
        assert_eq!(red, 256);
        assert_eq!(mask_pixel_count(&mask), 256);
    }

    #[test]
    fn outside_mask_untouched() {
        let img = RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8, y as u8, (x ^ y) as u8]));
        let (out, mask) = insert_artifact(&img, &place(5, 9, 7)).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let changed = p != img.get_pixel(x, y);
            assert_eq!(changed, mask.get_pixel(x, y).0[0] == 255);
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let img = RgbImage::new(16, 16);
        assert!(insert_artifact(&img, &place(10, 0, 8)).is_err());
        let spec = ArtifactSpec {
            size_frac: 0.98,
            ..ArtifactSpec::default()
        };
        assert!(spec.validate(64).is_err());
    }

    #[test]
    fn placement_respects_corner() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let spec = ArtifactSpec {
            corner: CornerChoice::Fixed(Corner::BottomRight),
            ..ArtifactSpec::default()
        };
        let p = spec.place(64, &mut rng).unwrap();
        assert_eq!((p.top, p.left, p.size), (48, 48, 13));
    }
}
