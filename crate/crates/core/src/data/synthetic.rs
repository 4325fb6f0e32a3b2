use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed palette; `SyntheticSpec::palette` selects a prefix of it.
pub const PALETTE: [[u8; 3]; 8] = [
    [20, 20, 20],
    [235, 235, 235],
    [220, 50, 47],
    [133, 153, 0],
    [38, 139, 210],
    [181, 137, 0],
    [42, 161, 152],
    [211, 54, 130],
];

const STREAM_IMAGE: u64 = 0x1d47;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub min_rects: usize,
    pub max_rects: usize,
    /// Number of palette colors in use, 1 to 8.
    pub palette: usize,
    pub size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { height: 16, width: 16, min_rects: 2, max_rects: 4, palette: 8, size: 2048 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidArgument("synthetic dataset size must be positive".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidArgument(format!("image {}×{} too small", self.height, self.width)));
        }
        if self.palette == 0 || self.palette > PALETTE.len() {
            return Err(Error::InvalidArgument(format!("palette must use 1..=8 colors, got {}", self.palette)));
        }
        if self.min_rects > self.max_rects {
            return Err(Error::InvalidArgument(format!("rectangle range {}..={} is empty", self.min_rects, self.max_rects)));
        }
        Ok(())
    }
}

/// One image: a background color with axis-aligned rectangles painted in order.
///
/// Draw order from a generator seeded with `derive(seed, 0x1d47, index)`:
/// background color index, rectangle count in `[min, max]`, then per
/// rectangle its color index, height in `[2, H/2]`, width in `[2, W/2]`,
/// top row in `[0, H-h]` and left column in `[0, W-w]`.
pub fn synthetic_image<T: Scalar>(spec: &SyntheticSpec, seed: u64, index: u64) -> Tensor<T> {
    let mut r = rng::seeded(rng::derive(seed, STREAM_IMAGE, index));
    let (h, w) = (spec.height, spec.width);
    let mut px = vec![[0u8; 3]; h * w];
    px.fill(PALETTE[rng::below(&mut r, spec.palette)]);
    let rects = rng::between(&mut r, spec.min_rects, spec.max_rects);
    for _ in 0..rects {
        let color = PALETTE[rng::below(&mut r, spec.palette)];
        let rh = rng::between(&mut r, 2.min(h), (h / 2).max(2));
        let rw = rng::between(&mut r, 2.min(w), (w / 2).max(2));
        let top = rng::between(&mut r, 0, h - rh);
        let left = rng::between(&mut r, 0, w - rw);
        for y in top..top + rh {
            px[y * w + left..y * w + left + rw].fill(color);
        }
    }
    let data = px.iter().flatten().map(|&b| T::of(b as f64 / 255.0)).collect();
    Tensor::new([h, w, 3], data).expect("shape and data agree")
}

pub fn gen_synthetic<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Tensor<T>>> {
    spec.validate()?;
    Ok((0..spec.size as u64).map(|i| synthetic_image(spec, seed, i)).collect())
}
