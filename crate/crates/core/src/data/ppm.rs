//! Binary PPM (`P6`) output for sample and dataset previews.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tiles equally sized `[H, W, 3]` images in rows of `cols`, values clamped to `[0, 1]`.
pub fn write_ppm_grid<T: Scalar>(images: &[Tensor<T>], cols: usize, sink: &mut impl Write) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no images to tile".into()))?;
    let [h, w, c] = match first.shape() {
        &[h, w, c] => [h, w, c],
        s => return Err(Error::shape("write_ppm_grid", format!("expected [H, W, 3], got {s:?}"))),
    };
    if c != 3 || cols == 0 {
        return Err(Error::InvalidArgument(format!("need RGB images and cols > 0, got {c} channels, {cols} cols")));
    }
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut px = vec![0u8; gw * gh * 3];
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape("write_ppm_grid", format!("image {i} has shape {:?}", img.shape())));
        }
        let (oy, ox) = ((i / cols) * h, (i % cols) * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = img.data()[(y * w + x) * 3 + ch].as_f64().clamp(0.0, 1.0);
                    px[((oy + y) * gw + ox + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    sink.write_all(&out).map_err(|e| Error::io("<ppm sink>", e))?;
    Ok(())
}
