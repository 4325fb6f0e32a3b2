//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! channel-planar pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32×32).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<u8>,
}

fn batch_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingFiles { dir: dir.to_path_buf(), pattern: format!("{prefix}*.bin") });
    }
    Ok(files)
}

/// Parses one batch file; images are `32×32×3` (or `16×16×3` with 2×2 mean pooling).
pub fn load_cifar10_file<T: Scalar>(path: &Path, downsample: bool) -> Result<LabeledImages<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = bytes.len();
    if len % RECORD_BYTES != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: len as u64,
            record: RECORD_BYTES,
            offset: (len - len % RECORD_BYTES) as u64,
        });
    }
    let mut out = LabeledImages { images: Vec::new(), labels: Vec::new() };
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::InvalidArgument(format!(
                "{}: record {i} at byte offset {} has label {label}",
                path.display(),
                i * RECORD_BYTES
            )));
        }
        let px = &rec[1..];
        let side = if downsample { SIDE / 2 } else { SIDE };
        let mut data = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    let v = if downsample {
                        let at = |yy: usize, xx: usize| px[c * PLANE + yy * SIDE + xx] as f64;
                        (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0
                    } else {
                        px[c * PLANE + y * SIDE + x] as f64
                    };
                    data.push(T::of(v / 255.0));
                }
            }
        }
        out.images.push(Tensor::new([side, side, 3], data)?);
        out.labels.push(label);
    }
    Ok(out)
}

fn load_prefix<T: Scalar>(dir: &Path, prefix: &str, downsample: bool) -> Result<LabeledImages<T>> {
    let mut all = LabeledImages { images: Vec::new(), labels: Vec::new() };
    for f in batch_files(dir, prefix)? {
        let part = load_cifar10_file(&f, downsample)?;
        all.images.extend(part.images);
        all.labels.extend(part.labels);
    }
    Ok(all)
}

/// Every `data_batch_*.bin` in `dir`, in file-name order.
pub fn load_cifar10<T: Scalar>(dir: &Path, downsample: bool) -> Result<LabeledImages<T>> {
    load_prefix(dir, "data_batch_", downsample)
}

/// The `test_batch.bin` split.
pub fn load_cifar10_test<T: Scalar>(dir: &Path, downsample: bool) -> Result<LabeledImages<T>> {
    load_prefix(dir, "test_batch", downsample)
}
