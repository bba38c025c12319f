use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Targets;
use crate::numerics::Matrix;

use super::Dataset;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Idx {
        path: path.into(),
        offset,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, offset, "file truncated inside header"))
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &str) -> Result<&'a [u8]> {
    if bytes.len() < start + len {
        return Err(idx_err(
            path,
            bytes.len(),
            format!("file truncated: expected {} bytes of data, found {}", len, bytes.len().saturating_sub(start)),
        ));
    }
    if bytes.len() > start + len {
        return Err(idx_err(path, start + len, "unexpected trailing bytes"));
    }
    Ok(&bytes[start..])
}

/// Parses an IDX image file; pixels are scaled to `[0, 1]`. Returns `(images, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(Matrix, usize, usize)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(idx_err(path, 0, format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let data = payload(bytes, 16, n * rows * cols, path)?;
    let x = Matrix::from_vec(n, rows * cols, data.iter().map(|&p| p as f64 / 255.0).collect())?;
    Ok((x, rows, cols))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(idx_err(path, 0, format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, n, path)?.iter().map(|&b| b as usize).collect())
}

/// Loads a matching pair of IDX image and label files; every row goes to the training split.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ipath = images.display().to_string();
    let lpath = labels.display().to_string();
    let (x, _, _) = parse_idx_images(&std::fs::read(images)?, &ipath)?;
    let y = parse_idx_labels(&std::fs::read(labels)?, &lpath)?;
    if x.rows() != y.len() {
        return Err(idx_err(
            &lpath,
            4,
            format!("{} labels for {} images in {ipath}", y.len(), x.rows()),
        ));
    }
    let mut d = Dataset::new(x, Targets::Classes(y), format!("idx:{ipath}"))?;
    d.classes = Some(d.classes.unwrap_or(0).max(10));
    Ok(d)
}

/// Loads the standard four MNIST files from `dir`, keeping the official train/test split.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    if train.x.cols() != test.x.cols() {
        return Err(Error::domain("MNIST train and test images differ in size"));
    }
    let (n_train, n_test) = (train.len(), test.len());
    let mut data = train.x.as_slice().to_vec();
    data.extend_from_slice(test.x.as_slice());
    let x = Matrix::from_vec(n_train + n_test, train.x.cols(), data)?;
    let (Targets::Classes(mut y), Targets::Classes(yt)) = (train.targets, test.targets) else {
        unreachable!("IDX labels are classes")
    };
    y.extend(yt);
    let mut d = Dataset::new(x, Targets::Classes(y), format!("mnist:{}", dir.display()))?;
    d.classes = Some(10);
    d.train = (0..n_train).collect();
    d.test = (n_train..n_train + n_test).collect();
    d.check()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, r: u32, c: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for word in [IMAGES_MAGIC, n, r, c] {
            v.extend_from_slice(&word.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn labels(l: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(l.len() as u32).to_be_bytes());
        v.extend_from_slice(l);
        v
    }

    #[test]
    fn parses_images_bit_exactly() {
        let (x, r, c) = parse_idx_images(&images(2, 1, 2, &[0, 255, 51, 102]), "t").unwrap();
        assert_eq!((r, c), (1, 2));
        assert_eq!(x.as_slice(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&labels(&[3, 9]), "l").unwrap(), vec![3, 9]);
    }

    #[test]
    fn corrupt_magic_reports_offset_zero() {
        let mut bytes = images(1, 1, 1, &[0]);
        bytes[3] = 0x01;
        let err = parse_idx_images(&bytes, "img").unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 0, .. }), "{err}");
        assert!(parse_idx_labels(&images(1, 1, 1, &[0]), "lab").is_err());
    }

    #[test]
    fn truncation_errors() {
        let err = parse_idx_images(&[], "empty").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let err = parse_idx_images(&images(2, 2, 2, &[1, 2, 3]), "short").unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 19, .. }), "{err}");
        assert!(parse_idx_labels(&labels(&[1, 2])[..9], "l").is_err());
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, images(2, 1, 1, &[0, 1])).unwrap();
        std::fs::write(&lp, labels(&[1, 2, 3])).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("3 labels for 2 images"), "{err}");
        std::fs::write(&lp, labels(&[1, 2])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!((d.len(), d.classes), (2, Some(10)));
    }
}
