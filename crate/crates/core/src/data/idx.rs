//! IDX image/label files (big-endian, unsigned-byte payloads).

use std::path::Path;

use super::{Dataset, Targets, DEFAULT_SPLIT};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Loads an image/label IDX pair. Pixels are scaled to `[0, 1]`; examples
/// are split 70/15/15 by a shuffle seeded with `split_seed`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split_seed: u64) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ibuf = read(ipath)?;
    let lbuf = read(lpath)?;

    let magic = be_u32(&ibuf, 0, ipath)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(ipath, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&ibuf, 4, ipath)? as usize;
    let rows = be_u32(&ibuf, 8, ipath)? as usize;
    let cols = be_u32(&ibuf, 12, ipath)? as usize;
    let pixels = &ibuf[16..];
    if pixels.len() != n * rows * cols {
        return Err(Error::format(
            ipath,
            format!("expected {} pixel bytes, found {}", n * rows * cols, pixels.len()),
        ));
    }

    let magic = be_u32(&lbuf, 0, lpath)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(lpath, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n_labels = be_u32(&lbuf, 4, lpath)? as usize;
    let label_bytes = &lbuf[8..];
    if label_bytes.len() != n_labels {
        return Err(Error::format(lpath, format!("expected {n_labels} label bytes, found {}", label_bytes.len())));
    }
    if n_labels != n {
        return Err(Error::Shape(format!("{n_labels} labels for {n} images")));
    }

    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        inputs,
        vec![1, rows, cols],
        Targets::Classes { labels, n_classes },
        format!("idx:{}", ipath.display()),
    )?
    .with_shuffled_split(split_seed, DEFAULT_SPLIT.0, DEFAULT_SPLIT.1)
}

/// Writes a single-channel image dataset as an IDX pair, quantizing pixels
/// to `round(255·v)`.
pub fn write_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let (rows, cols) = match data.feature_shape() {
        [1, r, c] => (*r, *c),
        [r, c] => (*r, *c),
        other => return Err(Error::Shape(format!("cannot write features of shape {other:?} as IDX images"))),
    };
    let Targets::Classes { labels: ls, .. } = data.targets() else {
        return Err(Error::Shape("IDX labels must be classes".into()));
    };
    let mut ibuf = Vec::with_capacity(16 + data.inputs().len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        ibuf.extend_from_slice(&v.to_be_bytes());
    }
    for &v in data.inputs() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        ibuf.push((v * 255.0).round() as u8);
    }
    let mut lbuf = Vec::with_capacity(8 + ls.len());
    lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(ls.len() as u32).to_be_bytes());
    for &l in ls {
        lbuf.push(u8::try_from(l).map_err(|_| Error::Shape(format!("label {l} does not fit in a byte")))?);
    }
    std::fs::write(ipath, ibuf).map_err(|e| Error::io(ipath, e))?;
    std::fs::write(lpath, lbuf).map_err(|e| Error::io(lpath, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_minimal_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut img = header(IDX_IMAGES_MAGIC, &[2, 2, 3]);
        img.extend([0, 255, 51, 102, 0, 0, 1, 2, 3, 4, 5, 255]);
        let mut lab = header(IDX_LABELS_MAGIC, &[2]);
        lab.extend([1, 0]);
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        let d = load_idx(&ip, &lp, 0).unwrap();
        assert_eq!((d.len(), d.dim()), (2, 6));
        assert_eq!(d.feature_shape(), &[1, 2, 3]);
        assert_eq!(d.input(0)[1], 1.0);
        assert_eq!(d.input(0)[2], 0.2);
        assert_eq!(d.n_classes(), Some(2));
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut img = header(IDX_IMAGES_MAGIC, &[2, 1, 1]);
        img.extend([0, 1]);
        let mut lab = header(IDX_LABELS_MAGIC, &[3]);
        lab.extend([0, 1, 0]);
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut lab = header(IDX_LABELS_MAGIC, &[1]);
        lab.push(0);
        std::fs::write(&lp, &lab).unwrap();

        let mut img = header(0x0000_0802, &[1, 1, 1]);
        img.push(0);
        std::fs::write(&ip, &img).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 0), Err(Error::Format { .. })));

        let img = header(IDX_IMAGES_MAGIC, &[1, 2, 2]);
        std::fs::write(&ip, &img).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 0), Err(Error::Format { .. })));

        std::fs::write(&ip, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 0), Err(Error::Format { .. })));
    }
}
