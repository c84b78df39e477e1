//! IDX (MNIST-style) image and label files.

use std::io::Write;
use std::path::Path;

use super::ImageItem;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdxOptions {
    /// Invert intensities (`1 − p`) after scaling, for dark-on-light sources.
    pub invert: bool,
}

/// Raw IDX image block: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols)
    }
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            format_err(
                path,
                offset,
                format!("header truncated: file has {} bytes", bytes.len()),
            )
        })
}

fn check_payload(bytes: &[u8], header: usize, expected: usize, path: &Path) -> Result<()> {
    let actual = bytes.len() - header.min(bytes.len());
    if actual != expected {
        return Err(format_err(
            path,
            header + actual.min(expected),
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, 8, format!("degenerate image size {rows}x{cols}")));
    }
    check_payload(bytes, 16, count * rows * cols, path)?;
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    check_payload(bytes, 8, count, path)?;
    Ok(bytes[8..].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Bilinear resample of a single-channel image (align-corners off).
pub fn resize_bilinear(src: &[f32], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f32> {
    let sample = |r: f32, c: f32| {
        let r = r.clamp(0.0, (rows - 1) as f32);
        let c = c.clamp(0.0, (cols - 1) as f32);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
        let (fr, fc) = (r - r0 as f32, c - c0 as f32);
        let at = |rr: usize, cc: usize| src[rr * cols + cc];
        (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1)) + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
    };
    let (sr, sc) = (rows as f32 / out_rows as f32, cols as f32 / out_cols as f32);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        for j in 0..out_cols {
            out.push(sample((i as f32 + 0.5) * sr - 0.5, (j as f32 + 0.5) * sc - 0.5));
        }
    }
    out
}

/// Load an IDX image file (and optional label file) as normalised 28×28
/// images. Other sizes are bilinearly resampled to 28×28 before the
/// optional inversion.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>, opts: IdxOptions) -> Result<Vec<ImageItem>> {
    let images = parse_images(&read(images_path)?, images_path)?;
    let labels = match labels_path {
        Some(p) => {
            let labels = parse_labels(&read(p)?, p)?;
            if labels.len() != images.count() {
                return Err(format_err(
                    p,
                    4,
                    format!(
                        "label count {} does not match image count {}",
                        labels.len(),
                        images.count()
                    ),
                ));
            }
            Some(labels)
        }
        None => None,
    };
    let side = ImageItem::SIDE;
    let per = images.rows * images.cols;
    images
        .pixels
        .chunks_exact(per)
        .enumerate()
        .map(|(i, raw)| {
            let mut px: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
            if images.rows != side || images.cols != side {
                px = resize_bilinear(&px, images.rows, images.cols, side, side);
            }
            if opts.invert {
                px.iter_mut().for_each(|p| *p = 1.0 - *p);
            }
            ImageItem::new(px, labels.as_ref().map(|l| l[i].to_string()))
        })
        .collect()
}

pub fn encode_images(images: &[ImageItem]) -> Vec<u8> {
    let side = ImageItem::SIDE as u32;
    let mut out = Vec::with_capacity(16 + images.len() * ImageItem::PIXELS);
    for v in [IMAGES_MAGIC, images.len() as u32, side, side] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(
            img.pixels()
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
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
    fn three_images_parse() {
        let mut bytes = header(IMAGES_MAGIC, &[3, 28, 28]);
        bytes.extend((0..3 * 784).map(|i| (i % 256) as u8));
        let imgs = parse_images(&bytes, Path::new("m")).unwrap();
        assert_eq!(imgs.count(), 3);
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let mut bytes = header(IMAGES_MAGIC, &[2, 28, 28]);
        bytes.extend(vec![0u8; 784 + 10]);
        let err = parse_images(&bytes, Path::new("m")).unwrap_err().to_string();
        assert!(err.contains("expected 1568") && err.contains("found 794"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = header(LABELS_MAGIC, &[0, 28, 28]);
        assert!(parse_images(&bytes, Path::new("m"))
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let src = vec![0.25f32; 105 * 105];
        let out = resize_bilinear(&src, 105, 105, 28, 28);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
