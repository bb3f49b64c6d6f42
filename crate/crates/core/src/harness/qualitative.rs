//! Paletted BEV rasters in portable pixmap format and per-cell error masks.

use std::path::Path;

use crate::error::{Error, Result};

/// One colour per class-membership bitmask (up to four classes), so
/// overlapping multi-label cells stay decodable.
pub const PALETTE: [[u8; 3]; 16] = [
    [24, 24, 24],
    [90, 90, 200],
    [240, 240, 240],
    [150, 150, 230],
    [220, 60, 60],
    [200, 80, 160],
    [250, 150, 150],
    [230, 130, 210],
    [240, 180, 40],
    [120, 150, 120],
    [250, 230, 140],
    [170, 200, 170],
    [250, 110, 20],
    [160, 60, 60],
    [200, 160, 100],
    [255, 255, 0],
];

/// Threshold `[K, rows, cols]` probabilities into a binary mask.
pub fn binarize(probs: &[f32], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| (p as f64 >= threshold) as u8).collect()
}

/// RGB raster (row-major, `rows x cols`) of a binary `[K, rows, cols]` mask.
pub fn render_labels(mask: &[u8], n_classes: usize, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let cells = rows * cols;
    if n_classes > 4 || mask.len() != n_classes * cells {
        return Err(Error::Invalid(format!("cannot render {} values as {n_classes} classes of {rows}x{cols}", mask.len())));
    }
    let mut rgb = Vec::with_capacity(cells * 3);
    for c in 0..cells {
        let bits = (0..n_classes).fold(0usize, |acc, k| acc | (((mask[k * cells + c] != 0) as usize) << k));
        rgb.extend_from_slice(&PALETTE[bits]);
    }
    Ok(rgb)
}

/// Inverse of [`render_labels`].
pub fn parse_labels(rgb: &[u8], n_classes: usize, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let cells = rows * cols;
    if rgb.len() != cells * 3 {
        return Err(Error::Invalid(format!("raster of {} bytes is not {rows}x{cols} RGB", rgb.len())));
    }
    let mut mask = vec![0u8; n_classes * cells];
    for (c, px) in rgb.chunks(3).enumerate() {
        let bits = PALETTE
            .iter()
            .position(|p| p == px)
            .ok_or_else(|| Error::Invalid(format!("colour {px:?} is not in the palette")))?;
        if bits >> n_classes != 0 {
            return Err(Error::Invalid(format!("colour {px:?} names a class beyond {n_classes}")));
        }
        for k in 0..n_classes {
            mask[k * cells + c] = ((bits >> k) & 1) as u8;
        }
    }
    Ok(mask)
}

/// Cells where any class of `pred` differs from `gt`.
pub fn error_mask(pred: &[u8], gt: &[u8], n_classes: usize) -> Result<Vec<bool>> {
    if pred.len() != gt.len() || n_classes == 0 || gt.len() % n_classes != 0 {
        return Err(Error::Invalid(format!("prediction of {} values vs ground truth of {}", pred.len(), gt.len())));
    }
    let cells = gt.len() / n_classes;
    Ok((0..cells)
        .map(|c| (0..n_classes).any(|k| (pred[k * cells + c] != 0) != (gt[k * cells + c] != 0)))
        .collect())
}

/// Cells the reference model gets wrong and `other` gets right.
pub fn fixed_mask(reference_err: &[bool], other_err: &[bool]) -> Vec<bool> {
    reference_err.iter().zip(other_err).map(|(&r, &o)| r && !o).collect()
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255 } else { 0 }));
    out
}

/// Reads a binary `P6` (RGB) or `P5` (grey) image: `(width, height, channels, data)`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |d: &str| Error::Format {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let data = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h * channels {
        return Err(bad("pixel data length does not match header"));
    }
    Ok((w, h, channels, data.to_vec()))
}

/// Places equally sized RGB rasters left to right with a 2-pixel white gap.
pub fn side_by_side(panels: &[Vec<u8>], width: usize, height: usize) -> (usize, Vec<u8>) {
    const GAP: usize = 2;
    let total = panels.len() * width + panels.len().saturating_sub(1) * GAP;
    let mut out = vec![255u8; total * height * 3];
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (width + GAP);
        for r in 0..height {
            let dst = (r * total + x0) * 3;
            out[dst..dst + width * 3].copy_from_slice(&p[r * width * 3..(r + 1) * width * 3]);
        }
    }
    (total, out)
}
