//! 8-bit binary PGM (P5) previews with linear scaling.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::container::PgmScaling;
use crate::error::{Error, Result};
use crate::grid::RealField;

/// Writes `img` scaled linearly from `range` (or its own min/max) onto 0..=255.
pub fn write_pgm(path: &Path, img: &RealField, range: Option<(f64, f64)>) -> Result<PgmScaling> {
    let (lo, hi) = range.unwrap_or_else(|| (img.min(), img.max()));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = img.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        if t.is_nan() {
            0
        } else {
            (t * 255.0).round() as u8
        }
    }));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(PgmScaling { min: lo, max: hi, maxval: 255 })
}

/// Reads a P5 file written by [`write_pgm`] back to raw 0..=255 levels.
pub fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
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
            return Err(Error::parse(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, format!("bad header field '{s}'")));
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(Error::parse(path, "only 8-bit P5 files are supported"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| Error::parse(path, "truncated PGM body"))?;
    Ok(Array2::from_shape_vec((h, w), body.to_vec()).expect("shape"))
}
