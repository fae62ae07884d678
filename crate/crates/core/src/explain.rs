//! Class activation maps and heat-map overlays.
//!
//! With a 1×1 convolution head the class map is itself the activation map,
//! so no extra forward pass is needed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classes::IconClass;
use crate::error::{Error, Result};
use crate::model::{pad_to_square, resize_taps, Prediction};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub record_id: String,
    pub icon_class: IconClass,
    pub raw_h: usize,
    pub raw_w: usize,
    /// Row-major class map at feature resolution.
    pub raw_map: Vec<f64>,
    pub size: usize,
    /// Row-major `size × size` map in [0,1].
    pub upsampled: Vec<f64>,
    /// `(x, y)` of the maximum of `upsampled`.
    pub peak_location: (usize, usize),
}

/// Bilinear resampling of a row-major `h × w` grid to `out_h × out_w`
/// with half-pixel centers.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Min-max rescaling to [0,1]; a constant map becomes all 0.5.
fn normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 || !(hi - lo).is_finite() {
        values.iter_mut().for_each(|v| *v = 0.5);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
}

pub fn compute_cam(pred: &Prediction, class: IconClass) -> Result<CamMap> {
    let raw = pred
        .class_maps
        .get(class.index())
        .filter(|m| m.len() == pred.map_h * pred.map_w && !m.is_empty())
        .ok_or_else(|| Error::UnknownClass(class.code().to_string()))?;
    let size = pred.input_size;
    let mut upsampled = upsample_bilinear(raw, pred.map_h, pred.map_w, size, size);
    normalize(&mut upsampled);
    let mut best = 0;
    for (i, &v) in upsampled.iter().enumerate() {
        if v > upsampled[best] {
            best = i;
        }
    }
    Ok(CamMap {
        record_id: pred.record_id.clone(),
        icon_class: class,
        raw_h: pred.map_h,
        raw_w: pred.map_w,
        raw_map: raw.clone(),
        size,
        upsampled,
        peak_location: (best % size, best / size),
    })
}

/// Same as [`compute_cam`] with the class given as a code or name.
pub fn compute_cam_by_code(pred: &Prediction, class: &str) -> Result<CamMap> {
    let c = IconClass::parse(class).ok_or_else(|| Error::UnknownClass(class.to_string()))?;
    compute_cam(pred, c)
}

/// Piecewise-linear blue → cyan → yellow → red ramp.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 255.0]),
        (1.0 / 3.0, [0.0, 255.0, 255.0]),
        (2.0 / 3.0, [255.0, 255.0, 0.0]),
        (1.0, [255.0, 0.0, 0.0]),
    ];
    let i = stops.iter().rposition(|s| s.0 <= v).unwrap_or(0).min(2);
    let (a, b) = (stops[i], stops[i + 1]);
    let t = (v - a.0) / (b.0 - a.0);
    [0, 1, 2].map(|c| (a.1[c] + (b.1[c] - a.1[c]) * t).round() as u8)
}

/// Blends the heat-colored CAM over the image padded to a square with
/// `fill`. The output has the padded image's dimensions.
pub fn render_overlay(image: &RgbImage, cam: &CamMap, alpha: f64, fill: [u8; 3]) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0,1]")));
    }
    let padded = pad_to_square(image, fill);
    let side = padded.width() as usize;
    let heat = upsample_bilinear(&cam.upsampled, cam.size, cam.size, side, side);
    Ok(RgbImage::from_fn(padded.width(), padded.height(), |x, y| {
        let p = padded.get_pixel(x, y);
        let h = colormap(heat[y as usize * side + x as usize]);
        Rgb([0, 1, 2].map(|c| (f64::from(p[c]) * (1.0 - alpha) + f64::from(h[c]) * alpha).round() as u8))
    }))
}

/// Header line of the plain-text matrix format.
pub const MATRIX_HEADER: &str = "# iconoforge-matrix v1";

/// Writes a row-major matrix as text: the header line, a `rows cols` line,
/// then one whitespace-separated row per line in shortest round-trip form.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), rows * cols);
    let mut s = format!("{MATRIX_HEADER}\n{rows} {cols}\n");
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::InvalidArgument(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(MATRIX_HEADER) {
        return Err(bad("missing matrix header"));
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad("missing dimensions"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad dimension")))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(bad("expected two dimensions"));
    };
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|t| t.parse().map_err(|_| bad("bad value")))
        .collect::<Result<_>>()?;
    if values.len() != rows * cols {
        return Err(bad("value count does not match dimensions"));
    }
    Ok((rows, cols, values))
}

/// Whether the CAM peak falls inside `bbox` (`[x, y, w, h]` in input
/// coordinates), counting a pixel as inside when its center is.
pub fn peak_in_box(cam: &CamMap, bbox: [f64; 4]) -> bool {
    let (x, y) = (cam.peak_location.0 as f64 + 0.5, cam.peak_location.1 as f64 + 0.5);
    x >= bbox[0] && x <= bbox[0] + bbox[2] && y >= bbox[1] && y <= bbox[1] + bbox[3]
}
