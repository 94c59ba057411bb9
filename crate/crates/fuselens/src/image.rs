//! Grayscale image representation, PGM/PNG I/O, luminance conversion, and
//! patch statistics shared by the losses, metrics, and fusion modules.
//!
//! Images are value objects: `f64` intensities in `[0, 1]`, row-major. All
//! functions here are pure and safe to call from multiple threads.

use std::fs;
use std::path::Path;

use crate::error::{FusionError, Result};

/// A 2-D grid of intensities normalized to `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    /// Builds an image after validating the `[0, 1]` range and buffer length.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(FusionError::Dimension(format!(
                "buffer length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FusionError::Validation(
                "intensity outside [0, 1]".to_string(),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    /// Constant-intensity image.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Two same-shape images of the same anatomy, aligned pixel-for-pixel.
#[derive(Debug, Clone)]
pub struct RegisteredPair {
    pub ct: GrayImage,
    pub mr: GrayImage,
}

impl RegisteredPair {
    pub fn new(ct: GrayImage, mr: GrayImage) -> Result<Self> {
        if !ct.same_shape(&mr) {
            return Err(FusionError::Dimension(format!(
                "ct is {}x{} but mr is {}x{}",
                ct.width, ct.height, mr.width, mr.height
            )));
        }
        Ok(RegisteredPair { ct, mr })
    }

    pub fn width(&self) -> usize {
        self.ct.width
    }

    pub fn height(&self) -> usize {
        self.ct.height
    }
}

/// Square-patch enumeration parameters: side length, stride, and the
/// intensity below which a patch counts as background in both modalities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub background_threshold: f64,
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize, background_threshold: f64) -> Result<Self> {
        if size < 1 || stride < 1 {
            return Err(FusionError::Validation(
                "patch size and stride must be at least 1".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&background_threshold) {
            return Err(FusionError::Validation(
                "background threshold must lie in [0, 1]".to_string(),
            ));
        }
        Ok(PatchSpec {
            size,
            stride,
            background_threshold,
        })
    }

    /// Patch-grid dimensions `(rows, cols)` for an image of the given size.
    /// Patches overhanging the boundary are not emitted.
    pub fn grid_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        if self.size > width || self.size > height {
            return Err(FusionError::Dimension(format!(
                "patch size {} exceeds image {}x{}",
                self.size, width, height
            )));
        }
        let rows = (height - self.size) / self.stride + 1;
        let cols = (width - self.size) / self.stride + 1;
        Ok((rows, cols))
    }
}

/// Per-patch mean intensities on the patch grid induced by a [`PatchSpec`].
#[derive(Debug, Clone)]
pub struct PatchMeanGrid {
    pub rows: usize,
    pub cols: usize,
    pub means: Vec<f64>,
    /// Background flags. [`patch_means`] leaves this all-false; masking is a
    /// pair-level decision made by [`pair_background_mask`].
    pub background_mask: Vec<bool>,
}

impl PatchMeanGrid {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// BT.601 luma of an RGB triple with channels in `[0, 1]`.
///
/// The integer-scaled form keeps the coefficient sum exactly 1, so white
/// maps to exactly 1.0.
#[inline]
pub fn to_luma(r: f64, g: f64, b: f64) -> f64 {
    ((299.0 * r + 587.0 * g + 114.0 * b) / 1000.0).clamp(0.0, 1.0)
}

/// Mean intensity of every patch on the grid, via per-row running sums.
///
/// Agrees with direct per-patch summation to well below 1e-12.
pub fn patch_means(img: &GrayImage, spec: &PatchSpec) -> Result<PatchMeanGrid> {
    let (rows, cols) = spec.grid_dims(img.width, img.height)?;
    let w = img.width;
    let size = spec.size;
    let stride = spec.stride;

    // prefix[r * (w + 1) + c] = sum of row r pixels [0, c)
    let mut prefix = vec![0.0f64; img.height * (w + 1)];
    for r in 0..img.height {
        let row = &img.data[r * w..(r + 1) * w];
        let pre = &mut prefix[r * (w + 1)..(r + 1) * (w + 1)];
        let mut acc = 0.0;
        for (c, &v) in row.iter().enumerate() {
            acc += v;
            pre[c + 1] = acc;
        }
    }

    let inv_area = 1.0 / (size * size) as f64;
    let mut means = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        let top = pr * stride;
        for pc in 0..cols {
            let left = pc * stride;
            let mut sum = 0.0;
            for r in top..top + size {
                let pre = &prefix[r * (w + 1)..(r + 1) * (w + 1)];
                sum += pre[left + size] - pre[left];
            }
            means.push(sum * inv_area);
        }
    }

    Ok(PatchMeanGrid {
        rows,
        cols,
        background_mask: vec![false; means.len()],
        means,
    })
}

/// Pair-level background mask: patch `i` is background iff
/// `max(ct_mean_i, mr_mean_i)` falls below the threshold.
pub fn pair_background_mask(
    ct: &PatchMeanGrid,
    mr: &PatchMeanGrid,
    threshold: f64,
) -> Result<Vec<bool>> {
    if ct.rows != mr.rows || ct.cols != mr.cols {
        return Err(FusionError::Dimension(
            "patch grids have different dimensions".to_string(),
        ));
    }
    Ok(ct
        .means
        .iter()
        .zip(&mr.means)
        .map(|(&a, &b)| a.max(b) < threshold)
        .collect())
}

/// Loads an 8-bit grayscale or RGB PGM/PNG file into `[0, 1]` intensities.
/// RGB inputs are converted through [`to_luma`].
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let input_err = |reason: String| FusionError::Input {
        path: path.to_path_buf(),
        reason,
    };
    match extension_of(path) {
        Some(ext) if ext == "pgm" => load_pgm(path),
        Some(ext) if ext == "png" => {
            let dynimg = image::open(path).map_err(|e| input_err(e.to_string()))?;
            let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
            let data = match dynimg {
                image::DynamicImage::ImageLuma8(img) => {
                    img.into_raw().iter().map(|&v| v as f64 / 255.0).collect()
                }
                image::DynamicImage::ImageLumaA8(img) => img
                    .pixels()
                    .map(|p| p.0[0] as f64 / 255.0)
                    .collect(),
                image::DynamicImage::ImageRgb8(img) => img
                    .pixels()
                    .map(|p| {
                        to_luma(
                            p.0[0] as f64 / 255.0,
                            p.0[1] as f64 / 255.0,
                            p.0[2] as f64 / 255.0,
                        )
                    })
                    .collect(),
                image::DynamicImage::ImageRgba8(img) => img
                    .pixels()
                    .map(|p| {
                        to_luma(
                            p.0[0] as f64 / 255.0,
                            p.0[1] as f64 / 255.0,
                            p.0[2] as f64 / 255.0,
                        )
                    })
                    .collect(),
                _ => {
                    return Err(input_err(
                        "unsupported bit depth (only 8-bit grayscale/RGB)".to_string(),
                    ))
                }
            };
            GrayImage::new(w, h, data)
        }
        _ => Err(input_err("unsupported format (expected .pgm or .png)".to_string())),
    }
}

/// Writes an image as binary PGM (P5) or 8-bit grayscale PNG, chosen by
/// extension. Intensities are quantized with round-half-up.
pub fn save_image(img: &GrayImage, path: &Path) -> Result<()> {
    let output_err = |reason: String| FusionError::Output {
        path: path.to_path_buf(),
        reason,
    };
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    match extension_of(path) {
        Some(ext) if ext == "pgm" => {
            let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&bytes);
            fs::write(path, out).map_err(|e| output_err(e.to_string()))
        }
        Some(ext) if ext == "png" => image::save_buffer_with_format(
            path,
            &bytes,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|e| output_err(e.to_string())),
        _ => Err(output_err(
            "unsupported extension (expected .pgm or .png)".to_string(),
        )),
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    // f64::round is round-half-away-from-zero; for v >= 0 that is half-up.
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn extension_of(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn load_pgm(path: &Path) -> Result<GrayImage> {
    let input_err = |reason: String| FusionError::Input {
        path: path.to_path_buf(),
        reason,
    };
    let raw = fs::read(path).map_err(|e| input_err(e.to_string()))?;
    if raw.len() < 2 || &raw[0..2] != b"P5" {
        return Err(input_err("not a binary PGM (missing P5 magic)".to_string()));
    }

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed through the end of the line.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < raw.len() {
            match raw[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(input_err("malformed PGM header".to_string()));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| input_err("malformed PGM header".to_string()))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(input_err(format!(
            "unsupported bit depth (maxval {maxval}, expected <= 255)"
        )));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(input_err("malformed PGM header".to_string()));
    }
    pos += 1;

    let expected = width * height;
    if raw.len() - pos < expected {
        return Err(input_err(format!(
            "truncated pixel data ({} of {} bytes)",
            raw.len() - pos,
            expected
        )));
    }
    let data = raw[pos..pos + expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    GrayImage::new(width, height, data)
}
