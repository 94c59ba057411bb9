//! Fusion quality indices: windowed SSIM against each source, the
//! entropy-normalized mutual-information index Q_MI, the Xydeas-Petrovic
//! edge-preservation index Q_ABF, and the semantic-loss evaluation index.
//!
//! All metrics are deterministic: identical inputs give bit-identical
//! outputs.

use serde::Serialize;

use crate::error::{FusionError, Result};
use crate::image::{GrayImage, PatchSpec, RegisteredPair};
use crate::losses::semantic_loss;

/// SSIM window: 11x11 Gaussian, sigma 1.5, stride 1.
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Histogram bins for mutual information, matching 8-bit source depth.
const MI_BINS: usize = 256;

/// Xydeas-Petrovic sigmoid constants (strength, then orientation).
const QABF_GAMMA_G: f64 = 0.9994;
const QABF_KAPPA_G: f64 = -15.0;
const QABF_SIGMA_G: f64 = 0.5;
const QABF_GAMMA_A: f64 = 0.9879;
const QABF_KAPPA_A: f64 = -22.0;
const QABF_SIGMA_A: f64 = 0.8;

/// Semantic-loss evaluation parameters: window 3, stride 1.
const SL_METRIC_SPEC: (usize, usize, f64) = (3, 1, 0.01);

/// One row of the evaluation report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub q_mi: f64,
    pub q_abf: f64,
    pub ssim_ct: f64,
    pub ssim_mr: f64,
    pub sl: f64,
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

/// Valid-mode separable convolution with a symmetric 1-D kernel.
fn conv_valid(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let kw = kernel.len();
    let ow = w - kw + 1;
    let oh = h - kw + 1;
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        let out = &mut tmp[r * ow..(r + 1) * ow];
        for (t, &kv) in kernel.iter().enumerate() {
            for c in 0..ow {
                out[c] += kv * row[c + t];
            }
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        let dst = &mut out[r * ow..(r + 1) * ow];
        for (t, &kv) in kernel.iter().enumerate() {
            let srow = &tmp[(r + t) * ow..(r + t + 1) * ow];
            for c in 0..ow {
                dst[c] += kv * srow[c];
            }
        }
    }
    out
}

/// Mean local SSIM over Gaussian-weighted 11x11 windows (valid positions
/// only), with K1 = 0.01, K2 = 0.03 on a unit dynamic range.
pub fn ssim_index(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(FusionError::Dimension(
            "ssim inputs differ in shape".to_string(),
        ));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(FusionError::Dimension(format!(
            "image {}x{} smaller than the {}x{} ssim window",
            a.width, a.height, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let (w, h) = (a.width, a.height);
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);

    let n = w * h;
    let mut aa = vec![0.0; n];
    let mut bb = vec![0.0; n];
    let mut ab = vec![0.0; n];
    for i in 0..n {
        aa[i] = a.data[i] * a.data[i];
        bb[i] = b.data[i] * b.data[i];
        ab[i] = a.data[i] * b.data[i];
    }
    let mu_a = conv_valid(&a.data, w, h, &kernel);
    let mu_b = conv_valid(&b.data, w, h, &kernel);
    let m_aa = conv_valid(&aa, w, h, &kernel);
    let m_bb = conv_valid(&bb, w, h, &kernel);
    let m_ab = conv_valid(&ab, w, h, &kernel);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cab = m_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

// ---------------------------------------------------------------------------
// Q_MI
// ---------------------------------------------------------------------------

#[inline]
fn mi_bin(v: f64) -> usize {
    ((v * MI_BINS as f64) as usize).min(MI_BINS - 1)
}

fn entropy_bits(counts: &[u32], n: f64) -> f64 {
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

/// Normalized mutual information of one source with the fused image:
/// I(x; y) / (H(x) + H(y)), which is 0.5 for a perfect copy.
fn nmi_term(x: &GrayImage, y: &GrayImage) -> f64 {
    let n = x.data.len() as f64;
    let mut hx = vec![0u32; MI_BINS];
    let mut hy = vec![0u32; MI_BINS];
    let mut joint = vec![0u32; MI_BINS * MI_BINS];
    for (&a, &b) in x.data.iter().zip(&y.data) {
        let (i, j) = (mi_bin(a), mi_bin(b));
        hx[i] += 1;
        hy[j] += 1;
        joint[i * MI_BINS + j] += 1;
    }
    let ent_x = entropy_bits(&hx, n);
    if ent_x == 0.0 {
        // Constant source: define the term by continuity with the
        // perfect-copy convention.
        return if x.data == y.data { 0.5 } else { 0.0 };
    }
    let ent_y = entropy_bits(&hy, n);
    let ent_joint = entropy_bits(&joint, n);
    let mi = ent_x + ent_y - ent_joint;
    mi / (ent_x + ent_y)
}

/// Entropy-normalized information retention of the fused image: the sum of
/// per-source normalized mutual information. A perfect copy of both (equal)
/// sources scores 1.
pub fn q_mi(x: &RegisteredPair, y: &GrayImage) -> Result<f64> {
    if !x.ct.same_shape(y) {
        return Err(FusionError::Dimension(
            "q_mi inputs differ in shape".to_string(),
        ));
    }
    Ok(nmi_term(&x.ct, y) + nmi_term(&x.mr, y))
}

// ---------------------------------------------------------------------------
// Q_ABF
// ---------------------------------------------------------------------------

struct EdgeMap {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

/// 3x3 Sobel gradients with reflect padding.
fn sobel(img: &GrayImage) -> EdgeMap {
    let (w, h) = (img.width, img.height);
    let mut strength = vec![0.0; w * h];
    let mut orientation = vec![0.0; w * h];
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    for r in 0..h {
        for c in 0..w {
            let px = |dr: isize, dc: isize| {
                let rr = reflect(r as isize + dr, h);
                let cc = reflect(c as isize + dc, w);
                img.data[rr * w + cc]
            };
            let sx = (px(-1, 1) + 2.0 * px(0, 1) + px(1, 1))
                - (px(-1, -1) + 2.0 * px(0, -1) + px(1, -1));
            let sy = (px(-1, -1) + 2.0 * px(-1, 0) + px(-1, 1))
                - (px(1, -1) + 2.0 * px(1, 0) + px(1, 1));
            strength[r * w + c] = (sx * sx + sy * sy).sqrt();
            orientation[r * w + c] = if sx != 0.0 {
                (sy / sx).atan()
            } else {
                std::f64::consts::FRAC_PI_2
            };
        }
    }
    EdgeMap {
        strength,
        orientation,
    }
}

#[inline]
fn qabf_sigmoid(gamma: f64, kappa: f64, sigma: f64, v: f64) -> f64 {
    gamma / (1.0 + (kappa * (v - sigma)).exp())
}

/// Per-pixel preservation of one source's edges in the fused image.
fn edge_preservation(src: &EdgeMap, fused: &EdgeMap, i: usize) -> f64 {
    let (ga, gf) = (src.strength[i], fused.strength[i]);
    let g = if ga > gf {
        gf / ga
    } else if gf > 0.0 {
        ga / gf
    } else {
        0.0
    };
    // Fold orientation differences modulo pi: 0 and pi map to perfect
    // agreement, pi/2 to none.
    let da = (src.orientation[i] - fused.orientation[i]).abs();
    let a = (da - std::f64::consts::FRAC_PI_2).abs() / std::f64::consts::FRAC_PI_2;
    qabf_sigmoid(QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G, g)
        * qabf_sigmoid(QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A, a)
}

/// Xydeas-Petrovic edge-preservation index: per-source strength/orientation
/// preservation through sigmoids, weighted by source edge strength.
pub fn q_abf(x: &RegisteredPair, y: &GrayImage) -> Result<f64> {
    if !x.ct.same_shape(y) {
        return Err(FusionError::Dimension(
            "q_abf inputs differ in shape".to_string(),
        ));
    }
    if y.width < 3 || y.height < 3 {
        return Err(FusionError::Dimension(
            "q_abf needs sides of at least 3".to_string(),
        ));
    }
    let ect = sobel(&x.ct);
    let emr = sobel(&x.mr);
    let ef = sobel(y);

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.data.len() {
        let (w_ct, w_mr) = (ect.strength[i], emr.strength[i]);
        num += edge_preservation(&ect, &ef, i) * w_ct + edge_preservation(&emr, &ef, i) * w_mr;
        den += w_ct + w_mr;
    }
    if den == 0.0 {
        log::debug!("q_abf: no edges in either source; returning 0");
        return Ok(0.0);
    }
    Ok(num / den)
}

// ---------------------------------------------------------------------------
// SL metric and the combined report
// ---------------------------------------------------------------------------

/// Semantic-loss evaluation index at the evaluation window (3x3, stride 1,
/// background threshold 0.01).
pub fn sl_metric(x: &RegisteredPair, y: &GrayImage) -> Result<f64> {
    let (size, stride, thr) = SL_METRIC_SPEC;
    semantic_loss(x, y, &PatchSpec::new(size, stride, thr)?)
}

/// Evaluates all five indices with their default parameters.
pub fn evaluate_all(x: &RegisteredPair, y: &GrayImage) -> Result<MetricReport> {
    Ok(MetricReport {
        q_mi: q_mi(x, y)?,
        q_abf: q_abf(x, y)?,
        ssim_ct: ssim_index(&x.ct, y)?,
        ssim_mr: ssim_index(&x.mr, y)?,
        sl: sl_metric(x, y)?,
    })
}
