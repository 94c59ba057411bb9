//! Fused-image producers: pixel-space variational optimization of the
//! composite loss, plus averaging and Laplacian-pyramid baselines.

use crate::error::{FusionError, Result};
use crate::image::{GrayImage, PatchSpec, RegisteredPair};
use crate::losses::{composite_loss_with_grad, LossReport, LossWeights};

/// Starting point for the variational optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Average,
    Ct,
    Mr,
}

/// Optimizer and patch parameters for [`fuse_variational`].
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub weights: LossWeights,
    pub sl_spec: PatchSpec,
    pub mef_spec: PatchSpec,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            weights: LossWeights::default(),
            sl_spec: PatchSpec {
                size: 5,
                stride: 3,
                background_threshold: 0.01,
            },
            mef_spec: PatchSpec {
                size: 7,
                stride: 1,
                background_threshold: 0.0,
            },
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 300,
            tol: 1e-6,
            init: InitMode::Average,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(FusionError::Validation(
                "learning rate must be positive".to_string(),
            ));
        }
        if self.max_iters < 1 {
            return Err(FusionError::Validation(
                "max_iters must be at least 1".to_string(),
            ));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(FusionError::Validation(
                "moment decay rates must lie in (0, 1)".to_string(),
            ));
        }
        Ok(())
    }
}

/// A fused image together with the per-iteration loss trace.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub fused: GrayImage,
    /// One report per optimizer step, evaluated after the step.
    pub loss_trace: Vec<LossReport>,
    pub iterations_run: usize,
    pub converged: bool,
}

/// Pixelwise average of the two modalities.
pub fn fuse_average(x: &RegisteredPair) -> GrayImage {
    let data = x
        .ct
        .data
        .iter()
        .zip(&x.mr.data)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    GrayImage {
        width: x.width(),
        height: x.height(),
        data,
    }
}

// ---------------------------------------------------------------------------
// Laplacian pyramid baseline
// ---------------------------------------------------------------------------

/// 5-tap binomial kernel 1-4-6-4-1 over 16.
const PYR_KERNEL: [f64; 5] = [
    1.0 / 16.0,
    4.0 / 16.0,
    6.0 / 16.0,
    4.0 / 16.0,
    1.0 / 16.0,
];

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

#[inline]
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    // Fold until inside; tiny coarse planes may need more than one bounce.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable blur with reflect padding. `gain` scales the kernel (2 for the
/// expand step so zero-stuffed signals keep their amplitude).
fn blur(p: &Plane, gain: f64) -> Plane {
    let (w, h) = (p.w, p.h);
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        let row = &p.data[r * w..(r + 1) * w];
        for c in 0..w {
            let mut s = 0.0;
            for (t, &kv) in PYR_KERNEL.iter().enumerate() {
                s += kv * row[reflect(c as isize + t as isize - 2, w)];
            }
            tmp[r * w + c] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (t, &kv) in PYR_KERNEL.iter().enumerate() {
                s += kv * tmp[reflect(r as isize + t as isize - 2, h) * w + c];
            }
            out[r * w + c] = s * gain;
        }
    }
    Plane { w, h, data: out }
}

/// Blur and keep every other sample; output sides are ceil(n/2).
fn reduce(p: &Plane) -> Plane {
    let blurred = blur(p, 1.0);
    let (ow, oh) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let mut data = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            data[r * ow + c] = blurred.data[(2 * r) * p.w + 2 * c];
        }
    }
    Plane {
        w: ow,
        h: oh,
        data,
    }
}

/// Zero-stuff to the target size and blur. Stuffing leaves one sample in
/// four, so the kernel gain is 4 (2 per axis) to preserve amplitude.
fn expand(p: &Plane, tw: usize, th: usize) -> Plane {
    let mut stuffed = Plane {
        w: tw,
        h: th,
        data: vec![0.0; tw * th],
    };
    for r in 0..p.h {
        if 2 * r >= th {
            break;
        }
        for c in 0..p.w {
            if 2 * c >= tw {
                break;
            }
            stuffed.data[(2 * r) * tw + 2 * c] = p.data[r * p.w + c];
        }
    }
    blur(&stuffed, 4.0)
}

struct Pyramid {
    /// Band-pass planes, finest first.
    laplacian: Vec<Plane>,
    coarse: Plane,
}

fn build_pyramid(img: &GrayImage, levels: usize) -> Pyramid {
    let mut cur = Plane {
        w: img.width,
        h: img.height,
        data: img.data.clone(),
    };
    let mut laplacian = Vec::with_capacity(levels);
    for _ in 0..levels {
        let next = reduce(&cur);
        let up = expand(&next, cur.w, cur.h);
        let band: Vec<f64> = cur.data.iter().zip(&up.data).map(|(a, b)| a - b).collect();
        laplacian.push(Plane {
            w: cur.w,
            h: cur.h,
            data: band,
        });
        cur = next;
    }
    Pyramid {
        laplacian,
        coarse: cur,
    }
}

/// Pyramid fusion: band-pass levels by max-absolute-coefficient selection
/// (ties toward ct), the coarsest level by averaging.
pub fn fuse_laplacian(x: &RegisteredPair, levels: usize) -> Result<GrayImage> {
    if levels < 1 {
        return Err(FusionError::Validation(
            "pyramid needs at least one level".to_string(),
        ));
    }
    let min_side = x.width().min(x.height());
    if min_side < (1usize << levels) {
        return Err(FusionError::Dimension(format!(
            "image sides {}x{} too small for {levels} pyramid levels",
            x.width(),
            x.height()
        )));
    }
    let pct = build_pyramid(&x.ct, levels);
    let pmr = build_pyramid(&x.mr, levels);

    let mut cur = Plane {
        w: pct.coarse.w,
        h: pct.coarse.h,
        data: pct
            .coarse
            .data
            .iter()
            .zip(&pmr.coarse.data)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    };
    for (lct, lmr) in pct.laplacian.iter().zip(&pmr.laplacian).rev() {
        let up = expand(&cur, lct.w, lct.h);
        let data = lct
            .data
            .iter()
            .zip(&lmr.data)
            .zip(&up.data)
            .map(|((&a, &b), &u)| if a.abs() >= b.abs() { a + u } else { b + u })
            .collect();
        cur = Plane {
            w: lct.w,
            h: lct.h,
            data,
        };
    }

    let data = cur.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(GrayImage {
        width: cur.w,
        height: cur.h,
        data,
    })
}

// ---------------------------------------------------------------------------
// Variational fuser
// ---------------------------------------------------------------------------

/// Minimizes `alpha*SL + beta*MEF_SSIM` directly over the fused image's
/// pixels with moment-based gradient descent, projecting onto `[0, 1]` after
/// every step. Stops when the composite loss changes by less than `tol`
/// between consecutive iterations, or at `max_iters`.
pub fn fuse_variational(x: &RegisteredPair, cfg: &OptimConfig) -> Result<FusionResult> {
    cfg.validate()?;
    let mut y = match cfg.init {
        InitMode::Average => fuse_average(x),
        InitMode::Ct => x.ct.clone(),
        InitMode::Mr => x.mr.clone(),
    };

    let eval = |y: &GrayImage, iteration: usize| -> Result<(LossReport, crate::losses::GradientField)> {
        let (report, grad) =
            composite_loss_with_grad(x, y, &cfg.weights, &cfg.sl_spec, &cfg.mef_spec, None)?;
        if !report.composite.is_finite() {
            return Err(FusionError::Divergence {
                iteration,
                reason: format!("composite loss is {}", report.composite),
            });
        }
        if !grad.is_finite() {
            return Err(FusionError::Divergence {
                iteration,
                reason: "non-finite gradient entry".to_string(),
            });
        }
        Ok((report, grad))
    };

    let n = y.data.len();
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let (mut report_cur, mut grad_cur) = eval(&y, 0)?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;
    for t in 1..=cfg.max_iters {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..n {
            let g = grad_cur.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            y.data[i] = (y.data[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps))
                .clamp(0.0, 1.0);
        }

        let (report_new, grad_new) = eval(&y, t)?;
        trace.push(report_new);
        iterations_run = t;
        if (report_new.composite - report_cur.composite).abs() < cfg.tol {
            converged = true;
            break;
        }
        report_cur = report_new;
        grad_cur = grad_new;
    }

    Ok(FusionResult {
        fused: y,
        loss_trace: trace,
        iterations_run,
        converged,
    })
}
