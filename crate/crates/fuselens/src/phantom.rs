//! Synthetic registered CT/MR-like pairs with controlled, opposing
//! brightness semantics: a bright-in-CT/dark-in-MR skull ring around
//! parenchyma, with dark-in-CT/bright-in-MR fluid pockets and a small
//! calcification spot. Used for desk-scale evaluation where no clinical
//! data is available.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FusionError, Result};
use crate::image::{GrayImage, RegisteredPair};

/// Tissue intensities per modality. Bone is dense (bright CT) and rigid
/// (dark MR); fluid is the opposite.
const CT_RING: f64 = 0.92;
const CT_BRAIN: f64 = 0.30;
const CT_FLUID: f64 = 0.08;
const CT_CALC: f64 = 0.95;
const MR_RING: f64 = 0.08;
const MR_BRAIN: f64 = 0.55;
const MR_FLUID: f64 = 0.92;
const MR_CALC: f64 = 0.15;

/// Uniform noise half-width; small enough that background patch means stay
/// under the 0.01 background threshold.
const NOISE: f64 = 0.008;

/// A generated pair plus the region masks it was rendered from.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub pair: RegisteredPair,
    /// Skull ring pixels.
    pub ring_mask: Vec<bool>,
    /// Fluid pocket pixels.
    pub fluid_mask: Vec<bool>,
    /// Everything inside the outer skull ellipse.
    pub interior_mask: Vec<bool>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.a;
        let dy = (y - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

/// Generates one phantom pair, deterministic in `(seed, index)`.
pub fn generate_phantom(size: usize, seed: u64, index: u64) -> Result<Phantom> {
    if size < 32 {
        return Err(FusionError::Validation(format!(
            "phantom size must be at least 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;

    let jitter = |rng: &mut ChaCha8Rng, scale: f64| rng.gen_range(-scale..=scale);
    let cx = s * (0.5 + jitter(&mut rng, 0.02));
    let cy = s * (0.5 + jitter(&mut rng, 0.02));
    let outer = Ellipse {
        cx,
        cy,
        a: s * (0.36 + jitter(&mut rng, 0.02)),
        b: s * (0.42 + jitter(&mut rng, 0.02)),
    };
    let inner = Ellipse {
        cx,
        cy,
        a: outer.a * 0.86,
        b: outer.b * 0.88,
    };
    // Two mirrored ventricle-like pockets.
    let vent_dx = s * (0.09 + jitter(&mut rng, 0.015));
    let vent_dy = s * jitter(&mut rng, 0.02);
    let vent_a = s * (0.045 + jitter(&mut rng, 0.008));
    let vent_b = s * (0.12 + jitter(&mut rng, 0.015));
    let fluids = [
        Ellipse {
            cx: cx - vent_dx,
            cy: cy + vent_dy,
            a: vent_a,
            b: vent_b,
        },
        Ellipse {
            cx: cx + vent_dx,
            cy: cy + vent_dy,
            a: vent_a,
            b: vent_b,
        },
    ];
    // A small dense spot in the parenchyma.
    let calc = Ellipse {
        cx: cx + s * (0.16 + jitter(&mut rng, 0.03)),
        cy: cy - s * (0.14 + jitter(&mut rng, 0.03)),
        a: s * 0.03,
        b: s * 0.03,
    };

    let n = size * size;
    let mut ct = vec![0.0; n];
    let mut mr = vec![0.0; n];
    let mut ring_mask = vec![false; n];
    let mut fluid_mask = vec![false; n];
    let mut interior_mask = vec![false; n];

    for r in 0..size {
        for c in 0..size {
            let i = r * size + c;
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if !outer.contains(x, y) {
                continue;
            }
            interior_mask[i] = true;
            let (vc, vm) = if !inner.contains(x, y) {
                ring_mask[i] = true;
                (CT_RING, MR_RING)
            } else if fluids.iter().any(|e| e.contains(x, y)) {
                fluid_mask[i] = true;
                (CT_FLUID, MR_FLUID)
            } else if calc.contains(x, y) {
                (CT_CALC, MR_CALC)
            } else {
                (CT_BRAIN, MR_BRAIN)
            };
            ct[i] = vc;
            mr[i] = vm;
        }
    }

    // Independent mild noise per modality, over the whole frame.
    for v in ct.iter_mut() {
        *v = (*v + rng.gen_range(-NOISE..=NOISE)).clamp(0.0, 1.0);
    }
    for v in mr.iter_mut() {
        *v = (*v + rng.gen_range(-NOISE..=NOISE)).clamp(0.0, 1.0);
    }

    Ok(Phantom {
        pair: RegisteredPair::new(
            GrayImage::new(size, size, ct)?,
            GrayImage::new(size, size, mr)?,
        )?,
        ring_mask,
        fluid_mask,
        interior_mask,
    })
}

/// Mean intensity over a pixel mask.
pub fn masked_mean(img: &GrayImage, mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &keep) in img.data.iter().zip(mask) {
        if keep {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed_and_index() {
        let a = generate_phantom(64, 7, 0).unwrap();
        let b = generate_phantom(64, 7, 0).unwrap();
        assert_eq!(a.pair.ct.data, b.pair.ct.data);
        assert_eq!(a.pair.mr.data, b.pair.mr.data);
        let c = generate_phantom(64, 7, 1).unwrap();
        assert_ne!(a.pair.ct.data, c.pair.ct.data);
        let d = generate_phantom(64, 8, 0).unwrap();
        assert_ne!(a.pair.ct.data, d.pair.ct.data);
    }

    #[test]
    fn ring_contrast_is_opposed() {
        for index in 0..5 {
            let p = generate_phantom(96, 13, index).unwrap();
            assert!(p.ring_mask.iter().any(|&b| b));
            let ct_ring = masked_mean(&p.pair.ct, &p.ring_mask);
            let mr_ring = masked_mean(&p.pair.mr, &p.ring_mask);
            assert!(ct_ring > 0.8, "ct ring mean {ct_ring}");
            assert!(mr_ring < 0.2, "mr ring mean {mr_ring}");
            let ct_fluid = masked_mean(&p.pair.ct, &p.fluid_mask);
            let mr_fluid = masked_mean(&p.pair.mr, &p.fluid_mask);
            assert!(ct_fluid < 0.2, "ct fluid mean {ct_fluid}");
            assert!(mr_fluid > 0.8, "mr fluid mean {mr_fluid}");
        }
    }

    #[test]
    fn background_stays_dark() {
        let p = generate_phantom(64, 3, 2).unwrap();
        let mut bg = p.interior_mask.clone();
        for b in bg.iter_mut() {
            *b = !*b;
        }
        assert!(masked_mean(&p.pair.ct, &bg) < 0.01);
        assert!(masked_mean(&p.pair.mr, &bg) < 0.01);
    }

    #[test]
    fn rejects_tiny_sizes() {
        assert!(matches!(
            generate_phantom(16, 1, 0),
            Err(FusionError::Validation(_))
        ));
    }
}
