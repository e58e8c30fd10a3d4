//! Synthetic ultra-fine-grained leaf dataset. Every category renders the same
//! template (filled ellipse, midrib, six secondary veins); categories differ
//! only by small per-vein angle offsets, so the discriminative signal lives in
//! tiny local patches. All arithmetic is plain IEEE f64 with fixed-coefficient
//! trig polynomials, so the same spec yields bit-identical images everywhere.

use crate::error::{Error, Result};
use crate::rng::{seed_rng, Prng, TAG_SYNTH};
use crate::tensor::Tensor;
use rand::Rng;

use super::Dataset;

const ELLIPSE_A: f64 = 0.38;
const ELLIPSE_B: f64 = 0.24;
const MIDRIB_X0: f64 = 0.14;
const MIDRIB_X1: f64 = 0.86;
const MIDRIB_HALF_WIDTH: f64 = 0.016;
const VEIN_HALF_WIDTH: f64 = 0.012;
const VEIN_LEN: f64 = 0.50;
const VEIN_ATTACH_XS: [f64; 3] = [0.30, 0.46, 0.62];
const VEIN_BASE_DEG: f64 = 48.0;

const BACKGROUND: [f64; 3] = [0.20, 0.34, 0.16];
const BODY: [f64; 3] = [0.30, 0.52, 0.24];
const VEIN: [f64; 3] = [0.66, 0.86, 0.52];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub k: usize,
    pub m: usize,
    pub side: usize,
    pub class_delta: f64,
    pub noise: f64,
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            k: 20,
            m: 6,
            side: 56,
            class_delta: 0.4,
            noise: 0.02,
            max_rotation_deg: 5.0,
            max_translation_px: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSynthSpec(msg));
        if self.k < 2 {
            return fail(format!("k = {} (need >= 2 categories)", self.k));
        }
        if self.m < 2 {
            return fail(format!("m = {} (need >= 2 samples per category)", self.m));
        }
        if self.side < 8 {
            return fail(format!("side = {} (need >= 8)", self.side));
        }
        for (name, v) in [
            ("class_delta", self.class_delta),
            ("noise", self.noise),
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_translation_px", self.max_translation_px),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{} = {} (need finite and >= 0)", name, v));
            }
        }
        Ok(())
    }
}

/// sin via range reduction plus a fixed-coefficient odd polynomial, accurate
/// to ~1e-9. Avoids libm so results match across platforms bit for bit.
pub fn det_sin(x: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let two_pi = 2.0 * PI;
    let mut r = x - (x / two_pi).floor() * two_pi;
    if r > PI {
        r -= two_pi;
    }
    let r = if r > FRAC_PI_2 {
        PI - r
    } else if r < -FRAC_PI_2 {
        -PI - r
    } else {
        r
    };
    let x2 = r * r;
    let p = 1.0
        + x2 * (-1.0 / 6.0
            + x2 * (1.0 / 120.0
                + x2 * (-1.0 / 5040.0
                    + x2 * (1.0 / 362_880.0
                        + x2 * (-1.0 / 39_916_800.0
                            + x2 * (1.0 / 6_227_020_800.0
                                + x2 * (-1.0 / 1_307_674_368_000.0)))))));
    r * p
}

pub fn det_cos(x: f64) -> f64 {
    det_sin(x + std::f64::consts::FRAC_PI_2)
}

fn uniform_pm(rng: &mut Prng, half_range: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * half_range
}

/// Squared distance from point p to segment a..b, all in unit coordinates.
fn seg_dist2(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let dx = bx - ax;
    let dy = by - ay;
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let qx = ax + t * dx;
    let qy = ay + t * dy;
    (px - qx) * (px - qx) + (py - qy) * (py - qy)
}

/// Vein segments for one category: up and down veins at each attach point,
/// with the category's angle offsets applied.
fn vein_segments(offsets: &[f64; 6]) -> [(f64, f64, f64, f64); 6] {
    let base = VEIN_BASE_DEG.to_radians();
    let mut segs = [(0.0, 0.0, 0.0, 0.0); 6];
    for (j, &ax) in VEIN_ATTACH_XS.iter().enumerate() {
        for (s, sign) in [(0usize, -1.0), (1usize, 1.0)] {
            let idx = j * 2 + s;
            let phi = sign * base + offsets[idx];
            let bx = ax + VEIN_LEN * det_cos(phi);
            let by = 0.5 + VEIN_LEN * det_sin(phi);
            segs[idx] = (ax, 0.5, bx, by);
        }
    }
    segs
}

fn render(
    side: usize,
    segs: &[(f64, f64, f64, f64); 6],
    rot: f64,
    tx_px: f64,
    ty_px: f64,
) -> Vec<f64> {
    let inv = 1.0 / side as f64;
    let cos_r = det_cos(-rot);
    let sin_r = det_sin(-rot);
    let midrib_w2 = MIDRIB_HALF_WIDTH * MIDRIB_HALF_WIDTH;
    let vein_w2 = VEIN_HALF_WIDTH * VEIN_HALF_WIDTH;
    let mut data = Vec::with_capacity(side * side * 3);
    for py in 0..side {
        for px in 0..side {
            let sx = (px as f64 + 0.5) * inv - 0.5 - tx_px * inv;
            let sy = (py as f64 + 0.5) * inv - 0.5 - ty_px * inv;
            let ux = cos_r * sx - sin_r * sy + 0.5;
            let uy = sin_r * sx + cos_r * sy + 0.5;
            let ex = (ux - 0.5) / ELLIPSE_A;
            let ey = (uy - 0.5) / ELLIPSE_B;
            let mut color = BACKGROUND;
            if ex * ex + ey * ey <= 1.0 {
                color = BODY;
                let on_midrib =
                    seg_dist2(ux, uy, MIDRIB_X0, 0.5, MIDRIB_X1, 0.5) <= midrib_w2;
                let on_vein = segs
                    .iter()
                    .any(|&(ax, ay, bx, by)| seg_dist2(ux, uy, ax, ay, bx, by) <= vein_w2);
                if on_midrib || on_vein {
                    color = VEIN;
                }
            }
            data.extend_from_slice(&color);
        }
    }
    data
}

/// Generates k categories of m images each. Per-category vein-angle offsets
/// are drawn once; each sample then gets its own rotation, translation, and
/// pixel noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.k * spec.m);
    for c in 0..spec.k {
        let mut cat_rng = seed_rng(&[spec.seed, TAG_SYNTH, 1, c as u64]);
        let mut offsets = [0.0f64; 6];
        for slot in offsets.iter_mut() {
            *slot = uniform_pm(&mut cat_rng, spec.class_delta);
        }
        let segs = vein_segments(&offsets);
        for i in 0..spec.m {
            let mut rng = seed_rng(&[spec.seed, TAG_SYNTH, 2, (c * spec.m + i) as u64]);
            let rot = uniform_pm(&mut rng, spec.max_rotation_deg).to_radians();
            let tx = uniform_pm(&mut rng, spec.max_translation_px);
            let ty = uniform_pm(&mut rng, spec.max_translation_px);
            let mut data = render(spec.side, &segs, rot, tx, ty);
            if spec.noise > 0.0 {
                for p in 0..spec.side * spec.side {
                    let n = uniform_pm(&mut rng, spec.noise);
                    for ch in 0..3 {
                        let v = &mut data[p * 3 + ch];
                        *v = (*v + n).clamp(0.0, 1.0);
                    }
                }
            }
            let image = Tensor::from_vec(vec![spec.side, spec.side, 3], data)?;
            samples.push((image, c));
        }
    }
    let names = (0..spec.k).map(|c| format!("cat{:03}", c)).collect();
    Dataset::new(samples, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec { k: 4, m: 4, side: 32, ..SynthSpec::default() }
    }

    #[test]
    fn det_sin_matches_libm_closely() {
        let mut worst = 0.0f64;
        for i in -200..=200 {
            let x = i as f64 * 0.05;
            worst = worst.max((det_sin(x) - x.sin()).abs());
            worst = worst.max((det_cos(x) - x.cos()).abs());
        }
        assert!(worst < 1e-10, "worst {}", worst);
        assert_eq!(det_sin(0.0), 0.0);
        assert!((det_cos(0.0) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ia, la), (ib, lb)) in a.samples().iter().zip(b.samples()) {
            assert_eq!(la, lb);
            assert_eq!(ia.data(), ib.data());
        }
    }

    #[test]
    fn degenerate_spec_renders_identical_images() {
        let spec = SynthSpec {
            class_delta: 0.0,
            noise: 0.0,
            max_rotation_deg: 0.0,
            max_translation_px: 0.0,
            ..small_spec()
        };
        let set = generate_synthetic(&spec).unwrap();
        let first = set.samples()[0].0.data();
        for (img, _) in set.samples() {
            assert_eq!(img.data(), first);
        }
    }

    #[test]
    fn categories_differ_when_delta_positive() {
        let spec = SynthSpec {
            noise: 0.0,
            max_rotation_deg: 0.0,
            max_translation_px: 0.0,
            ..small_spec()
        };
        let set = generate_synthetic(&spec).unwrap();
        let m = spec.m;
        let cat0 = set.samples()[0].0.data();
        let cat1 = set.samples()[m].0.data();
        assert_ne!(cat0, cat1);
        assert_eq!(set.samples()[1].0.data(), cat0);
    }

    #[test]
    fn pixels_stay_in_unit_range_and_labels_count_right() {
        let set = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(set.len(), 16);
        assert_eq!(set.category_count(), 4);
        let mut counts = vec![0usize; 4];
        for (img, label) in set.samples() {
            counts[*label] += 1;
            assert_eq!(img.shape(), &[32, 32, 3]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn intra_category_distance_below_inter() {
        let set = generate_synthetic(&SynthSpec::default()).unwrap();
        let l2 = |a: &Tensor, b: &Tensor| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let samples = set.samples();
        let (mut intra, mut ni) = (0.0, 0usize);
        let (mut inter, mut nx) = (0.0, 0usize);
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let d = l2(&samples[i].0, &samples[j].0);
                if samples[i].1 == samples[j].1 {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    nx += 1;
                }
            }
        }
        let mean_intra = intra / ni as f64;
        let mean_inter = inter / nx as f64;
        assert!(mean_intra < mean_inter, "intra {} vs inter {}", mean_intra, mean_inter);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SynthSpec { k: 1, ..SynthSpec::default() },
            SynthSpec { m: 1, ..SynthSpec::default() },
            SynthSpec { side: 4, ..SynthSpec::default() },
            SynthSpec { noise: -0.1, ..SynthSpec::default() },
            SynthSpec { class_delta: f64::NAN, ..SynthSpec::default() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidSynthSpec(_))));
        }
    }
}
