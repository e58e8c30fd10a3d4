//! Grid partition, random region selection, one-hot masks, and the
//! replaced/masked image composition, plus standard image preprocessing
//! (bilinear resize, horizontal flip, per-channel normalization).

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Uniform n-by-n partition of an image into grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub n: usize,
    pub cell_h: usize,
    pub cell_w: usize,
}

impl GridSpec {
    pub fn for_image(height: usize, width: usize, n: usize) -> Result<GridSpec> {
        if n < 1 || height % n != 0 || width % n != 0 || height == 0 || width == 0 {
            return Err(Error::GridMismatch { height, width, n });
        }
        Ok(GridSpec { n, cell_h: height / n, cell_w: width / n })
    }

    pub fn height(&self) -> usize {
        self.cell_h * self.n
    }

    pub fn width(&self) -> usize {
        self.cell_w * self.n
    }
}

/// A q-by-q block of grid cells chosen for substitution, addressed by its
/// top-left cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub r: usize,
    pub c: usize,
    pub q: usize,
}

/// Complementary {0,1} masks: `m_f` is 0 inside the substitution region and
/// 1 elsewhere, `m_s` the exact opposite.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub m_f: Tensor,
    pub m_s: Tensor,
}

/// One training unit: the original image plus its replaced and masked
/// variants, all sharing the original's label.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub original: Tensor,
    pub replaced: Tensor,
    pub masked: Tensor,
    pub label: usize,
    pub region: Region,
    pub donor_label: usize,
}

/// Source of donor images from categories other than the anchor's.
pub trait DonorSampler {
    /// Returns a composition-ready image whose label differs from `label`.
    fn sample_donor(&self, label: usize, rng: &mut Prng) -> Result<(Tensor, usize)>;
}

/// Draws the top-left cell of a q-by-q region uniformly over all placements.
pub fn sample_region(n: usize, q: usize, rng: &mut Prng) -> Result<Region> {
    if q < 1 || q > n {
        return Err(Error::InvalidQ { q, n });
    }
    let r = rng.random_range(0..=n - q);
    let c = rng.random_range(0..=n - q);
    Ok(Region { r, c, q })
}

pub fn build_masks(region: Region, grid: GridSpec, channels: usize) -> Result<MaskPair> {
    if region.q < 1 || region.q > grid.n {
        return Err(Error::InvalidQ { q: region.q, n: grid.n });
    }
    if region.r + region.q > grid.n || region.c + region.q > grid.n {
        return Err(Error::RegionOutOfGrid {
            row: region.r,
            col: region.c,
            q: region.q,
            n: grid.n,
        });
    }
    let (h, w) = (grid.height(), grid.width());
    let mut m_f = Tensor::full(&[h, w, channels], 1.0)?;
    let mut m_s = Tensor::zeros(&[h, w, channels]);
    let y0 = region.r * grid.cell_h;
    let y1 = (region.r + region.q) * grid.cell_h;
    let x0 = region.c * grid.cell_w;
    let x1 = (region.c + region.q) * grid.cell_w;
    for y in y0..y1 {
        for x in x0..x1 {
            for ch in 0..channels {
                m_f.set3(y, x, ch, 0.0);
                m_s.set3(y, x, ch, 1.0);
            }
        }
    }
    Ok(MaskPair { m_f, m_s })
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ImageShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// f ⊙ m_f + s ⊙ m_s: the donor patch pasted into the original.
pub fn compose_replace(f: &Tensor, s: &Tensor, masks: &MaskPair) -> Result<Tensor> {
    check_same_shape(f, s)?;
    check_same_shape(f, &masks.m_f)?;
    check_same_shape(f, &masks.m_s)?;
    let data = f
        .data()
        .iter()
        .zip(s.data())
        .zip(masks.m_f.data().iter().zip(masks.m_s.data()))
        .map(|((fv, sv), (mf, ms))| fv * mf + sv * ms)
        .collect();
    Tensor::from_vec(f.shape().to_vec(), data)
}

/// f ⊙ m_f: the region dropped to zero.
pub fn compose_mask(f: &Tensor, masks: &MaskPair) -> Result<Tensor> {
    check_same_shape(f, &masks.m_f)?;
    let data = f.data().iter().zip(masks.m_f.data()).map(|(fv, mf)| fv * mf).collect();
    Tensor::from_vec(f.shape().to_vec(), data)
}

/// Builds one (original, replaced, masked) triplet. A single region is drawn
/// and shared by both variants; the donor comes from a different category.
pub fn augment_triplet(
    f: &Tensor,
    label: usize,
    donor_sampler: &dyn DonorSampler,
    config: &RunConfig,
    rng: &mut Prng,
) -> Result<Triplet> {
    let grid = GridSpec::for_image(f.shape()[0], f.shape()[1], config.n)?;
    let channels = f.shape()[2];
    let region = sample_region(config.n, config.q, rng)?;
    let (donor, donor_label) = donor_sampler.sample_donor(label, rng)?;
    check_same_shape(f, &donor)?;
    let masks = build_masks(region, grid, channels)?;
    let replaced = compose_replace(f, &donor, &masks)?;
    let masked = compose_mask(f, &masks)?;
    Ok(Triplet { original: f.clone(), replaced, masked, label, region, donor_label })
}

/// Bilinear resize to a square target, preserving channels. Source
/// coordinates use pixel-center alignment and clamp at the border.
pub fn resize_bilinear(f: &Tensor, target_side: usize) -> Result<Tensor> {
    if f.rank() != 3 || target_side == 0 {
        return Err(Error::ImageShapeMismatch {
            expected: vec![target_side, target_side, 0],
            got: f.shape().to_vec(),
        });
    }
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if h == target_side && w == target_side {
        return Ok(f.clone());
    }
    let sy = h as f64 / target_side as f64;
    let sx = w as f64 / target_side as f64;
    let mut out = Tensor::zeros(&[target_side, target_side, c]);
    for dy in 0..target_side {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for dx in 0..target_side {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = f.at3(y0, x0, ch) * (1.0 - wx) + f.at3(y0, x1, ch) * wx;
                let bot = f.at3(y1, x0, ch) * (1.0 - wx) + f.at3(y1, x1, ch) * wx;
                out.set3(dy, dx, ch, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Ok(out)
}

pub fn hflip(f: &Tensor) -> Tensor {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set3(y, x, ch, f.at3(y, w - 1 - x, ch));
            }
        }
    }
    out
}

/// Per-channel (x - mean) / std.
pub fn normalize(f: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let c = f.shape()[2];
    if mean.len() != c || std.len() != c {
        return Err(Error::ChannelMismatch { expected: c, got: mean.len().min(std.len()) });
    }
    for (ch, s) in std.iter().enumerate() {
        if !(*s > 0.0) {
            return Err(Error::ZeroStd { channel: ch });
        }
    }
    let (h, w) = (f.shape()[0], f.shape()[1]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set3(y, x, ch, (f.at3(y, x, ch) - mean[ch]) / std[ch]);
            }
        }
    }
    Ok(out)
}

/// Resize, maybe mirror, then normalize, in that order. The flip draw is
/// consumed even when flip_prob is 0 so RNG streams stay aligned.
pub fn preprocess(
    f: &Tensor,
    target_side: usize,
    flip_prob: f64,
    mean: &[f64],
    std: &[f64],
    rng: &mut Prng,
) -> Result<Tensor> {
    let resized = resize_bilinear(f, target_side)?;
    let flipped = if rng.random::<f64>() < flip_prob { hflip(&resized) } else { resized };
    normalize(&flipped, mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use proptest::prelude::*;

    fn cfg(n: usize, q: usize) -> RunConfig {
        let mut c = RunConfig::default();
        c.n = n;
        c.q = q;
        c
    }

    struct FixedDonor {
        images: Vec<(Tensor, usize)>,
    }

    impl DonorSampler for FixedDonor {
        fn sample_donor(&self, label: usize, rng: &mut Prng) -> Result<(Tensor, usize)> {
            let others: Vec<&(Tensor, usize)> =
                self.images.iter().filter(|(_, l)| *l != label).collect();
            if others.is_empty() {
                return Err(Error::NoDonorAvailable { label });
            }
            let pick = rng.random_range(0..others.len());
            Ok(others[pick].clone())
        }
    }

    fn image(h: usize, w: usize, c: usize, fill: f64) -> Tensor {
        Tensor::full(&[h, w, c], fill).unwrap()
    }

    #[test]
    fn sample_region_rejects_bad_q() {
        let mut rng = seed_rng(&[1]);
        assert!(matches!(sample_region(7, 0, &mut rng), Err(Error::InvalidQ { .. })));
        assert!(matches!(sample_region(7, 8, &mut rng), Err(Error::InvalidQ { .. })));
    }

    #[test]
    fn sample_region_q_equals_n_is_origin() {
        let mut rng = seed_rng(&[2]);
        for _ in 0..20 {
            let r = sample_region(4, 4, &mut rng).unwrap();
            assert_eq!((r.r, r.c), (0, 0));
        }
    }

    #[test]
    fn sample_region_same_seed_same_region() {
        let a = sample_region(7, 2, &mut seed_rng(&[3])).unwrap();
        let b = sample_region(7, 2, &mut seed_rng(&[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_region_is_uniform_over_placements() {
        // n=7, q=2: 36 placements, 10,000 draws; every cell count must sit
        // within 3 sigma of the binomial expectation.
        let mut rng = seed_rng(&[4]);
        let mut counts = [[0u32; 6]; 6];
        let draws = 10_000;
        for _ in 0..draws {
            let r = sample_region(7, 2, &mut rng).unwrap();
            counts[r.r][r.c] += 1;
        }
        let p = 1.0 / 36.0;
        let expect = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for row in &counts {
            for &c in row {
                assert!(
                    (c as f64 - expect).abs() <= 3.0 * sigma,
                    "cell count {} outside {} +- {}",
                    c,
                    expect,
                    3.0 * sigma
                );
            }
        }
    }

    #[test]
    fn masks_top_left_quadrant() {
        let grid = GridSpec::for_image(4, 4, 2).unwrap();
        let masks = build_masks(Region { r: 0, c: 0, q: 1 }, grid, 1).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inside = y < 2 && x < 2;
                assert_eq!(masks.m_f.at3(y, x, 0), if inside { 0.0 } else { 1.0 });
                assert_eq!(masks.m_s.at3(y, x, 0), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn masks_full_region_is_all_substitution() {
        let grid = GridSpec::for_image(6, 6, 3).unwrap();
        let masks = build_masks(Region { r: 0, c: 0, q: 3 }, grid, 2).unwrap();
        assert!(masks.m_f.data().iter().all(|&v| v == 0.0));
        assert!(masks.m_s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn compose_replace_pastes_donor_quadrant() {
        let grid = GridSpec::for_image(4, 4, 2).unwrap();
        let masks = build_masks(Region { r: 0, c: 0, q: 1 }, grid, 1).unwrap();
        let f = image(4, 4, 1, 1.0);
        let s = image(4, 4, 1, 5.0);
        let out = compose_replace(&f, &s, &masks).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inside = y < 2 && x < 2;
                assert_eq!(out.at3(y, x, 0), if inside { 5.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn compose_mask_zeroes_quadrant() {
        let grid = GridSpec::for_image(4, 4, 2).unwrap();
        let masks = build_masks(Region { r: 0, c: 0, q: 1 }, grid, 1).unwrap();
        let f = image(4, 4, 1, 3.0);
        let out = compose_mask(&f, &masks).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inside = y < 2 && x < 2;
                assert_eq!(out.at3(y, x, 0), if inside { 0.0 } else { 3.0 });
            }
        }
    }

    #[test]
    fn compose_shape_mismatch_is_an_error() {
        let grid = GridSpec::for_image(4, 4, 2).unwrap();
        let masks = build_masks(Region { r: 0, c: 0, q: 1 }, grid, 1).unwrap();
        let f = image(4, 4, 1, 1.0);
        let s = image(4, 4, 3, 5.0);
        assert!(matches!(
            compose_replace(&f, &s, &masks),
            Err(Error::ImageShapeMismatch { .. })
        ));
    }

    #[test]
    fn triplet_keeps_label_and_shares_region() {
        let f = image(8, 8, 1, 1.0);
        let donor = FixedDonor { images: vec![(image(8, 8, 1, 9.0), 1)] };
        let mut rng = seed_rng(&[5]);
        let t = augment_triplet(&f, 0, &donor, &cfg(4, 2), &mut rng).unwrap();
        assert_eq!(t.label, 0);
        assert_ne!(t.donor_label, t.label);
        let grid = GridSpec::for_image(8, 8, 4).unwrap();
        let masks = build_masks(t.region, grid, 1).unwrap();
        for i in 0..f.numel() {
            if masks.m_f.data()[i] == 1.0 {
                assert_eq!(t.replaced.data()[i], f.data()[i]);
                assert_eq!(t.masked.data()[i], f.data()[i]);
            } else {
                assert_eq!(t.replaced.data()[i], 9.0);
                assert_eq!(t.masked.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn triplet_is_deterministic_per_seed() {
        let f = image(8, 8, 1, 2.0);
        let donor = FixedDonor {
            images: vec![(image(8, 8, 1, 7.0), 1), (image(8, 8, 1, 4.0), 2)],
        };
        let a = augment_triplet(&f, 0, &donor, &cfg(4, 1), &mut seed_rng(&[6])).unwrap();
        let b = augment_triplet(&f, 0, &donor, &cfg(4, 1), &mut seed_rng(&[6])).unwrap();
        assert_eq!(a.region, b.region);
        assert_eq!(a.donor_label, b.donor_label);
        assert_eq!(a.replaced.data(), b.replaced.data());
        assert_eq!(a.masked.data(), b.masked.data());
    }

    #[test]
    fn single_category_has_no_donor() {
        let f = image(8, 8, 1, 1.0);
        let donor = FixedDonor { images: vec![(image(8, 8, 1, 1.0), 0)] };
        let mut rng = seed_rng(&[7]);
        assert!(matches!(
            augment_triplet(&f, 0, &donor, &cfg(4, 2), &mut rng),
            Err(Error::NoDonorAvailable { label: 0 })
        ));
    }

    #[test]
    fn preprocess_flip_probabilities() {
        let mut data = vec![0.0; 4 * 4 * 1];
        data[0] = 1.0; // asymmetric marker at (0,0)
        let f = Tensor::from_vec(vec![4, 4, 1], data).unwrap();
        let mean = [0.0];
        let std = [1.0];
        for seed in 0..10 {
            let out =
                preprocess(&f, 4, 0.0, &mean, &std, &mut seed_rng(&[8, seed])).unwrap();
            assert_eq!(out.at3(0, 0, 0), 1.0, "flip_prob 0 must never mirror");
        }
        for seed in 0..10 {
            let out =
                preprocess(&f, 4, 1.0, &mean, &std, &mut seed_rng(&[9, seed])).unwrap();
            assert_eq!(out.at3(0, 3, 0), 1.0, "flip_prob 1 must always mirror");
            assert_eq!(out.at3(0, 0, 0), 0.0);
        }
    }

    #[test]
    fn hflip_reverses_columns_exactly() {
        let f = Tensor::from_vec(vec![2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = hflip(&f);
        assert_eq!(out.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn grid_cell_size_at_full_resolution() {
        let grid = GridSpec::for_image(448, 448, 7).unwrap();
        assert_eq!((grid.cell_h, grid.cell_w), (64, 64));
        assert!(GridSpec::for_image(50, 50, 7).is_err());
    }

    #[test]
    fn normalize_rejects_zero_std() {
        let f = image(2, 2, 2, 1.0);
        assert!(matches!(
            normalize(&f, &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroStd { channel: 1 })
        ));
    }

    #[test]
    fn resize_same_side_is_identity() {
        let f = Tensor::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = resize_bilinear(&f, 2).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let f = image(5, 5, 2, 0.37);
        let out = resize_bilinear(&f, 8).unwrap();
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn masks_are_complementary_binary(
            n in 1usize..6,
            seed in 0u64..500,
        ) {
            let mut rng = seed_rng(&[10, seed]);
            let q = rng.random_range(1..=n);
            let region = sample_region(n, q, &mut rng).unwrap();
            let grid = GridSpec::for_image(n * 2, n * 2, n).unwrap();
            let masks = build_masks(region, grid, 3).unwrap();
            for (a, b) in masks.m_f.data().iter().zip(masks.m_s.data()) {
                prop_assert!(*a == 0.0 || *a == 1.0);
                prop_assert!(*b == 0.0 || *b == 1.0);
                prop_assert_eq!(a + b, 1.0);
            }
            let substituted: usize =
                masks.m_s.data().iter().filter(|&&v| v == 1.0).count();
            prop_assert_eq!(substituted * n * n, masks.m_s.numel() * q * q);
        }

        #[test]
        fn composition_matches_naive_oracle(seed in 0u64..300) {
            let mut rng = seed_rng(&[11, seed]);
            let n = rng.random_range(1..=4usize);
            let q = rng.random_range(1..=n);
            let region = sample_region(n, q, &mut rng).unwrap();
            let side = n * 2;
            let grid = GridSpec::for_image(side, side, n).unwrap();
            let mk = |rng: &mut Prng| {
                let data: Vec<f64> =
                    (0..side * side * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
                Tensor::from_vec(vec![side, side, 2], data).unwrap()
            };
            let f = mk(&mut rng);
            let s = mk(&mut rng);
            let masks = build_masks(region, grid, 2).unwrap();
            let replaced = compose_replace(&f, &s, &masks).unwrap();
            let masked = compose_mask(&f, &masks).unwrap();
            for y in 0..side {
                for x in 0..side {
                    let inside_rows = y / grid.cell_h >= region.r
                        && y / grid.cell_h < region.r + q;
                    let inside_cols = x / grid.cell_w >= region.c
                        && x / grid.cell_w < region.c + q;
                    let inside = inside_rows && inside_cols;
                    for ch in 0..2 {
                        let want_r = if inside { s.at3(y, x, ch) } else { f.at3(y, x, ch) };
                        let want_m = if inside { 0.0 } else { f.at3(y, x, ch) };
                        prop_assert_eq!(replaced.at3(y, x, ch), want_r);
                        prop_assert_eq!(masked.at3(y, x, ch), want_m);
                    }
                }
            }
        }
    }
}
