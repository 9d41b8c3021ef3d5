//! 3D color lookup tables: trilinear sampling, full-image application,
//! weighted fusion, statistics, and `.cube` file I/O.

pub mod cube;
pub(crate) mod interp;

pub use interp::LutQueryPlan;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use interp::{axis_cell, corner_weights, lattice_offset};

/// N×N×N×3 color grid. Lattice axes are (R, G, B); storage is R-fastest:
/// element (i, j, k) channel c sits at `((k*n + j)*n + i)*3 + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut3d {
    n: usize,
    values: Vec<f32>,
}

impl Lut3d {
    pub fn new(n: usize, values: Vec<f32>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "LUT resolution must be at least 2, got {n}"
            )));
        }
        if values.len() != n * n * n * 3 {
            return Err(Error::shape(
                "Lut3d::new",
                format!("{} values for n={n}", n * n * n * 3),
                values.len(),
            ));
        }
        Ok(Lut3d { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        let o = lattice_offset(i, j, k, self.n);
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    /// Copy with every entry clamped to [0,1] (display-ready).
    pub fn clamped(&self) -> Lut3d {
        Lut3d {
            n: self.n,
            values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn is_display_ready(&self) -> bool {
        self.values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// Neutral grid: entry (i, j, k) equals (i, j, k) / (n-1).
pub fn identity_lut(n: usize) -> Result<Lut3d> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "LUT resolution must be at least 2, got {n}"
        )));
    }
    let m = (n - 1) as f32;
    let mut values = Vec::with_capacity(n * n * n * 3);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                values.push(i as f32 / m);
                values.push(j as f32 / m);
                values.push(k as f32 / m);
            }
        }
    }
    Ok(Lut3d { n, values })
}

/// 8-corner trilinear blend at an RGB coordinate; inputs outside [0,1] are
/// clamped first. Sampling exactly at a lattice point returns the stored
/// entry bitwise.
pub fn sample_trilinear(lut: &Lut3d, rgb: [f32; 3]) -> [f32; 3] {
    let n = lut.n;
    let (i0, tr) = axis_cell(rgb[0], n);
    let (j0, tg) = axis_cell(rgb[1], n);
    let (k0, tb) = axis_cell(rgb[2], n);
    let ws = corner_weights(tr, tg, tb);
    let mut out = [0.0f32; 3];
    for (cix, &wt) in ws.iter().enumerate() {
        let off = lattice_offset(i0 + (cix & 1), j0 + ((cix >> 1) & 1), k0 + ((cix >> 2) & 1), n);
        for (o, ch) in out.iter_mut().zip(0..3) {
            *o += wt * lut.values[off + ch];
        }
    }
    out
}

/// Applies the LUT to every pixel, clamping the result to [0,1].
///
/// Rows are processed in parallel bands with disjoint output, so the result
/// is bitwise identical for any worker count.
pub fn apply(lut: &Lut3d, image: &ImageRgb) -> ImageRgb {
    let mut out = vec![0.0f32; image.pixels().len()];
    apply_into(lut, image, &mut out);
    ImageRgb::new(image.height(), image.width(), out)
}

/// Allocation-free core of [`apply`]: writes into a caller-provided buffer.
pub fn apply_into(lut: &Lut3d, image: &ImageRgb, out: &mut [f32]) {
    assert_eq!(out.len(), image.pixels().len(), "output buffer size");
    let w = image.width();
    out.par_chunks_mut(w * 3)
        .zip(image.pixels().par_chunks(w * 3))
        .for_each(|(orow, irow)| {
            for (opx, ipx) in orow.chunks_exact_mut(3).zip(irow.chunks_exact(3)) {
                let s = sample_trilinear(lut, [ipx[0], ipx[1], ipx[2]]);
                opx[0] = s[0].clamp(0.0, 1.0);
                opx[1] = s[1].clamp(0.0, 1.0);
                opx[2] = s[2].clamp(0.0, 1.0);
            }
        });
}

/// Elementwise weighted sum of same-resolution grids.
pub fn fuse_weighted(luts: &[Lut3d], weights: &FusionWeights) -> Result<Lut3d> {
    if luts.is_empty() || luts.len() != weights.w.len() {
        return Err(Error::shape(
            "fuse_weighted",
            format!("{} weights", luts.len()),
            weights.w.len(),
        ));
    }
    let n = luts[0].n;
    for l in luts {
        if l.n != n {
            return Err(Error::shape("fuse_weighted", format!("grid size {n}"), l.n));
        }
    }
    let mut values = vec![0.0f32; n * n * n * 3];
    for (lut, &w) in luts.iter().zip(&weights.w) {
        for (acc, &v) in values.iter_mut().zip(&lut.values) {
            *acc += w * v;
        }
    }
    Ok(Lut3d { n, values })
}

/// Weights for blending a set of basis grids. Unconstrained: the fusion is
/// affine, not convex.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub w: Vec<f32>,
}

impl FusionWeights {
    pub fn new(w: Vec<f32>) -> Self {
        assert!(w.iter().all(|v| v.is_finite()), "weights must be finite");
        FusionWeights { w }
    }
}

/// Exact moments and a 64-bin histogram over the observed value range.
#[derive(Debug, Clone)]
pub struct LutStats {
    pub mean: f64,
    pub variance: f64,
    pub min: f32,
    pub max: f32,
    pub histogram: [u64; 64],
}

pub fn lut_stats(lut: &Lut3d) -> LutStats {
    let vals = &lut.values;
    let count = vals.len() as f64;
    let mean = vals.iter().map(|&v| f64::from(v)).sum::<f64>() / count;
    let variance = vals
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / count;
    let min = vals.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut histogram = [0u64; 64];
    let range = f64::from(max) - f64::from(min);
    for &v in vals {
        let bin = if range <= 0.0 {
            0
        } else {
            (((f64::from(v) - f64::from(min)) / range) * 64.0).min(63.0) as usize
        };
        histogram[bin] += 1;
    }
    LutStats {
        mean,
        variance,
        min,
        max,
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker_image(h: usize, w: usize) -> ImageRgb {
        let mut px = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                px.push((x as f32 / w as f32).fract());
                px.push((y as f32 / h as f32).fract());
                px.push(((x * 7 + y * 3) % 11) as f32 / 10.0);
            }
        }
        ImageRgb::new(h, w, px)
    }

    #[test]
    fn identity_corners_at_n2() {
        let lut = identity_lut(2).unwrap();
        assert_eq!(lut.get(0, 0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(lut.get(1, 0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(lut.get(0, 1, 1), [0.0, 1.0, 1.0]);
        assert_eq!(lut.get(1, 1, 1), [1.0, 1.0, 1.0]);
        assert!(identity_lut(1).is_err());
    }

    #[test]
    fn identity_sampling_returns_input() {
        for n in [2usize, 5, 33] {
            let lut = identity_lut(n).unwrap();
            for rgb in [[0.0, 0.0, 0.0], [0.31, 0.62, 0.93], [1.0, 0.5, 0.25]] {
                let s = sample_trilinear(&lut, rgb);
                for c in 0..3 {
                    assert!((s[c] - rgb[c]).abs() < 1e-6, "n={n} rgb={rgb:?} got {s:?}");
                }
            }
        }
    }

    #[test]
    fn lattice_samples_are_bitwise_exact() {
        // pseudo-random grid values
        let n = 6;
        let values: Vec<f32> = (0..n * n * n * 3)
            .map(|i| ((i * 2654435761usize) % 1000) as f32 / 999.0)
            .collect();
        let lut = Lut3d::new(n, values).unwrap();
        let m = (n - 1) as f32;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let rgb = [i as f32 / m, j as f32 / m, k as f32 / m];
                    let s = sample_trilinear(&lut, rgb);
                    let stored = lut.get(i, j, k);
                    assert_eq!(s[0].to_bits(), stored[0].to_bits());
                    assert_eq!(s[1].to_bits(), stored[1].to_bits());
                    assert_eq!(s[2].to_bits(), stored[2].to_bits());
                }
            }
        }
    }

    #[test]
    fn midpoint_is_arithmetic_mean() {
        let n = 4;
        let mut lut = identity_lut(n).unwrap();
        // perturb two R-neighbors on the j=k=0 row
        let o0 = 0;
        let o1 = 3;
        lut.values_mut()[o0] = 0.2;
        lut.values_mut()[o1] = 0.8;
        let mid_r = 0.5 / 3.0;
        let s = sample_trilinear(&lut, [mid_r, 0.0, 0.0]);
        assert!((s[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn random_samples_match_bruteforce_blend() {
        // independent f64 reference blending explicit corner weights
        let n = 9;
        let values: Vec<f32> = (0..n * n * n * 3)
            .map(|i| (((i * 1103515245 + 12345) >> 3) % 1000) as f32 / 999.0)
            .collect();
        let lut = Lut3d::new(n, values).unwrap();
        let mut state = 0x243F6A88u64;
        let mut rand01 = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / f64::from(u32::MAX)
        };
        for _ in 0..500 {
            let rgb = [rand01() as f32, rand01() as f32, rand01() as f32];
            let got = sample_trilinear(&lut, rgb);
            let mut want = [0.0f64; 3];
            let m = (n - 1) as f64;
            let u = [
                f64::from(rgb[0]) * m,
                f64::from(rgb[1]) * m,
                f64::from(rgb[2]) * m,
            ];
            let base: Vec<usize> = u.iter().map(|&x| (x.floor() as usize).min(n - 2)).collect();
            let frac: Vec<f64> = u.iter().zip(&base).map(|(&x, &b)| x - b as f64).collect();
            for di in 0..2 {
                for dj in 0..2 {
                    for dk in 0..2 {
                        let wt = (if di == 0 { 1.0 - frac[0] } else { frac[0] })
                            * (if dj == 0 { 1.0 - frac[1] } else { frac[1] })
                            * (if dk == 0 { 1.0 - frac[2] } else { frac[2] });
                        let v = lut.get(base[0] + di, base[1] + dj, base[2] + dk);
                        for c in 0..3 {
                            want[c] += wt * f64::from(v[c]);
                        }
                    }
                }
            }
            for c in 0..3 {
                assert!(
                    (f64::from(got[c]) - want[c]).abs() < 1e-6,
                    "rgb={rgb:?} ch{c}: {} vs {}",
                    got[c],
                    want[c]
                );
            }
        }
    }

    #[test]
    fn apply_identity_preserves_image() {
        let img = checker_image(12, 17);
        for n in [2usize, 8, 33, 64] {
            let out = apply(&identity_lut(n).unwrap(), &img);
            for (a, b) in img.pixels().iter().zip(out.pixels()) {
                assert!((a - b).abs() < 1e-6, "n={n}");
            }
        }
    }

    #[test]
    fn apply_constant_lut_yields_constant_image() {
        let lut = Lut3d::new(4, vec![0.5; 4 * 4 * 4 * 3]).unwrap();
        let out = apply(&lut, &checker_image(7, 9));
        assert!(out.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn apply_is_thread_count_invariant() {
        let img = checker_image(33, 41);
        let lut = identity_lut(17).unwrap();
        let multi = apply(&lut, &img);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let single = pool.install(|| apply(&lut, &img));
        assert_eq!(multi.pixels(), single.pixels());
    }

    #[test]
    fn fuse_selects_first_lut_with_unit_weight() {
        let a = identity_lut(4).unwrap();
        let b = Lut3d::new(4, vec![0.25; 4 * 4 * 4 * 3]).unwrap();
        let c = Lut3d::new(4, vec![0.75; 4 * 4 * 4 * 3]).unwrap();
        let fused = fuse_weighted(
            &[a.clone(), b, c],
            &FusionWeights::new(vec![1.0, 0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(fused.values(), a.values());
    }

    #[test]
    fn fuse_of_identical_luts_with_unit_sum_is_identity_map() {
        let a = identity_lut(5).unwrap();
        let fused = fuse_weighted(
            &[a.clone(), a.clone(), a.clone()],
            &FusionWeights::new(vec![0.2, 0.3, 0.5]),
        )
        .unwrap();
        for (x, y) in fused.values().iter().zip(a.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_two_luts_evenly_is_elementwise_mean() {
        let a = Lut3d::new(3, vec![0.2; 3 * 3 * 3 * 3]).unwrap();
        let b = Lut3d::new(3, vec![0.6; 3 * 3 * 3 * 3]).unwrap();
        let fused = fuse_weighted(&[a, b], &FusionWeights::new(vec![0.5, 0.5])).unwrap();
        assert!(fused.values().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn fuse_rejects_mismatches() {
        let a = identity_lut(4).unwrap();
        let b = identity_lut(5).unwrap();
        assert!(fuse_weighted(&[a.clone(), b], &FusionWeights::new(vec![0.5, 0.5])).is_err());
        assert!(fuse_weighted(&[a], &FusionWeights::new(vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn stats_constant_lut() {
        let lut = Lut3d::new(4, vec![0.3; 4 * 4 * 4 * 3]).unwrap();
        let s = lut_stats(&lut);
        assert!((s.mean - 0.3).abs() < 1e-7);
        assert!(s.variance.abs() < 1e-12);
        assert_eq!(s.histogram[0], (4 * 4 * 4 * 3) as u64);
    }

    #[test]
    fn stats_identity_mean_is_half() {
        for n in [2usize, 8, 33] {
            let s = lut_stats(&identity_lut(n).unwrap());
            assert!((s.mean - 0.5).abs() < 1e-7, "n={n}");
        }
    }

    #[test]
    fn stats_two_point_distribution_variance() {
        // half the entries 0, half 1 -> variance 0.25
        let n = 2;
        let mut values = vec![0.0f32; n * n * n * 3];
        for (i, v) in values.iter_mut().enumerate() {
            if i % 2 == 1 {
                *v = 1.0;
            }
        }
        let s = lut_stats(&Lut3d::new(n, values).unwrap());
        assert!((s.mean - 0.5).abs() < 1e-9);
        assert!((s.variance - 0.25).abs() < 1e-9);
    }

    #[test]
    fn monotone_blending_property() {
        // A <= B elementwise implies sample(A, x) <= sample(B, x)
        let n = 5;
        let a_vals: Vec<f32> = (0..n * n * n * 3)
            .map(|i| ((i * 33427) % 500) as f32 / 1000.0)
            .collect();
        let b_vals: Vec<f32> = a_vals
            .iter()
            .enumerate()
            .map(|(i, &v)| v + ((i * 7919) % 500) as f32 / 1000.0)
            .collect();
        let a = Lut3d::new(n, a_vals).unwrap();
        let b = Lut3d::new(n, b_vals).unwrap();
        let mut state = 0x9E3779B9u64;
        let mut rand01 = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 40) as f32) / 16777216.0
        };
        for _ in 0..2000 {
            let rgb = [rand01(), rand01(), rand01()];
            let sa = sample_trilinear(&a, rgb);
            let sb = sample_trilinear(&b, rgb);
            for c in 0..3 {
                assert!(sa[c] <= sb[c], "rgb={rgb:?} ch{c}: {} > {}", sa[c], sb[c]);
            }
        }
    }

    #[test]
    fn fuse_weighted_is_linear_in_weights() {
        let n = 4;
        let luts: Vec<Lut3d> = (0..3)
            .map(|s| {
                let vals = (0..n * n * n * 3)
                    .map(|i| (((i + s * 97) * 2654435761usize) % 1000) as f32 / 999.0)
                    .collect();
                Lut3d::new(n, vals).unwrap()
            })
            .collect();
        let w1 = [0.3f32, -0.2, 0.9];
        let w2 = [0.1f32, 0.5, -0.4];
        let (a, b) = (0.7f32, -1.3f32);
        let combined: Vec<f32> = w1.iter().zip(&w2).map(|(&x, &y)| a * x + b * y).collect();
        let lhs = fuse_weighted(&luts, &FusionWeights::new(combined)).unwrap();
        let f1 = fuse_weighted(&luts, &FusionWeights::new(w1.to_vec())).unwrap();
        let f2 = fuse_weighted(&luts, &FusionWeights::new(w2.to_vec())).unwrap();
        for ((&l, &x), &y) in lhs.values().iter().zip(f1.values()).zip(f2.values()) {
            assert!((l - (a * x + b * y)).abs() < 1e-5);
        }
    }
}
