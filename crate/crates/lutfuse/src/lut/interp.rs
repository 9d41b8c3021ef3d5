//! Low-level trilinear lattice math shared by the LUT engine and the
//! differentiable graph ops.

use crate::tensor::Scalar;

/// Cell index and interpolation fraction along one lattice axis.
///
/// `x` is clamped to [0,1] and mapped to the continuous lattice coordinate
/// `x * (n-1)`. Fractions within one float ulp of a lattice plane are snapped
/// to exactly 0 or 1 so that sampling at a lattice coordinate reproduces the
/// stored entry bitwise.
#[inline]
pub(crate) fn axis_cell<T: Scalar>(x: T, n: usize) -> (usize, T) {
    debug_assert!(n >= 2);
    let m = (n - 1) as f64;
    let u = x.to_f64v().clamp(0.0, 1.0) * m;
    let i0 = (u.floor() as usize).min(n - 2);
    let mut t = u - i0 as f64;
    let tol = m * 1.2e-7 + 1e-12;
    if t < tol {
        t = 0.0;
    } else if t > 1.0 - tol {
        t = 1.0;
    }
    (i0, T::from_f64(t))
}

/// The 8 corner weights of a trilinear blend, ordered with the R axis
/// fastest: index bit 0 = +1 on r, bit 1 = +1 on g, bit 2 = +1 on b.
#[inline]
pub(crate) fn corner_weights<T: Scalar>(tr: T, tg: T, tb: T) -> [T; 8] {
    let (ur, ug, ub) = (T::one() - tr, T::one() - tg, T::one() - tb);
    [
        ur * ug * ub,
        tr * ug * ub,
        ur * tg * ub,
        tr * tg * ub,
        ur * ug * tb,
        tr * ug * tb,
        ur * tg * tb,
        tr * tg * tb,
    ]
}

/// Flat element offset of lattice point (i, j, k) in an `n`-sided grid with
/// 3 channels, R fastest: `((k*n + j)*n + i) * 3`.
#[inline]
pub(crate) fn lattice_offset(i: usize, j: usize, k: usize, n: usize) -> usize {
    ((k * n + j) * n + i) * 3
}

/// Precomputed sparse query plan: the set of distinct lattice corners a batch
/// of pixels touches, plus each pixel's 8 corner rows.
///
/// Used to evaluate an implicit LUT generator only at the lattice points an
/// image actually samples instead of materializing the full grid.
#[derive(Debug, Clone)]
pub struct LutQueryPlan {
    pub n: usize,
    /// Distinct (i, j, k) lattice corners in first-seen pixel order.
    pub corners: Vec<[u16; 3]>,
    /// Per pixel: rows into `corners`, R-fastest corner order.
    pub pixel_rows: Vec<[u32; 8]>,
}

impl LutQueryPlan {
    /// `pixels` is a flat (p, 3) RGB buffer.
    pub fn build(pixels: &[f32], n: usize) -> Self {
        assert!(n >= 2);
        assert_eq!(pixels.len() % 3, 0);
        let mut index = std::collections::HashMap::new();
        let mut corners: Vec<[u16; 3]> = Vec::new();
        let mut pixel_rows = Vec::with_capacity(pixels.len() / 3);
        for px in pixels.chunks_exact(3) {
            let (i0, _) = axis_cell(px[0], n);
            let (j0, _) = axis_cell(px[1], n);
            let (k0, _) = axis_cell(px[2], n);
            let mut rows = [0u32; 8];
            for (c, row) in rows.iter_mut().enumerate() {
                let i = (i0 + (c & 1)) as u16;
                let j = (j0 + ((c >> 1) & 1)) as u16;
                let k = (k0 + ((c >> 2) & 1)) as u16;
                let key = ((k as u32) << 20) | ((j as u32) << 10) | i as u32;
                let next = corners.len() as u32;
                *row = *index.entry(key).or_insert_with(|| {
                    corners.push([i as u16, j, k]);
                    next
                });
            }
            pixel_rows.push(rows);
        }
        LutQueryPlan {
            n,
            corners,
            pixel_rows,
        }
    }

    pub fn num_corners(&self) -> usize {
        self.corners.len()
    }

    /// Corner coordinates in [-1,1]³, flat (m, 3), for conditioning an
    /// implicit generator.
    pub fn coords_norm(&self) -> Vec<f32> {
        let m = (self.n - 1) as f64;
        let mut out = Vec::with_capacity(self.corners.len() * 3);
        for c in &self.corners {
            for &axis in c {
                out.push((2.0 * (axis as f64) / m - 1.0) as f32);
            }
        }
        out
    }

    /// Identity-LUT values at the plan's corners, flat (m, 3).
    pub fn identity_rows(&self) -> Vec<f32> {
        let m = (self.n - 1) as f32;
        let mut out = Vec::with_capacity(self.corners.len() * 3);
        for c in &self.corners {
            for &axis in c {
                out.push(axis as f32 / m);
            }
        }
        out
    }
}
