//! Per-op behavior tests plus finite-difference checks for every
//! differentiable op.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lut::interp::LutQueryPlan;
use crate::lut::{identity_lut, sample_trilinear, Lut3d};
use crate::tensor::{gradcheck, AdamW, Graph, ParamSet, Tensor};

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor with entries away from activation kinks.
fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v: f32 = rng.random_range(0.15..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

// ── forward behavior ────────────────────────────────────────────────

#[test]
fn conv_identity_kernel_preserves_input() {
    let mut g = Graph::new();
    let x = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], vec![1, 1, 3, 3]);
    let w = g.constant(vec![1.0], vec![1, 1, 1, 1]);
    let b = g.constant(vec![0.0], vec![1]);
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert_eq!(g.data(y), g.data(x));
}

#[test]
fn conv_box_kernel_sums_window() {
    let mut g = Graph::new();
    let c = 0.7f32;
    let x = g.constant(vec![c; 25], vec![1, 1, 5, 5]);
    let w = g.constant(vec![1.0; 9], vec![1, 1, 3, 3]);
    let b = g.constant(vec![0.0], vec![1]);
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    for &v in g.data(y) {
        assert!((v - 9.0 * c).abs() < 1e-5);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(vec![0.0; 2 * 4 * 4], vec![1, 2, 4, 4]);
    let w = g.constant(vec![0.0; 3 * 9], vec![1, 3, 3, 3]);
    let b = g.constant(vec![0.0], vec![1]);
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn conv_stride_and_padding_shapes() {
    let mut g = Graph::new();
    let x = g.constant(vec![0.0; 3 * 8 * 8], vec![1, 3, 8, 8]);
    let w = g.constant(vec![0.0; 4 * 3 * 9], vec![4, 3, 3, 3]);
    let b = g.constant(vec![0.0; 4], vec![4]);
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 4]);
}

#[test]
fn linear_identity_and_bias_rows() {
    let mut g = Graph::new();
    let x = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]);
    let eye = g.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3]);
    let zero_b = g.constant(vec![0.0; 3], vec![3]);
    let y = g.linear(x, eye, zero_b).unwrap();
    assert_eq!(g.data(y), g.data(x));

    let zero_w = g.constant(vec![0.0; 6], vec![2, 3]);
    let b = g.constant(vec![0.25, -0.5], vec![2]);
    let y2 = g.linear(x, zero_w, b).unwrap();
    assert_eq!(g.data(y2), &[0.25, -0.5, 0.25, -0.5]);

    let bad = g.constant(vec![0.0; 4], vec![2, 2]);
    assert!(g.linear(x, bad, b).is_err());
}

#[test]
fn relu_and_softmax_basics() {
    let mut g = Graph::new();
    let x = g.constant(vec![-1.0, 0.0, 2.0], vec![3]);
    let y = g.relu(x);
    assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);

    let z = g.constant(vec![0.0, 0.0, 0.0], vec![3]);
    let s = g.softmax_lastdim(z);
    for &v in g.data(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn softmax_rows_sum_to_one_for_extreme_inputs() {
    let mut g = Graph::new();
    let x = g.constant(
        vec![1e30, -1e30, 3.0, -88.0, 44.0, 0.0, 1e-20, -1e-20, 5e4],
        vec![3, 3],
    );
    let s = g.softmax_lastdim(x);
    for row in g.data(s).chunks_exact(3) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {row:?}");
        assert!(row.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn mean_and_pool_basics() {
    let mut g = Graph::new();
    let x = g.constant(vec![1.0, 2.0, 3.0], vec![3]);
    let m = g.mean_all(x);
    assert_eq!(g.value(m), 2.0);

    // adaptive pool to 1x1 equals the per-channel mean
    let img = g.constant((0..2 * 4 * 4).map(|v| v as f32).collect(), vec![1, 2, 4, 4]);
    let pooled = g.adaptive_avg_pool2d(img, 1, 1).unwrap();
    assert_eq!(g.shape(pooled), &[1, 2, 1, 1]);
    assert!((g.data(pooled)[0] - 7.5).abs() < 1e-6);
    assert!((g.data(pooled)[1] - 23.5).abs() < 1e-6);

    assert!(g.adaptive_avg_pool2d(img, 5, 1).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf_grad(vec![0.3, -0.7, 1.1, 0.0], vec![4]);
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum_is_two_x() {
    let mut g = Graph::new();
    let x = g.leaf_grad(vec![1.0, 2.0], vec![2]);
    let sq = g.mul(x, x);
    let s = g.sum_all(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf_grad(vec![1.0, 2.0], vec![2]);
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.zero_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached() {
    let mut g = Graph::new();
    let x = g.leaf_grad(vec![1.0, 2.0], vec![2]);
    assert!(matches!(
        g.backward(x),
        Err(crate::Error::NonScalarLoss { numel: 2 })
    ));
    let c = g.scalar(1.0);
    assert!(matches!(g.backward(c), Err(crate::Error::DetachedGraph)));
}

#[test]
fn forward_is_deterministic_bitwise() {
    let mut r = rng(11);
    let x = rand_tensor(vec![1, 3, 16, 16], &mut r);
    let w = rand_tensor(vec![4, 3, 3, 3], &mut r);
    let b = rand_tensor(vec![4], &mut r);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let wv = g.leaf(&w);
        let bv = g.leaf(&b);
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        let y = g.relu(y);
        let m = g.mean_all(y);
        (g.data(y).to_vec(), g.value(m))
    };
    let (a, ma) = run();
    let (b2, mb) = run();
    assert_eq!(a, b2);
    assert_eq!(ma.to_bits(), mb.to_bits());
}

// ── finite-difference checks, one per differentiable op ─────────────

#[test]
fn gradcheck_elementwise_ops() {
    let mut r = rng(1);
    let a = rand_tensor(vec![2, 3], &mut r);
    let b = rand_tensor(vec![2, 3], &mut r);
    gradcheck::assert_grads(&[a.clone(), b.clone()], H, TOL, |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let q = g.div(m, v[1]);
        let sc = g.scale(q, 1.7);
        let sh = g.add_scalar(sc, 0.3);
        g.sum_all(sh)
    });
}

#[test]
fn gradcheck_abs_away_from_zero() {
    let mut r = rng(2);
    let a = rand_tensor(vec![7], &mut r);
    gradcheck::assert_grads(&[a], H, TOL, |g, v| {
        let y = g.abs(v[0]);
        g.sum_all(y)
    });
}

#[test]
fn gradcheck_activations() {
    let mut r = rng(3);
    let a = rand_tensor(vec![3, 4], &mut r);
    gradcheck::assert_grads(&[a.clone()], H, TOL, |g, v| {
        let y = g.relu(v[0]);
        g.sum_all(y)
    });
    gradcheck::assert_grads(&[a.clone()], H, TOL, |g, v| {
        let y = g.elu(v[0], 1.0);
        g.sum_all(y)
    });
    // weighted sum makes the softmax gradient non-trivial
    let mut r2 = rng(4);
    let wt = rand_tensor(vec![3, 4], &mut r2);
    gradcheck::assert_grads(&[a], H, TOL, move |g, v| {
        let s = g.softmax_lastdim(v[0]);
        let w = g.constant_f32(wt.data(), wt.shape().to_vec());
        let p = g.mul(s, w);
        g.sum_all(p)
    });
}

#[test]
fn gradcheck_linear() {
    let mut r = rng(5);
    let x = rand_tensor(vec![4, 5], &mut r);
    let w = rand_tensor(vec![3, 5], &mut r);
    let b = rand_tensor(vec![3], &mut r);
    gradcheck::assert_grads(&[x, w, b], H, TOL, |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn gradcheck_conv2d() {
    let mut r = rng(6);
    let x = rand_tensor(vec![1, 2, 6, 6], &mut r);
    let w = rand_tensor(vec![3, 2, 3, 3], &mut r);
    let b = rand_tensor(vec![3], &mut r);
    gradcheck::assert_grads(&[x, w, b], H, TOL, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn gradcheck_pool_and_upsample() {
    let mut r = rng(7);
    let x = rand_tensor(vec![1, 2, 6, 6], &mut r);
    gradcheck::assert_grads(&[x.clone()], H, TOL, |g, v| {
        let y = g.adaptive_avg_pool2d(v[0], 2, 3).unwrap();
        let y = g.mul(y, y);
        g.sum_all(y)
    });
    gradcheck::assert_grads(&[x], H, TOL, |g, v| {
        let y = g.upsample_bilinear(v[0], 9, 11);
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn gradcheck_shape_ops() {
    let mut r = rng(8);
    let a = rand_tensor(vec![3, 4], &mut r);
    let b = rand_tensor(vec![3, 2], &mut r);
    gradcheck::assert_grads(&[a, b], H, TOL, |g, v| {
        let t = g.transpose2d(v[0]);
        let t2 = g.transpose2d(t);
        let cat = g.concat2d(t2, v[1]);
        let r = g.reshape(cat, vec![2, 9]);
        let m = g.mul(r, r);
        let ml = g.mean_lastdim(m);
        g.sum_all(ml)
    });
}

#[test]
fn gradcheck_norm_rows_and_gram() {
    let mut r = rng(9);
    let t = rand_tensor(vec![4, 6], &mut r);
    gradcheck::assert_grads(&[t], H, TOL, |g, v| {
        let nrm = g.norm_rows(v[0], 1e-12);
        let m = g.gram(nrm);
        let sq = g.mul(m, m);
        g.sum_all(sq)
    });
}

#[test]
fn gradcheck_grid_sample_trilinear() {
    let mut r = rng(10);
    let vol = rand_tensor(vec![2, 4, 4, 4], &mut r);
    let coords: Vec<f32> = (0..15).map(|_| r.random_range(-0.9..0.9)).collect();
    let coords = Arc::new(coords);
    gradcheck::assert_grads(&[vol], H, TOL, move |g, v| {
        let s = g.grid_sample_trilinear(v[0], coords.clone());
        let sq = g.mul(s, s);
        g.sum_all(sq)
    });
}

#[test]
fn gradcheck_lut_apply_grid_and_image() {
    let mut r = rng(12);
    let n = 4;
    let grid = rand_tensor(vec![n * n * n, 3], &mut r);
    // pixels strictly inside cells so the blend is smooth around them
    let img_data: Vec<f32> = (0..8 * 3)
        .map(|_| {
            let cell = r.random_range(0..n - 1) as f32;
            (cell + r.random_range(0.2..0.8)) / (n - 1) as f32
        })
        .collect();
    let img = Tensor::from_vec(vec![8, 3], img_data);
    gradcheck::assert_grads(&[grid, img], H, TOL, move |g, v| {
        let y = g.lut_apply(v[0], v[1], n);
        let sq = g.mul(y, y);
        g.sum_all(sq)
    });
}

#[test]
fn gradcheck_trilinear_rows_matches_full_grid() {
    let mut r = rng(13);
    let n = 5;
    let full = rand_tensor(vec![n * n * n, 3], &mut r);
    let img_data: Vec<f32> = (0..6 * 3)
        .map(|_| {
            let cell = r.random_range(0..n - 1) as f32;
            (cell + r.random_range(0.2..0.8)) / (n - 1) as f32
        })
        .collect();
    let plan = Arc::new(LutQueryPlan::build(&img_data, n));

    // sparse rows gathered from the full grid
    let rows_data: Vec<f32> = plan
        .corners
        .iter()
        .flat_map(|&[i, j, k]| {
            let off = crate::lut::interp::lattice_offset(i as usize, j as usize, k as usize, n);
            full.data()[off..off + 3].to_vec()
        })
        .collect();
    let rows = Tensor::from_vec(vec![plan.num_corners(), 3], rows_data);
    let img = Tensor::from_vec(vec![6, 3], img_data.clone());

    // forward equivalence with the full-grid op
    let mut g = Graph::new();
    let fv = g.constant(full.data().to_vec(), full.shape().to_vec());
    let iv = g.constant(img_data.clone(), vec![6, 3]);
    let dense = g.lut_apply(fv, iv, n);
    let rv = g.constant(rows.data().to_vec(), rows.shape().to_vec());
    let sparse = g.trilinear_rows(rv, iv, plan.clone());
    for (a, b) in g.data(dense).iter().zip(g.data(sparse)) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    gradcheck::assert_grads(&[rows, img], H, TOL, move |g, v| {
        let y = g.trilinear_rows(v[0], v[1], plan.clone());
        let sq = g.mul(y, y);
        g.sum_all(sq)
    });
}

#[test]
fn gradcheck_lut_grid_to_field_and_unfold() {
    let mut r = rng(14);
    let n = 3;
    let grid = rand_tensor(vec![n * n * n, 3], &mut r);
    gradcheck::assert_grads(&[grid], H, TOL, move |g, v| {
        let f = g.lut_grid_to_field(v[0], n);
        let sq = g.mul(f, f);
        g.sum_all(sq)
    });
    let img = rand_tensor(vec![2, 7, 7], &mut r);
    gradcheck::assert_grads(&[img], H, TOL, |g, v| {
        let p = g.unfold_patches(v[0], 3, 2).unwrap();
        let sq = g.mul(p, p);
        g.sum_all(sq)
    });
}

#[test]
fn gradcheck_indexing_ops() {
    let mut r = rng(15);
    let x = rand_tensor(vec![3], &mut r);
    let t = rand_tensor(vec![2, 4], &mut r);
    gradcheck::assert_grads(&[x, t], H, TOL, |g, v| {
        let s = g.slice_scalar(v[0], 1);
        let y = g.mul_scalar_node(v[1], s);
        let sq = g.mul(y, y);
        g.sum_all(sq)
    });
    let img4 = rand_tensor(vec![1, 3, 4, 4], &mut r);
    let rgb = rand_tensor(vec![3, 4, 4], &mut r);
    gradcheck::assert_grads(&[img4, rgb], H, TOL, |g, v| {
        let wmap = g.slice_channel(v[0], 1);
        let y = g.mul_channel_broadcast(v[1], wmap);
        let sq = g.mul(y, y);
        g.sum_all(sq)
    });
}

#[test]
fn gradcheck_random_points_all_core_ops() {
    // ten random draws through a composite net touching the main op set
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        let x = rand_tensor(vec![1, 2, 8, 8], &mut r);
        let w = rand_tensor(vec![3, 2, 3, 3], &mut r);
        let b = rand_tensor(vec![3], &mut r);
        let fw = rand_tensor(vec![2, 3], &mut r);
        let fb = rand_tensor(vec![2], &mut r);
        gradcheck::assert_grads(&[x, w, b, fw, fb], H, TOL, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            let y = g.elu(y, 1.0);
            let p = g.adaptive_avg_pool2d(y, 1, 1).unwrap();
            let flat = g.reshape(p, vec![1, 3]);
            let z = g.linear(flat, v[3], v[4]).unwrap();
            let s = g.softmax_lastdim(z);
            let sq = g.mul(s, z);
            g.sum_all(sq)
        });
    }
}

// ── conv oracle ─────────────────────────────────────────────────────

/// Plain quintuple-loop convolution, kept independent of the production
/// kernel.
fn conv_naive(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f32],
    (o, kh, kw): (usize, usize, usize),
    b: &[f32],
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + iy as usize) * w + ix as usize;
                                let wi = ((oi * c + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_reference() {
    let mut r = rng(20);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
        let x = rand_tensor(vec![2, 3, 8, 8], &mut r);
        let w = rand_tensor(vec![4, 3, 3, 3], &mut r);
        let b = rand_tensor(vec![4], &mut r);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let wv = g.leaf(&w);
        let bv = g.leaf(&b);
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        let want = conv_naive(
            x.data(),
            (2, 3, 8, 8),
            w.data(),
            (4, 3, 3),
            b.data(),
            stride,
            pad,
        );
        assert_eq!(g.data(y).len(), want.len());
        for (a, e) in g.data(y).iter().zip(&want) {
            assert!((a - e).abs() < 1e-5, "stride={stride} pad={pad}");
        }
    }
}

// ── lut ops consistency with the engine ─────────────────────────────

#[test]
fn graph_lut_apply_matches_engine_sampling() {
    let mut r = rng(21);
    let n = 6;
    let values: Vec<f32> = (0..n * n * n * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let lut = Lut3d::new(n, values.clone()).unwrap();
    let pixels: Vec<f32> = (0..64 * 3).map(|_| r.random_range(0.0..1.0)).collect();

    let mut g = Graph::new();
    let grid = g.constant(values, vec![n * n * n, 3]);
    let img = g.constant(pixels.clone(), vec![64, 3]);
    let out = g.lut_apply(grid, img, n);
    for (px, oy) in pixels.chunks_exact(3).zip(g.data(out).chunks_exact(3)) {
        let want = sample_trilinear(&lut, [px[0], px[1], px[2]]);
        for c in 0..3 {
            assert_eq!(want[c].to_bits(), oy[c].to_bits());
        }
    }
}

#[test]
fn grid_sample_is_exact_at_volume_corners() {
    let mut r = rng(22);
    let vol = rand_tensor(vec![3, 4, 4, 4], &mut r);
    let mut g = Graph::new();
    let v = g.leaf(&vol);
    let coords = Arc::new(vec![
        -1.0, -1.0, -1.0, //
        1.0, -1.0, -1.0, //
        1.0, 1.0, 1.0,
    ]);
    let s = g.grid_sample_trilinear(v, coords);
    let d = 4 * 4 * 4;
    // (r,g,b) -> (depth, height, width)
    assert_eq!(g.data(s)[0].to_bits(), vol.data()[0].to_bits());
    assert_eq!(
        g.data(s)[3].to_bits(),
        vol.data()[(3 * 4) * 4].to_bits() // depth=3, h=0, w=0
    );
    assert_eq!(
        g.data(s)[6 + 1].to_bits(),
        vol.data()[d + 63].to_bits() // channel 1, last voxel
    );
}

// ── identity LUT through graph ──────────────────────────────────────

#[test]
fn graph_identity_grid_apply_is_identity() {
    let n = 8;
    let id = identity_lut(n).unwrap();
    let mut r = rng(23);
    let pixels: Vec<f32> = (0..32 * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let mut g = Graph::new();
    let grid = g.constant(id.values().to_vec(), vec![n * n * n, 3]);
    let img = g.constant(pixels.clone(), vec![32, 3]);
    let out = g.lut_apply(grid, img, n);
    for (a, b) in pixels.iter().zip(g.data(out)) {
        assert!((a - b).abs() < 1e-6);
    }
}

// ── AdamW ───────────────────────────────────────────────────────────

#[test]
fn adamw_zero_grad_no_decay_keeps_parameter() {
    let mut ps = ParamSet::new();
    let mut t = Tensor::from_vec(vec![2], vec![0.5, -0.25]);
    t.set_requires_grad(true);
    t.accumulate_grad(&[0.0, 0.0]);
    ps.insert("p", t);
    let mut opt = AdamW::new(0.1);
    opt.step(&mut ps).unwrap();
    assert_eq!(ps.expect("p").data(), &[0.5, -0.25]);
}

#[test]
fn adamw_single_step_on_quadratic_shrinks_theta() {
    // f(theta) = theta^2 / 2, grad = theta; one step from 1.0 at lr 0.1
    let mut ps = ParamSet::new();
    let mut t = Tensor::from_vec(vec![1], vec![1.0]);
    t.set_requires_grad(true);
    t.accumulate_grad(&[1.0]);
    ps.insert("theta", t);
    let mut opt = AdamW::new(0.1);
    opt.step(&mut ps).unwrap();
    let theta = ps.expect("theta").data()[0];
    assert!(theta.abs() < 1.0, "theta={theta}");
    // scalar reference: m_hat = v_hat = 1 after bias correction
    let expect = 1.0 - 0.1 * 1.0 / (1.0f64.sqrt() + 1e-8);
    assert!((f64::from(theta) - expect).abs() < 1e-6);
}

#[test]
fn adamw_decoupled_decay_shrinks_by_factor() {
    let mut ps = ParamSet::new();
    let mut t = Tensor::from_vec(vec![1], vec![0.8]);
    t.set_requires_grad(true);
    t.accumulate_grad(&[0.0]);
    ps.insert("p", t);
    let (lr, wd) = (0.05f32, 0.5f32);
    let mut opt = AdamW::new(lr).with_weight_decay(wd);
    opt.step(&mut ps).unwrap();
    let got = ps.expect("p").data()[0];
    assert!((got - 0.8 * (1.0 - lr * wd)).abs() < 1e-7);
}

#[test]
fn adamw_missing_grad_names_parameter() {
    let mut ps = ParamSet::new();
    let mut t = Tensor::from_vec(vec![1], vec![1.0]);
    t.set_requires_grad(true);
    ps.insert("encoder/conv9/weight", t.clone());
    let mut opt = AdamW::new(0.1);
    match opt.step(&mut ps) {
        Err(crate::Error::MissingGrad { name }) => assert_eq!(name, "encoder/conv9/weight"),
        other => panic!("expected MissingGrad, got {other:?}"),
    }
}

#[test]
fn adamw_converges_on_quadratic() {
    let mut ps = ParamSet::new();
    let mut t = Tensor::from_vec(vec![1], vec![3.0]);
    t.set_requires_grad(true);
    ps.insert("theta", t);
    let mut opt = AdamW::new(0.2);
    for _ in 0..200 {
        ps.zero_grads();
        let theta = ps.expect("theta").data()[0];
        ps.get_mut("theta").unwrap().accumulate_grad(&[theta]);
        opt.step(&mut ps).unwrap();
    }
    assert!(ps.expect("theta").data()[0].abs() < 0.05);
}

// ── param binding ───────────────────────────────────────────────────

#[test]
fn bind_and_harvest_routes_gradients() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::kaiming_uniform(vec![2, 2], 2, &mut rng(30)));
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, true);
    let w = bound.var("w");
    let sq = g.mul(w, w);
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    ps.harvest(&g, &bound);
    let t = ps.expect("w");
    let grads = t.grad().unwrap();
    for (gv, dv) in grads.iter().zip(t.data()) {
        assert!((gv - 2.0 * dv).abs() < 1e-6);
    }
}

#[test]
fn frozen_bind_produces_no_gradients() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::kaiming_uniform(vec![2, 2], 2, &mut rng(31)));
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let w = bound.var("w");
    let sq = g.mul(w, w);
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    ps.harvest(&g, &bound);
    assert!(ps.expect("w").grad().is_none());
}
