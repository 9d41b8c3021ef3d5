//! Dynamic tape: eagerly evaluated forward ops, reverse-mode backward.

use std::sync::Arc;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lut::interp::{axis_cell, corner_weights, lattice_offset, LutQueryPlan};
use crate::tensor::conv;
use crate::tensor::Tensor;

/// Scalar element type the graph can run at: f32 for production forward
/// passes, f64 for widened-precision gradient oracles.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f32(v: f32) -> Self;
    fn to_f64v(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64v(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn to_f64v(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// The default production graph runs in f32.
pub type Graph = GraphT<f32>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Elu(Var, T),
    SoftmaxLastDim(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    AdaptiveAvgPool2d(Var),
    UpsampleBilinear(Var),
    Reshape(Var),
    Transpose2d(Var),
    Concat2d(Var, Var),
    MeanAll(Var),
    SumAll(Var),
    MeanLastDim(Var),
    NormRows { x: Var, eps: T },
    Gram(Var),
    GridSampleTrilinear { vol: Var, coords: Arc<Vec<f32>> },
    LutApply { grid: Var, img: Var, n: usize },
    TrilinearRows { rows: Var, img: Var, plan: Arc<LutQueryPlan> },
    LutGridToField { grid: Var, n: usize },
    UnfoldPatches { img: Var, patch: usize, stride: usize },
    SliceScalar { x: Var, idx: usize },
    MulScalarNode { x: Var, s: Var },
    SliceChannel { x: Var, ch: usize },
    MulChannelBroadcast { img: Var, w: Var },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// A single forward pass recorded as a tape of eagerly evaluated nodes.
#[derive(Debug)]
pub struct GraphT<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for GraphT<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GraphT<T> {
    pub fn new() -> Self {
        GraphT { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Var(id)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push(t.shape().to_vec(), data, Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Var {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn constant_f32(&mut self, data: &[f32], shape: Vec<usize>) -> Var {
        let data = data.iter().map(|&v| T::from_f32(v)).collect();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(vec![v], vec![])
    }

    /// Leaf that tracks gradients regardless of any backing tensor.
    pub fn leaf_grad(&mut self, data: Vec<T>, shape: Vec<usize>) -> Var {
        self.push(shape, data, Op::Leaf, true)
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Scalar value of a single-element node.
    pub fn value(&self, v: Var) -> T {
        assert_eq!(self.numel(v), 1, "value() requires a scalar node");
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn needs2(&self, a: Var, b: Var) -> bool {
        self.needs(a) || self.needs(b)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shapes {:?} and {:?} differ",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs2(a, b);
        self.push(shape, data, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs2(a, b);
        self.push(shape, data, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs2(a, b);
        self.push(shape, data, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x / y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs2(a, b);
        self.push(shape, data, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::AddScalar(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::Abs(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|v| v.max(T::zero())).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::Relu(x), ng)
    }

    pub fn elu(&mut self, x: Var, alpha: T) -> Var {
        let data = self.nodes[x.0].data
            .iter()
            .map(|&v| if v > T::zero() { v } else { alpha * (v.exp() - T::one()) })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::Elu(x, alpha), ng)
    }

    /// Softmax along the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let l = *shape.last().expect("softmax needs at least one dim");
        assert!(l >= 1);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); src.len()];
        for (row_out, row_in) in data.chunks_exact_mut(l).zip(src.chunks_exact(l)) {
            let max = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = 0.0f64;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum += e.to_f64v();
            }
            let inv = T::from_f64(1.0 / sum);
            for o in row_out.iter_mut() {
                *o = *o * inv;
            }
        }
        let ng = self.needs(x);
        self.push(shape, data, Op::SoftmaxLastDim(x), ng)
    }

    // ── dense / conv layers ─────────────────────────────────────────

    /// x: (B, F) times w: (G, F) transposed, plus bias (G) -> (B, G).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let bs = &self.nodes[b.0].shape;
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != &[ws[0]] {
            return Err(Error::shape(
                "linear",
                "x (B,F), w (G,F), b (G)",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (bt, f, g) = (xs[0], xs[1], ws[0]);
        let mut data = vec![T::zero(); bt * g];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            data.par_chunks_mut(g)
                .zip(xd.par_chunks(f))
                .for_each(|(out_row, x_row)| {
                    for (j, o) in out_row.iter_mut().enumerate() {
                        let wr = &wd[j * f..(j + 1) * f];
                        let mut acc = bd[j];
                        for (&xv, &wv) in x_row.iter().zip(wr) {
                            acc = acc + xv * wv;
                        }
                        *o = acc;
                    }
                });
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![bt, g], data, Op::Linear { x, w, b }, ng))
    }

    /// x: (N, C, H, W), w: (O, C, kh, kw), b: (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                "x rank 4, w rank 4, b rank 1",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        if xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} and bias {}", ws[1], ws[0]),
                format!("input channels {} and bias {}", xs[1], bs[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("spatial dims at least {}x{}", ws[2], ws[3]),
                format!("{}x{} with pad {pad}", xs[2], xs[3]),
            ));
        }
        let out = conv::forward(
            &self.nodes[x.0].data,
            &xs,
            &self.nodes[w.0].data,
            &ws,
            &self.nodes[b.0].data,
            stride,
            pad,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out.1, out.0, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// x: (N, C, H, W) -> (N, C, oh, ow) by box averaging.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        assert_eq!(xs.len(), 4, "adaptive_avg_pool2d needs rank-4 input");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if oh > h || ow > w || oh == 0 || ow == 0 {
            return Err(Error::shape(
                "adaptive_avg_pool2d",
                format!("target within {h}x{w}"),
                format!("{oh}x{ow}"),
            ));
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
            for i in 0..oh {
                let (r0, r1) = pool_span(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = pool_span(j, w, ow);
                    let mut acc = 0.0f64;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            acc += plane[r * w + cc].to_f64v();
                        }
                    }
                    dst[i * ow + j] = T::from_f64(acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], data, Op::AdaptiveAvgPool2d(x), ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.adaptive_avg_pool2d(x, 1, 1)
    }

    /// Half-pixel bilinear resize of a rank-4 tensor to (oh, ow).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        assert_eq!(xs.len(), 4, "upsample_bilinear needs rank-4 input");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(oh >= 1 && ow >= 1);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
            for i in 0..oh {
                let (y0, y1, ty) = resize_span::<T>(i, h, oh);
                for j in 0..ow {
                    let (x0, x1, tx) = resize_span::<T>(j, w, ow);
                    let top = plane[y0 * w + x0] + tx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                    let bot = plane[y1 * w + x0] + tx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                    dst[i * ow + j] = top + ty * (bot - top);
                }
            }
        }
        let ng = self.needs(x);
        self.push(vec![n, c, oh, ow], data, Op::UpsampleBilinear(x), ng)
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.nodes[x.0].data.len(), "reshape numel mismatch");
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::Reshape(x), ng)
    }

    pub fn transpose2d(&mut self, x: Var) -> Var {
        let xs = &self.nodes[x.0].shape;
        assert_eq!(xs.len(), 2, "transpose2d needs rank-2 input");
        let (r, c) = (xs[0], xs[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(vec![c, r], data, Op::Transpose2d(x), ng)
    }

    /// Concatenates two rank-2 tensors along dim 1.
    pub fn concat2d(&mut self, a: Var, b: Var) -> Var {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat2d shape mismatch");
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); r * (ca + cb)];
        for i in 0..r {
            data[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs2(a, b);
        self.push(vec![r, ca + cb], data, Op::Concat2d(a, b), ng)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn mean_all(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].data;
        let sum: f64 = src.iter().map(|v| v.to_f64v()).sum();
        let v = T::from_f64(sum / src.len() as f64);
        let ng = self.needs(x);
        self.push(vec![], vec![v], Op::MeanAll(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].data;
        let sum: f64 = src.iter().map(|v| v.to_f64v()).sum();
        let ng = self.needs(x);
        self.push(vec![], vec![T::from_f64(sum)], Op::SumAll(x), ng)
    }

    /// (..., L) -> (..., 1) means along the last dimension.
    pub fn mean_lastdim(&mut self, x: Var) -> Var {
        let mut shape = self.nodes[x.0].shape.clone();
        let l = *shape.last().expect("mean_lastdim needs at least one dim");
        *shape.last_mut().unwrap() = 1;
        let src = &self.nodes[x.0].data;
        let data: Vec<T> = src
            .chunks_exact(l)
            .map(|row| T::from_f64(row.iter().map(|v| v.to_f64v()).sum::<f64>() / l as f64))
            .collect();
        let ng = self.needs(x);
        self.push(shape, data, Op::MeanLastDim(x), ng)
    }

    // ── rows / token ops ────────────────────────────────────────────

    /// Row-wise L2 normalization of a (R, C) tensor with an epsilon guard.
    pub fn norm_rows(&mut self, x: Var, eps: T) -> Var {
        let xs = &self.nodes[x.0].shape;
        assert_eq!(xs.len(), 2, "norm_rows needs rank-2 input");
        let c = xs[1];
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); src.len()];
        for (out, row) in data.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
            let norm = row_norm(row, eps);
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let shape = xs.clone();
        let ng = self.needs(x);
        self.push(shape, data, Op::NormRows { x, eps }, ng)
    }

    /// Gram matrix T·Tᵀ of a (R, C) tensor -> (R, R). Bitwise symmetric.
    pub fn gram(&mut self, x: Var) -> Var {
        let xs = &self.nodes[x.0].shape;
        assert_eq!(xs.len(), 2, "gram needs rank-2 input");
        let (r, c) = (xs[0], xs[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); r * r];
        for i in 0..r {
            for j in i..r {
                let mut acc = T::zero();
                for k in 0..c {
                    acc = acc + src[i * c + k] * src[j * c + k];
                }
                data[i * r + j] = acc;
                data[j * r + i] = acc;
            }
        }
        let ng = self.needs(x);
        self.push(vec![r, r], data, Op::Gram(x), ng)
    }

    // ── sampling ops ────────────────────────────────────────────────

    /// Samples a (C, D, H, W) volume at `m` fixed coordinates in [-1,1]³
    /// (R->D, G->H, B->W axes, corners aligned) -> (m, C).
    pub fn grid_sample_trilinear(&mut self, vol: Var, coords: Arc<Vec<f32>>) -> Var {
        let vs = self.nodes[vol.0].shape.clone();
        assert_eq!(vs.len(), 4, "grid_sample_trilinear needs a rank-4 volume");
        assert_eq!(coords.len() % 3, 0);
        let (c, d, h, w) = (vs[0], vs[1], vs[2], vs[3]);
        let m = coords.len() / 3;
        let vol_data = &self.nodes[vol.0].data;
        let mut data = vec![T::zero(); m * c];
        data.par_chunks_mut(c)
            .zip(coords.par_chunks(3))
            .for_each(|(out, co)| {
                let (i0, tr) = axis_cell(T::from_f32(0.5 * (co[0] + 1.0)), d);
                let (j0, tg) = axis_cell(T::from_f32(0.5 * (co[1] + 1.0)), h);
                let (k0, tb) = axis_cell(T::from_f32(0.5 * (co[2] + 1.0)), w);
                let ws = corner_weights(tr, tg, tb);
                for (ch, o) in out.iter_mut().enumerate() {
                    let slab = &vol_data[ch * d * h * w..(ch + 1) * d * h * w];
                    let mut acc = T::zero();
                    for (cix, &wt) in ws.iter().enumerate() {
                        let di = i0 + (cix & 1);
                        let dj = j0 + ((cix >> 1) & 1);
                        let dk = k0 + ((cix >> 2) & 1);
                        acc = acc + wt * slab[(di * h + dj) * w + dk];
                    }
                    *o = acc;
                }
            });
        let ng = self.needs(vol);
        self.push(vec![m, c], data, Op::GridSampleTrilinear { vol, coords }, ng)
    }

    /// Trilinear application of a full (n³, 3) grid to a (p, 3) pixel batch.
    /// Differentiable with respect to both the grid and the pixels.
    pub fn lut_apply(&mut self, grid: Var, img: Var, n: usize) -> Var {
        let gs = &self.nodes[grid.0].shape;
        let is = &self.nodes[img.0].shape;
        assert_eq!(gs, &[n * n * n, 3], "lut_apply grid shape");
        assert_eq!(is.len(), 2, "lut_apply image must be (p, 3)");
        assert_eq!(is[1], 3);
        let p = is[0];
        let grid_data = &self.nodes[grid.0].data;
        let img_data = &self.nodes[img.0].data;
        let mut data = vec![T::zero(); p * 3];
        data.par_chunks_mut(3)
            .zip(img_data.par_chunks(3))
            .for_each(|(out, px)| {
                sample_grid_into(grid_data, n, px, out);
            });
        let ng = self.needs2(grid, img);
        self.push(vec![p, 3], data, Op::LutApply { grid, img, n }, ng)
    }

    /// Sparse variant of [`Self::lut_apply`]: corner values come as (m, 3)
    /// rows gathered per the plan instead of a full grid.
    pub fn trilinear_rows(&mut self, rows: Var, img: Var, plan: Arc<LutQueryPlan>) -> Var {
        let rs = &self.nodes[rows.0].shape;
        let is = &self.nodes[img.0].shape;
        assert_eq!(rs, &[plan.num_corners(), 3], "trilinear_rows rows shape");
        assert_eq!(is.len(), 2);
        assert_eq!(is[1], 3);
        let p = is[0];
        assert_eq!(plan.pixel_rows.len(), p, "plan covers a different pixel count");
        let n = plan.n;
        let rows_data = &self.nodes[rows.0].data;
        let img_data = &self.nodes[img.0].data;
        let mut data = vec![T::zero(); p * 3];
        data.par_chunks_mut(3)
            .zip(img_data.par_chunks(3))
            .zip(plan.pixel_rows.par_iter())
            .for_each(|((out, px), rws)| {
                let (_, tr) = axis_cell(px[0], n);
                let (_, tg) = axis_cell(px[1], n);
                let (_, tb) = axis_cell(px[2], n);
                let ws = corner_weights(tr, tg, tb);
                for ch in 0..3 {
                    let mut acc = T::zero();
                    for (cix, &wt) in ws.iter().enumerate() {
                        acc = acc + wt * rows_data[rws[cix] as usize * 3 + ch];
                    }
                    out[ch] = acc;
                }
            });
        let ng = self.needs2(rows, img);
        self.push(vec![p, 3], data, Op::TrilinearRows { rows, img, plan }, ng)
    }

    /// Reinterprets an (n³, 3) grid as a (3n, n, n) field: channel = b-axis
    /// index * 3 + color, spatial = (g, r).
    pub fn lut_grid_to_field(&mut self, grid: Var, n: usize) -> Var {
        let gs = &self.nodes[grid.0].shape;
        assert_eq!(gs, &[n * n * n, 3], "lut_grid_to_field grid shape");
        let src = &self.nodes[grid.0].data;
        let mut data = vec![T::zero(); 3 * n * n * n];
        for k in 0..n {
            for ch in 0..3 {
                let out_plane = &mut data[(k * 3 + ch) * n * n..(k * 3 + ch + 1) * n * n];
                for j in 0..n {
                    for i in 0..n {
                        out_plane[j * n + i] = src[lattice_offset(i, j, k, n) + ch];
                    }
                }
            }
        }
        let ng = self.needs(grid);
        self.push(vec![3 * n, n, n], data, Op::LutGridToField { grid, n }, ng)
    }

    /// Extracts sliding (patch × patch) windows of a (C, H, W) tensor with
    /// the given stride -> (P, C·patch²), channel-major within each row.
    pub fn unfold_patches(&mut self, img: Var, patch: usize, stride: usize) -> Result<Var> {
        let is = self.nodes[img.0].shape.clone();
        assert_eq!(is.len(), 3, "unfold_patches needs (C, H, W)");
        let (c, h, w) = (is[0], is[1], is[2]);
        if patch > h || patch > w {
            return Err(Error::shape(
                "unfold_patches",
                format!("patch within {h}x{w}"),
                format!("{patch}"),
            ));
        }
        assert!(stride >= 1);
        let nr = (h - patch) / stride + 1;
        let nc = (w - patch) / stride + 1;
        let row_len = c * patch * patch;
        let src = &self.nodes[img.0].data;
        let mut data = vec![T::zero(); nr * nc * row_len];
        let mut pos = 0;
        for pr in 0..nr {
            for pc in 0..nc {
                let (r0, c0) = (pr * stride, pc * stride);
                for ch in 0..c {
                    for py in 0..patch {
                        let base = (ch * h + r0 + py) * w + c0;
                        for px in 0..patch {
                            data[pos] = src[base + px];
                            pos += 1;
                        }
                    }
                }
            }
        }
        let ng = self.needs(img);
        Ok(self.push(
            vec![nr * nc, row_len],
            data,
            Op::UnfoldPatches { img, patch, stride },
            ng,
        ))
    }

    // ── indexing ────────────────────────────────────────────────────

    /// Element `idx` of a rank-1 tensor as a scalar node.
    pub fn slice_scalar(&mut self, x: Var, idx: usize) -> Var {
        let xs = &self.nodes[x.0].shape;
        assert_eq!(xs.len(), 1, "slice_scalar needs rank-1 input");
        assert!(idx < xs[0]);
        let v = self.nodes[x.0].data[idx];
        let ng = self.needs(x);
        self.push(vec![], vec![v], Op::SliceScalar { x, idx }, ng)
    }

    /// Multiplies every element of `x` by a scalar node `s`.
    pub fn mul_scalar_node(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.numel(s), 1, "mul_scalar_node needs a scalar");
        let sv = self.nodes[s.0].data[0];
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs2(x, s);
        self.push(shape, data, Op::MulScalarNode { x, s }, ng)
    }

    /// Channel `ch` of a (1, C, H, W) tensor -> (H, W).
    pub fn slice_channel(&mut self, x: Var, ch: usize) -> Var {
        let xs = &self.nodes[x.0].shape;
        assert!(xs.len() == 4 && xs[0] == 1, "slice_channel needs (1, C, H, W)");
        assert!(ch < xs[1]);
        let (h, w) = (xs[2], xs[3]);
        let data = self.nodes[x.0].data[ch * h * w..(ch + 1) * h * w].to_vec();
        let ng = self.needs(x);
        self.push(vec![h, w], data, Op::SliceChannel { x, ch }, ng)
    }

    /// (C, H, W) image times a per-pixel (H, W) weight map.
    pub fn mul_channel_broadcast(&mut self, img: Var, w: Var) -> Var {
        let is = self.nodes[img.0].shape.clone();
        let ws = &self.nodes[w.0].shape;
        assert_eq!(is.len(), 3, "mul_channel_broadcast image must be (C, H, W)");
        assert_eq!(ws, &is[1..], "weight map must match image spatial dims");
        let hw = is[1] * is[2];
        let src = &self.nodes[img.0].data;
        let wd = &self.nodes[w.0].data;
        let mut data = vec![T::zero(); src.len()];
        for ch in 0..is[0] {
            for (o, (&v, &wv)) in data[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .zip(src[ch * hw..(ch + 1) * hw].iter().zip(wd))
            {
                *o = v * wv;
            }
        }
        let ng = self.needs2(img, w);
        self.push(is, data, Op::MulChannelBroadcast { img, w }, ng)
    }

    // ── backward ────────────────────────────────────────────────────

    fn take_grad(&mut self, v: Var) -> Vec<T> {
        let n = &mut self.nodes[v.0];
        let len = n.data.len();
        n.grad.take().unwrap_or_else(|| vec![T::zero(); len])
    }

    fn put_grad(&mut self, v: Var, g: Vec<T>) {
        self.nodes[v.0].grad = Some(g);
    }

    /// Clears every gradient buffer, including the leaves.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Accumulates d(loss)/d(leaf) into every tracked leaf. Repeated calls
    /// add up until [`Self::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.numel(loss),
            });
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            return Err(Error::DetachedGraph);
        }
        // Leaf gradients persist across calls; intermediate buffers are
        // rebuilt per walk.
        for n in self.nodes.iter_mut() {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let gout = self.nodes[i].grad.take().unwrap();
            self.backprop_node(i, &op, &gout);
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op<T>, gout: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        let mut g = self.take_grad(v);
                        axpy(&mut g, gout, T::one());
                        self.put_grad(v, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    let mut g = self.take_grad(a);
                    axpy(&mut g, gout, T::one());
                    self.put_grad(a, g);
                }
                if self.needs(b) {
                    let mut g = self.take_grad(b);
                    axpy(&mut g, gout, -T::one());
                    self.put_grad(b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let mut g = self.take_grad(a);
                    for ((gv, &go), &bv) in g.iter_mut().zip(gout).zip(&self.nodes[b.0].data) {
                        *gv = *gv + go * bv;
                    }
                    self.put_grad(a, g);
                }
                if self.needs(b) {
                    let mut g = self.take_grad(b);
                    for ((gv, &go), &av) in g.iter_mut().zip(gout).zip(&self.nodes[a.0].data) {
                        *gv = *gv + go * av;
                    }
                    self.put_grad(b, g);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let mut g = self.take_grad(a);
                    for ((gv, &go), &bv) in g.iter_mut().zip(gout).zip(&self.nodes[b.0].data) {
                        *gv = *gv + go / bv;
                    }
                    self.put_grad(a, g);
                }
                if self.needs(b) {
                    let mut g = self.take_grad(b);
                    for (k, gv) in g.iter_mut().enumerate() {
                        let av = self.nodes[a.0].data[k];
                        let bv = self.nodes[b.0].data[k];
                        *gv = *gv - gout[k] * av / (bv * bv);
                    }
                    self.put_grad(b, g);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    axpy(&mut g, gout, c);
                    self.put_grad(x, g);
                }
            }
            Op::AddScalar(x) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    axpy(&mut g, gout, T::one());
                    self.put_grad(x, g);
                }
            }
            Op::Abs(x) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    for ((gv, &go), &xv) in g.iter_mut().zip(gout).zip(&self.nodes[x.0].data) {
                        *gv = *gv + go * sign(xv);
                    }
                    self.put_grad(x, g);
                }
            }
            Op::Relu(x) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    for ((gv, &go), &xv) in g.iter_mut().zip(gout).zip(&self.nodes[x.0].data) {
                        if xv > T::zero() {
                            *gv = *gv + go;
                        }
                    }
                    self.put_grad(x, g);
                }
            }
            Op::Elu(x, alpha) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    for (k, gv) in g.iter_mut().enumerate() {
                        let xv = self.nodes[x.0].data[k];
                        let d = if xv > T::zero() {
                            T::one()
                        } else {
                            self.nodes[i].data[k] + alpha // alpha * e^x
                        };
                        *gv = *gv + gout[k] * d;
                    }
                    self.put_grad(x, g);
                }
            }
            Op::SoftmaxLastDim(x) => {
                if self.needs(x) {
                    let l = *self.nodes[i].shape.last().unwrap();
                    let mut g = self.take_grad(x);
                    let out = &self.nodes[i].data;
                    for ((grow, orow), gorow) in g
                        .chunks_exact_mut(l)
                        .zip(out.chunks_exact(l))
                        .zip(gout.chunks_exact(l))
                    {
                        let dot: f64 = gorow
                            .iter()
                            .zip(orow)
                            .map(|(&a, &b)| a.to_f64v() * b.to_f64v())
                            .sum();
                        let dot = T::from_f64(dot);
                        for ((gv, &ov), &gov) in grow.iter_mut().zip(orow).zip(gorow) {
                            *gv = *gv + ov * (gov - dot);
                        }
                    }
                    self.put_grad(x, g);
                }
            }
            Op::Linear { x, w, b } => {
                let (bt, f) = {
                    let xs = &self.nodes[x.0].shape;
                    (xs[0], xs[1])
                };
                let g = self.nodes[w.0].shape[0];
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    let wd = &self.nodes[w.0].data;
                    gx.par_chunks_mut(f)
                        .zip(gout.par_chunks(g))
                        .for_each(|(gx_row, go_row)| {
                            for (j, &go) in go_row.iter().enumerate() {
                                if go != T::zero() {
                                    let wr = &wd[j * f..(j + 1) * f];
                                    for (gv, &wv) in gx_row.iter_mut().zip(wr) {
                                        *gv = *gv + go * wv;
                                    }
                                }
                            }
                        });
                    self.put_grad(x, gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_grad(w);
                    let xd = &self.nodes[x.0].data;
                    gw.par_chunks_mut(f).enumerate().for_each(|(j, gw_row)| {
                        for bi in 0..bt {
                            let go = gout[bi * g + j];
                            if go != T::zero() {
                                let xr = &xd[bi * f..(bi + 1) * f];
                                for (gv, &xv) in gw_row.iter_mut().zip(xr) {
                                    *gv = *gv + go * xv;
                                }
                            }
                        }
                    });
                    self.put_grad(w, gw);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    for (j, gv) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for bi in 0..bt {
                            acc += gout[bi * g + j].to_f64v();
                        }
                        *gv = *gv + T::from_f64(acc);
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.nodes[x.0].shape.clone();
                let ws = self.nodes[w.0].shape.clone();
                let os = self.nodes[i].shape.clone();
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    conv::backward_input(&mut gx, &xs, gout, &os, &self.nodes[w.0].data, &ws, stride, pad);
                    self.put_grad(x, gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_grad(w);
                    conv::backward_weight(&mut gw, &ws, gout, &os, &self.nodes[x.0].data, &xs, stride, pad);
                    self.put_grad(w, gw);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    conv::backward_bias(&mut gb, gout, &os);
                    self.put_grad(b, gb);
                }
            }
            Op::AdaptiveAvgPool2d(x) => {
                if self.needs(x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let os = self.nodes[i].shape.clone();
                    let (h, w, oh, ow) = (xs[2], xs[3], os[2], os[3]);
                    let mut gx = self.take_grad(x);
                    for nc in 0..xs[0] * xs[1] {
                        let gsrc = &gout[nc * oh * ow..(nc + 1) * oh * ow];
                        let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for oi in 0..oh {
                            let (r0, r1) = pool_span(oi, h, oh);
                            for oj in 0..ow {
                                let (c0, c1) = pool_span(oj, w, ow);
                                let share =
                                    gsrc[oi * ow + oj] / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        gdst[r * w + cc] = gdst[r * w + cc] + share;
                                    }
                                }
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::UpsampleBilinear(x) => {
                if self.needs(x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let os = self.nodes[i].shape.clone();
                    let (h, w, oh, ow) = (xs[2], xs[3], os[2], os[3]);
                    let mut gx = self.take_grad(x);
                    for nc in 0..xs[0] * xs[1] {
                        let gsrc = &gout[nc * oh * ow..(nc + 1) * oh * ow];
                        let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for oi in 0..oh {
                            let (y0, y1, ty) = resize_span::<T>(oi, h, oh);
                            for oj in 0..ow {
                                let (x0, x1, tx) = resize_span::<T>(oj, w, ow);
                                let go = gsrc[oi * ow + oj];
                                let (ux, uy) = (T::one() - tx, T::one() - ty);
                                gdst[y0 * w + x0] = gdst[y0 * w + x0] + go * ux * uy;
                                gdst[y0 * w + x1] = gdst[y0 * w + x1] + go * tx * uy;
                                gdst[y1 * w + x0] = gdst[y1 * w + x0] + go * ux * ty;
                                gdst[y1 * w + x1] = gdst[y1 * w + x1] + go * tx * ty;
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Reshape(x) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    axpy(&mut g, gout, T::one());
                    self.put_grad(x, g);
                }
            }
            Op::Transpose2d(x) => {
                if self.needs(x) {
                    let (c, r) = {
                        let os = &self.nodes[i].shape;
                        (os[0], os[1])
                    };
                    let mut g = self.take_grad(x);
                    for oi in 0..c {
                        for oj in 0..r {
                            g[oj * c + oi] = g[oj * c + oi] + gout[oi * r + oj];
                        }
                    }
                    self.put_grad(x, g);
                }
            }
            Op::Concat2d(a, b) => {
                let (r, ca) = {
                    let sa = &self.nodes[a.0].shape;
                    (sa[0], sa[1])
                };
                let cb = self.nodes[b.0].shape[1];
                if self.needs(a) {
                    let mut g = self.take_grad(a);
                    for row in 0..r {
                        for j in 0..ca {
                            g[row * ca + j] = g[row * ca + j] + gout[row * (ca + cb) + j];
                        }
                    }
                    self.put_grad(a, g);
                }
                if self.needs(b) {
                    let mut g = self.take_grad(b);
                    for row in 0..r {
                        for j in 0..cb {
                            g[row * cb + j] = g[row * cb + j] + gout[row * (ca + cb) + ca + j];
                        }
                    }
                    self.put_grad(b, g);
                }
            }
            Op::MeanAll(x) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    let share = gout[0] / T::from_f64(g.len() as f64);
                    for gv in g.iter_mut() {
                        *gv = *gv + share;
                    }
                    self.put_grad(x, g);
                }
            }
            Op::SumAll(x) => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    for gv in g.iter_mut() {
                        *gv = *gv + gout[0];
                    }
                    self.put_grad(x, g);
                }
            }
            Op::MeanLastDim(x) => {
                if self.needs(x) {
                    let l = *self.nodes[x.0].shape.last().unwrap();
                    let mut g = self.take_grad(x);
                    for (row, &go) in g.chunks_exact_mut(l).zip(gout) {
                        let share = go / T::from_f64(l as f64);
                        for gv in row.iter_mut() {
                            *gv = *gv + share;
                        }
                    }
                    self.put_grad(x, g);
                }
            }
            Op::NormRows { x, eps } => {
                if self.needs(x) {
                    let c = self.nodes[x.0].shape[1];
                    let mut g = self.take_grad(x);
                    let xd = &self.nodes[x.0].data;
                    for ((grow, xrow), gorow) in g
                        .chunks_exact_mut(c)
                        .zip(xd.chunks_exact(c))
                        .zip(gout.chunks_exact(c))
                    {
                        let norm = row_norm(xrow, eps);
                        let dot: f64 = gorow
                            .iter()
                            .zip(xrow)
                            .map(|(&a, &b)| a.to_f64v() * b.to_f64v())
                            .sum();
                        let n3 = norm.to_f64v().powi(3);
                        for ((gv, &xv), &gov) in grow.iter_mut().zip(xrow).zip(gorow) {
                            *gv = *gv + gov / norm - T::from_f64(dot * xv.to_f64v() / n3);
                        }
                    }
                    self.put_grad(x, g);
                }
            }
            Op::Gram(x) => {
                if self.needs(x) {
                    let (r, c) = {
                        let xs = &self.nodes[x.0].shape;
                        (xs[0], xs[1])
                    };
                    let mut g = self.take_grad(x);
                    let xd = &self.nodes[x.0].data;
                    for ri in 0..r {
                        for rj in 0..r {
                            let coeff = gout[ri * r + rj] + gout[rj * r + ri];
                            if coeff != T::zero() {
                                for k in 0..c {
                                    g[ri * c + k] = g[ri * c + k] + coeff * xd[rj * c + k];
                                }
                            }
                        }
                    }
                    self.put_grad(x, g);
                }
            }
            Op::GridSampleTrilinear { vol, ref coords } => {
                if self.needs(vol) {
                    let vs = self.nodes[vol.0].shape.clone();
                    let (c, d, h, w) = (vs[0], vs[1], vs[2], vs[3]);
                    let mut g = self.take_grad(vol);
                    // partition by channel slab to keep scatter writes disjoint
                    g.par_chunks_mut(d * h * w).enumerate().for_each(|(ch, slab)| {
                        for (m, co) in coords.chunks_exact(3).enumerate() {
                            let go = gout[m * c + ch];
                            if go == T::zero() {
                                continue;
                            }
                            let (i0, tr) = axis_cell(T::from_f32(0.5 * (co[0] + 1.0)), d);
                            let (j0, tg) = axis_cell(T::from_f32(0.5 * (co[1] + 1.0)), h);
                            let (k0, tb) = axis_cell(T::from_f32(0.5 * (co[2] + 1.0)), w);
                            let ws = corner_weights(tr, tg, tb);
                            for (cix, &wt) in ws.iter().enumerate() {
                                let di = i0 + (cix & 1);
                                let dj = j0 + ((cix >> 1) & 1);
                                let dk = k0 + ((cix >> 2) & 1);
                                let o = (di * h + dj) * w + dk;
                                slab[o] = slab[o] + wt * go;
                            }
                        }
                    });
                    self.put_grad(vol, g);
                }
            }
            Op::LutApply { grid, img, n } => {
                let img_data_ptr = img;
                if self.needs(grid) {
                    let mut g = self.take_grad(grid);
                    let id = &self.nodes[img_data_ptr.0].data;
                    for (p, px) in id.chunks_exact(3).enumerate() {
                        let (i0, tr) = axis_cell(px[0], n);
                        let (j0, tg) = axis_cell(px[1], n);
                        let (k0, tb) = axis_cell(px[2], n);
                        let ws = corner_weights(tr, tg, tb);
                        for (cix, &wt) in ws.iter().enumerate() {
                            if wt == T::zero() {
                                continue;
                            }
                            let off = lattice_offset(
                                i0 + (cix & 1),
                                j0 + ((cix >> 1) & 1),
                                k0 + ((cix >> 2) & 1),
                                n,
                            );
                            for ch in 0..3 {
                                g[off + ch] = g[off + ch] + wt * gout[p * 3 + ch];
                            }
                        }
                    }
                    self.put_grad(grid, g);
                }
                if self.needs(img) {
                    let mut g = self.take_grad(img);
                    let gd = &self.nodes[grid.0].data;
                    let id = &self.nodes[img.0].data;
                    g.par_chunks_mut(3)
                        .zip(id.par_chunks(3))
                        .zip(gout.par_chunks(3))
                        .for_each(|((gpx, px), gop)| {
                            grid_color_grad(gd, n, px, gop, gpx);
                        });
                    self.put_grad(img, g);
                }
            }
            Op::TrilinearRows { rows, img, ref plan } => {
                let n = plan.n;
                if self.needs(rows) {
                    let mut g = self.take_grad(rows);
                    let id = &self.nodes[img.0].data;
                    for (p, (px, rws)) in id.chunks_exact(3).zip(plan.pixel_rows.iter()).enumerate() {
                        let (_, tr) = axis_cell(px[0], n);
                        let (_, tg) = axis_cell(px[1], n);
                        let (_, tb) = axis_cell(px[2], n);
                        let ws = corner_weights(tr, tg, tb);
                        for (cix, &wt) in ws.iter().enumerate() {
                            if wt == T::zero() {
                                continue;
                            }
                            let off = rws[cix] as usize * 3;
                            for ch in 0..3 {
                                g[off + ch] = g[off + ch] + wt * gout[p * 3 + ch];
                            }
                        }
                    }
                    self.put_grad(rows, g);
                }
                if self.needs(img) {
                    let mut g = self.take_grad(img);
                    let rd = &self.nodes[rows.0].data;
                    let id = &self.nodes[img.0].data;
                    g.par_chunks_mut(3)
                        .zip(id.par_chunks(3))
                        .zip(gout.par_chunks(3))
                        .zip(plan.pixel_rows.par_iter())
                        .for_each(|(((gpx, px), gop), rws)| {
                            rows_color_grad(rd, rws, n, px, gop, gpx);
                        });
                    self.put_grad(img, g);
                }
            }
            Op::LutGridToField { grid, n } => {
                if self.needs(grid) {
                    let mut g = self.take_grad(grid);
                    for k in 0..n {
                        for ch in 0..3 {
                            let gplane = &gout[(k * 3 + ch) * n * n..(k * 3 + ch + 1) * n * n];
                            for j in 0..n {
                                for ii in 0..n {
                                    let off = lattice_offset(ii, j, k, n) + ch;
                                    g[off] = g[off] + gplane[j * n + ii];
                                }
                            }
                        }
                    }
                    self.put_grad(grid, g);
                }
            }
            Op::UnfoldPatches { img, patch, stride } => {
                if self.needs(img) {
                    let is = self.nodes[img.0].shape.clone();
                    let (c, h, w) = (is[0], is[1], is[2]);
                    let nr = (h - patch) / stride + 1;
                    let nc = (w - patch) / stride + 1;
                    let mut g = self.take_grad(img);
                    let mut pos = 0;
                    for pr in 0..nr {
                        for pc in 0..nc {
                            let (r0, c0) = (pr * stride, pc * stride);
                            for ch in 0..c {
                                for py in 0..patch {
                                    let base = (ch * h + r0 + py) * w + c0;
                                    for px in 0..patch {
                                        g[base + px] = g[base + px] + gout[pos];
                                        pos += 1;
                                    }
                                }
                            }
                        }
                    }
                    self.put_grad(img, g);
                }
            }
            Op::SliceScalar { x, idx } => {
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    g[idx] = g[idx] + gout[0];
                    self.put_grad(x, g);
                }
            }
            Op::MulScalarNode { x, s } => {
                let sv = self.nodes[s.0].data[0];
                if self.needs(x) {
                    let mut g = self.take_grad(x);
                    axpy(&mut g, gout, sv);
                    self.put_grad(x, g);
                }
                if self.needs(s) {
                    let mut g = self.take_grad(s);
                    let dot: f64 = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&a, &b)| a.to_f64v() * b.to_f64v())
                        .sum();
                    g[0] = g[0] + T::from_f64(dot);
                    self.put_grad(s, g);
                }
            }
            Op::SliceChannel { x, ch } => {
                if self.needs(x) {
                    let (h, w) = {
                        let os = &self.nodes[i].shape;
                        (os[0], os[1])
                    };
                    let mut g = self.take_grad(x);
                    for (gv, &go) in g[ch * h * w..(ch + 1) * h * w].iter_mut().zip(gout) {
                        *gv = *gv + go;
                    }
                    self.put_grad(x, g);
                }
            }
            Op::MulChannelBroadcast { img, w } => {
                let is = self.nodes[img.0].shape.clone();
                let hw = is[1] * is[2];
                if self.needs(img) {
                    let mut g = self.take_grad(img);
                    let wd = &self.nodes[w.0].data;
                    for ch in 0..is[0] {
                        for ((gv, &go), &wv) in g[ch * hw..(ch + 1) * hw]
                            .iter_mut()
                            .zip(&gout[ch * hw..(ch + 1) * hw])
                            .zip(wd)
                        {
                            *gv = *gv + go * wv;
                        }
                    }
                    self.put_grad(img, g);
                }
                if self.needs(w) {
                    let mut g = self.take_grad(w);
                    let id = &self.nodes[img.0].data;
                    for ch in 0..is[0] {
                        for ((gv, &go), &iv) in g
                            .iter_mut()
                            .zip(&gout[ch * hw..(ch + 1) * hw])
                            .zip(&id[ch * hw..(ch + 1) * hw])
                        {
                            *gv = *gv + go * iv;
                        }
                    }
                    self.put_grad(w, g);
                }
            }
        }
    }
}

// ── shared numeric helpers ──────────────────────────────────────────

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + c * s;
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn row_norm<T: Scalar>(row: &[T], eps: T) -> T {
    let sq: f64 = row.iter().map(|&v| v.to_f64v() * v.to_f64v()).sum();
    T::from_f64((sq + eps.to_f64v()).sqrt())
}

fn pool_span(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = i * src / dst;
    let end = ((i + 1) * src).div_ceil(dst);
    (start, end)
}

/// Half-pixel source span for bilinear resize: low/high source indices and
/// the blend fraction toward the high index.
fn resize_span<T: Scalar>(i: usize, src: usize, dst: usize) -> (usize, usize, T) {
    if src == 1 {
        return (0, 0, T::zero());
    }
    let s = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    let s = s.clamp(0.0, (src - 1) as f64);
    let lo = (s.floor() as usize).min(src - 2);
    (lo, lo + 1, T::from_f64(s - lo as f64))
}

/// 8-corner blend of a full (n³, 3) grid at one RGB pixel.
fn sample_grid_into<T: Scalar>(grid: &[T], n: usize, px: &[T], out: &mut [T]) {
    let (i0, tr) = axis_cell(px[0], n);
    let (j0, tg) = axis_cell(px[1], n);
    let (k0, tb) = axis_cell(px[2], n);
    let ws = corner_weights(tr, tg, tb);
    for ch in 0..3 {
        let mut acc = T::zero();
        for (cix, &wt) in ws.iter().enumerate() {
            let off = lattice_offset(i0 + (cix & 1), j0 + ((cix >> 1) & 1), k0 + ((cix >> 2) & 1), n);
            acc = acc + wt * grid[off + ch];
        }
        out[ch] = acc;
    }
}

/// d(blend)/d(pixel color) for the full-grid sampler.
fn grid_color_grad<T: Scalar>(grid: &[T], n: usize, px: &[T], gout: &[T], gpx: &mut [T]) {
    let (i0, tr) = axis_cell(px[0], n);
    let (j0, tg) = axis_cell(px[1], n);
    let (k0, tb) = axis_cell(px[2], n);
    let m = T::from_f64((n - 1) as f64);
    let corner = |di: usize, dj: usize, dk: usize, ch: usize| -> T {
        grid[lattice_offset(i0 + di, j0 + dj, k0 + dk, n) + ch]
    };
    color_grad_impl(tr, tg, tb, m, px, gout, gpx, corner);
}

/// d(blend)/d(pixel color) for the sparse-rows sampler.
fn rows_color_grad<T: Scalar>(
    rows: &[T],
    rws: &[u32; 8],
    n: usize,
    px: &[T],
    gout: &[T],
    gpx: &mut [T],
) {
    let (_, tr) = axis_cell(px[0], n);
    let (_, tg) = axis_cell(px[1], n);
    let (_, tb) = axis_cell(px[2], n);
    let m = T::from_f64((n - 1) as f64);
    let corner = |di: usize, dj: usize, dk: usize, ch: usize| -> T {
        let cix = di | (dj << 1) | (dk << 2);
        rows[rws[cix] as usize * 3 + ch]
    };
    color_grad_impl(tr, tg, tb, m, px, gout, gpx, corner);
}

#[allow(clippy::too_many_arguments)]
fn color_grad_impl<T: Scalar>(
    tr: T,
    tg: T,
    tb: T,
    m: T,
    px: &[T],
    gout: &[T],
    gpx: &mut [T],
    corner: impl Fn(usize, usize, usize, usize) -> T,
) {
    let (ur, ug, ub) = (T::one() - tr, T::one() - tg, T::one() - tb);
    for ch in 0..3 {
        let go = gout[ch];
        if go == T::zero() {
            continue;
        }
        // partial derivatives with respect to the per-axis fractions
        let mut d_tr = T::zero();
        let mut d_tg = T::zero();
        let mut d_tb = T::zero();
        for dj in 0..2 {
            let wg = if dj == 0 { ug } else { tg };
            for dk in 0..2 {
                let wb = if dk == 0 { ub } else { tb };
                d_tr = d_tr + wg * wb * (corner(1, dj, dk, ch) - corner(0, dj, dk, ch));
            }
        }
        for di in 0..2 {
            let wr = if di == 0 { ur } else { tr };
            for dk in 0..2 {
                let wb = if dk == 0 { ub } else { tb };
                d_tg = d_tg + wr * wb * (corner(di, 1, dk, ch) - corner(di, 0, dk, ch));
            }
        }
        for di in 0..2 {
            let wr = if di == 0 { ur } else { tr };
            for dj in 0..2 {
                let wg = if dj == 0 { ug } else { tg };
                d_tb = d_tb + wr * wg * (corner(di, dj, 1, ch) - corner(di, dj, 0, ch));
            }
        }
        // clamped inputs stop the gradient
        let unit = T::zero()..=T::one();
        if unit.contains(&px[0]) {
            gpx[0] = gpx[0] + go * d_tr * m;
        }
        if unit.contains(&px[1]) {
            gpx[1] = gpx[1] + go * d_tg * m;
        }
        if unit.contains(&px[2]) {
            gpx[2] = gpx[2] + go * d_tb * m;
        }
    }
}
