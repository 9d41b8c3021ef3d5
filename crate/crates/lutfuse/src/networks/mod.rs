//! Learned components: encoders, implicit LUT generators, fusion-weight
//! predictor, per-pixel image weighting, and the tokenizers behind the
//! long-range loss.
//!
//! The student maps an exposure stack to a latent volume and regresses LUT
//! entries from (sampled latent, lattice coordinate) pairs, so one trained
//! model emits grids of any resolution. The teacher encodes three fixed
//! toned basis grids instead and blends their enhancement deltas with
//! image-predicted weights; the student later distills the teacher's 64³
//! grid.

mod layers;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ImageRgb};
use crate::lut::{identity_lut, Lut3d, LutQueryPlan};
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};
use layers::{ConvSpec, LinearSpec};

/// Side length of the downsampled stack every network consumes.
pub const STACK_SIDE: usize = 128;
/// Latent code: 12 channels over an 8×8×8 volume.
pub const LATENT_CHANNELS: usize = 12;
pub const LATENT_SIDE: usize = 8;
/// Grid resolution the teacher emits and the distillation loss compares at.
pub const DISTILL_GRID: usize = 64;
/// Token count of the correlation matrices (4×4 pooled tokens).
const TOKENS: usize = 16;
const TOKEN_DIM: usize = 32;

/// 12×8×8×8 feature volume summarizing one exposure stack.
#[derive(Debug, Clone)]
pub struct LatentVolume(Tensor);

impl LatentVolume {
    pub fn new(t: Tensor) -> Self {
        assert_eq!(
            t.shape(),
            &[LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE, LATENT_SIDE],
            "latent volume shape"
        );
        LatentVolume(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Full lattice of an n-sided grid as coordinates in [-1,1]³, in the same
/// element order as [`Lut3d`] storage (R fastest).
#[derive(Debug, Clone)]
pub struct GridCoords {
    n: usize,
    coords: Arc<Vec<f32>>,
}

impl GridCoords {
    pub fn full_lattice(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be at least 2, got {n}"
            )));
        }
        let m = (n - 1) as f64;
        let mut coords = Vec::with_capacity(n * n * n * 3);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    coords.push((2.0 * i as f64 / m - 1.0) as f32);
                    coords.push((2.0 * j as f64 / m - 1.0) as f32);
                    coords.push((2.0 * k as f64 / m - 1.0) as f32);
                }
            }
        }
        Ok(GridCoords {
            n,
            coords: Arc::new(coords),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn coords(&self) -> &Arc<Vec<f32>> {
        &self.coords
    }
}

/// 16×16 token self-similarity matrix.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    data: Vec<f32>,
}

impl CorrelationMatrix {
    pub fn new(data: Vec<f32>) -> Self {
        assert_eq!(data.len(), TOKENS * TOKENS);
        CorrelationMatrix { data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * TOKENS + j]
    }
}

/// Resizes every exposure to `side`×`side` and stacks the channel planes in
/// order: (1, 3K, side, side).
pub fn stack_to_input(images: &[ImageRgb], side: usize) -> Result<Tensor> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(
            "an exposure stack needs at least two images".into(),
        ));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * side * side);
    for img in images {
        let small = resize_bilinear(img, side, side)?;
        data.extend_from_slice(&small.to_planar());
    }
    Ok(Tensor::from_vec(vec![1, images.len() * 3, side, side], data))
}

fn require_same_size(images: &[ImageRgb]) -> Result<(usize, usize)> {
    let (h, w) = (images[0].height(), images[0].width());
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::shape(
                "exposure stack",
                format!("{h}x{w}"),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
    }
    Ok((h, w))
}

// ── shared sub-network builders ─────────────────────────────────────

/// Conv stack with ReLU after every layer.
fn conv_stack(g: &mut Graph, bp: &Bound, convs: &[ConvSpec], mut x: Var) -> Result<Var> {
    for c in convs {
        x = c.apply(g, bp, x)?;
        x = g.relu(x);
    }
    Ok(x)
}

/// ELU MLP over (m, F) rows; no activation after the last layer.
fn mlp(g: &mut Graph, bp: &Bound, layers: &[LinearSpec], mut x: Var) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        x = l.apply(g, bp, x)?;
        if i + 1 < layers.len() {
            x = g.elu(x, 1.0);
        }
    }
    Ok(x)
}

/// Per-pixel softmax over the channel dim of a (1, K, H, W) map.
fn softmax_channels(g: &mut Graph, x: Var, k: usize, h: usize, w: usize) -> Var {
    let flat = g.reshape(x, vec![k, h * w]);
    let t = g.transpose2d(flat);
    let s = g.softmax_lastdim(t);
    let back = g.transpose2d(s);
    g.reshape(back, vec![1, k, h, w])
}

/// Image-weighting head shared by teacher and student: 3 convs + 2-layer
/// 1×1 MLP, softmax over the K weight maps.
#[derive(Debug, Clone)]
struct ImageWeighter {
    k: usize,
    convs: Vec<ConvSpec>,
    mix: Vec<ConvSpec>,
}

impl ImageWeighter {
    fn new(prefix: &str, k: usize) -> Self {
        let convs = vec![
            ConvSpec::new(format!("{prefix}/conv0"), 3 * k, 16, 3, 1),
            ConvSpec::new(format!("{prefix}/conv1"), 16, 16, 3, 1),
            ConvSpec::new(format!("{prefix}/conv2"), 16, 16, 3, 1),
        ];
        let mix = vec![
            ConvSpec::new(format!("{prefix}/mlp0"), 16, 16, 1, 1),
            ConvSpec::new(format!("{prefix}/mlp1"), 16, k, 1, 1),
        ];
        ImageWeighter { k, convs, mix }
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for c in self.convs.iter().chain(&self.mix) {
            c.init(ps, rng);
        }
    }

    fn param_count(&self) -> usize {
        self.convs.iter().chain(&self.mix).map(|c| c.param_count()).sum()
    }

    /// Softmax-normalized weight maps at the stack resolution: (1, K, S, S).
    fn maps(&self, g: &mut Graph, bp: &Bound, stack: Var) -> Result<Var> {
        let mut x = conv_stack(g, bp, &self.convs, stack)?;
        x = self.mix[0].apply(g, bp, x)?;
        x = g.relu(x);
        x = self.mix[1].apply(g, bp, x)?;
        Ok(softmax_channels(g, x, self.k, STACK_SIDE, STACK_SIDE))
    }

    /// Full fusion: upsampled weight maps blended with the full-resolution
    /// exposures; returns interleaved (H·W, 3) pixels.
    fn fuse(&self, g: &mut Graph, bp: &Bound, stack: Var, images: &[ImageRgb]) -> Result<Var> {
        let (h, w) = require_same_size(images)?;
        let maps = self.maps(g, bp, stack)?;
        let maps = g.upsample_bilinear(maps, h, w);
        let mut acc: Option<Var> = None;
        for (ki, img) in images.iter().enumerate() {
            let wmap = g.slice_channel(maps, ki);
            let plane = g.constant(img.to_planar(), vec![3, h, w]);
            let term = g.mul_channel_broadcast(plane, wmap);
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        let planar = acc.expect("at least one exposure");
        let flat = g.reshape(planar, vec![3, h * w]);
        Ok(g.transpose2d(flat))
    }
}

/// Latent-conditioned implicit grid generator: trilinearly samples the
/// latent volume at each lattice coordinate, concatenates the coordinate,
/// and runs the ELU MLP to a 3-channel delta over the identity grid.
fn inn_delta(
    g: &mut Graph,
    bp: &Bound,
    layers: &[LinearSpec],
    latent: Var,
    coords: &Arc<Vec<f32>>,
) -> Result<Var> {
    let sampled = g.grid_sample_trilinear(latent, coords.clone());
    let coord_const = g.constant_f32(coords, vec![coords.len() / 3, 3]);
    let x = g.concat2d(sampled, coord_const);
    mlp(g, bp, layers, x)
}

// ── student ─────────────────────────────────────────────────────────

/// Inference outputs of one student pass.
#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub enhanced: ImageRgb,
    pub fused: ImageRgb,
    pub lut: Lut3d,
}

/// Vars of an in-graph student pass (training).
pub struct StudentGraph {
    pub latent: Var,
    pub grid: Var,
    pub fused: Var,
    pub enhanced: Var,
}

#[derive(Debug, Clone)]
pub struct StudentNet {
    k: usize,
    encoder: Vec<ConvSpec>,
    proj: Vec<ConvSpec>,
    inn: Vec<LinearSpec>,
    iw: ImageWeighter,
    tokenizer_proj: ConvSpec,
    tokenizer: Vec<ConvSpec>,
    stem: ConvSpec,
}

impl StudentNet {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "need at least two exposures");
        let e = |i: usize| format!("encoder/conv{i}");
        let encoder = vec![
            ConvSpec::new(e(0), 3 * k, 16, 3, 2),
            ConvSpec::new(e(1), 16, 24, 3, 1),
            ConvSpec::new(e(2), 24, 32, 3, 2),
            ConvSpec::new(e(3), 32, 48, 3, 1),
            ConvSpec::new(e(4), 48, 64, 3, 2),
            ConvSpec::new(e(5), 64, 64, 3, 1),
            ConvSpec::new(e(6), 64, 96, 3, 2),
            ConvSpec::new(e(7), 96, 96, 3, 1),
        ];
        let proj = vec![
            ConvSpec::new("encoder/proj0", 96, 96, 1, 1),
            ConvSpec::new("encoder/proj1", 96, 96, 1, 1),
        ];
        let width = 24;
        let mut inn = vec![LinearSpec::new("inn/fc0", LATENT_CHANNELS + 3, width)];
        for i in 1..6 {
            inn.push(LinearSpec::new(format!("inn/fc{i}"), width, width));
        }
        inn.push(LinearSpec::new("inn/fc6", width, 3));
        let iw = ImageWeighter::new("iw", k);
        let tokenizer_proj = ConvSpec::new("tokenizer/proj", 3 * DISTILL_GRID, 12, 1, 1);
        let t = |i: usize| format!("tokenizer/conv{i}");
        let tokenizer = vec![
            ConvSpec::new(t(0), 12, 16, 3, 2),
            ConvSpec::new(t(1), 16, 24, 3, 2),
            ConvSpec::new(t(2), 24, 32, 3, 2),
            ConvSpec::new(t(3), 32, TOKEN_DIM, 3, 1),
            ConvSpec::new(t(4), TOKEN_DIM, TOKEN_DIM, 3, 1),
        ];
        let stem = ConvSpec::new("stem/conv", 3, TOKEN_DIM, 16, 16);
        StudentNet {
            k,
            encoder,
            proj,
            inn,
            iw,
            tokenizer_proj,
            tokenizer,
            stem,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        for c in self.encoder.iter().chain(&self.proj) {
            c.init(&mut ps, &mut rng);
        }
        for l in &self.inn {
            l.init(&mut ps, &mut rng);
        }
        self.iw.init(&mut ps, &mut rng);
        self.tokenizer_proj.init(&mut ps, &mut rng);
        for c in &self.tokenizer {
            c.init(&mut ps, &mut rng);
        }
        self.stem.init(&mut ps, &mut rng);
        let mut ps = ps;
        Self::freeze_stem(&mut ps);
        ps
    }

    /// The truth-side stem stays at its random initialization.
    pub fn freeze_stem(ps: &mut ParamSet) {
        for (name, t) in ps.iter_mut() {
            if name.starts_with("stem/") {
                t.set_requires_grad(false);
            }
        }
    }

    /// Parameters that ship for inference: encoder + implicit generator +
    /// image weighter. Tokenizer and stem only exist for training.
    pub fn inference_param_count(&self, ps: &ParamSet) -> usize {
        ps.count_where(|n| {
            n.starts_with("encoder/") || n.starts_with("inn/") || n.starts_with("iw/")
        })
    }

    // ── graph builders ──────────────────────────────────────────────

    /// (1, 3K, 128, 128) stack -> (12, 8, 8, 8) latent volume.
    pub fn encode_latent_var(&self, g: &mut Graph, bp: &Bound, stack: Var) -> Result<Var> {
        let mut x = conv_stack(g, bp, &self.encoder, stack)?;
        x = self.proj[0].apply(g, bp, x)?;
        x = g.relu(x);
        x = self.proj[1].apply(g, bp, x)?;
        Ok(g.reshape(x, vec![LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE, LATENT_SIDE]))
    }

    /// Raw MLP rows for the given coordinates: (m, 3) deltas.
    pub fn inn_delta_var(
        &self,
        g: &mut Graph,
        bp: &Bound,
        latent: Var,
        coords: &Arc<Vec<f32>>,
    ) -> Result<Var> {
        inn_delta(g, bp, &self.inn, latent, coords)
    }

    /// Full grid at resolution n: identity lattice plus the learned delta.
    pub fn generate_lut_var(&self, g: &mut Graph, bp: &Bound, latent: Var, n: usize) -> Result<Var> {
        let coords = GridCoords::full_lattice(n)?;
        let delta = self.inn_delta_var(g, bp, latent, coords.coords())?;
        let ident = identity_lut(n)?;
        let base = g.constant_f32(ident.values(), vec![n * n * n, 3]);
        Ok(g.add(base, delta))
    }

    /// Fused full-resolution image as (H·W, 3) pixels.
    pub fn fuse_var(
        &self,
        g: &mut Graph,
        bp: &Bound,
        stack: Var,
        images: &[ImageRgb],
    ) -> Result<Var> {
        self.iw.fuse(g, bp, stack, images)
    }

    /// End-to-end training pass at grid resolution `n`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bp: &Bound,
        images: &[ImageRgb],
        stack128: &Tensor,
        n: usize,
    ) -> Result<StudentGraph> {
        let stack = g.leaf(stack128);
        let latent = self.encode_latent_var(g, bp, stack)?;
        let grid = self.generate_lut_var(g, bp, latent, n)?;
        let fused = self.fuse_var(g, bp, stack, images)?;
        let enhanced = g.lut_apply(grid, fused, n);
        Ok(StudentGraph {
            latent,
            grid,
            fused,
            enhanced,
        })
    }

    /// Correlation matrix of an in-graph 64³ LUT (the M_b branch).
    pub fn tokenize_lut_var(&self, g: &mut Graph, bp: &Bound, grid: Var) -> Result<Var> {
        let field = g.lut_grid_to_field(grid, DISTILL_GRID);
        let field4 = g.reshape(field, vec![1, 3 * DISTILL_GRID, DISTILL_GRID, DISTILL_GRID]);
        let mut x = self.tokenizer_proj.apply(g, bp, field4)?;
        x = g.relu(x);
        x = conv_stack(g, bp, &self.tokenizer, x)?;
        let pooled = g.adaptive_avg_pool2d(x, 4, 4)?;
        let tokens = g.reshape(pooled, vec![TOKEN_DIM, TOKENS]);
        let tokens = g.transpose2d(tokens);
        let tokens = g.norm_rows(tokens, 1e-12);
        Ok(g.gram(tokens))
    }

    /// Correlation matrix of a ground-truth image (the frozen M_g branch).
    /// The image is resized to 256×256 before the 16×16 stem.
    pub fn tokenize_truth_var(&self, g: &mut Graph, bp: &Bound, truth: &ImageRgb) -> Result<Var> {
        let img = resize_bilinear(truth, 256, 256)?;
        let x = g.constant(img.to_planar(), vec![1, 3, 256, 256]);
        let x = self.stem.apply(g, bp, x)?;
        let pooled = g.adaptive_avg_pool2d(x, 4, 4)?;
        let tokens = g.reshape(pooled, vec![TOKEN_DIM, TOKENS]);
        let tokens = g.transpose2d(tokens);
        let tokens = g.norm_rows(tokens, 1e-12);
        Ok(g.gram(tokens))
    }

    // ── inference wrappers ──────────────────────────────────────────

    pub fn encode_latent(&self, ps: &ParamSet, images: &[ImageRgb]) -> Result<LatentVolume> {
        let stack128 = stack_to_input(images, STACK_SIDE)?;
        let mut g = Graph::new();
        let bp = ps.bind(&mut g, false);
        let sv = g.leaf(&stack128);
        let latent = self.encode_latent_var(&mut g, &bp, sv)?;
        Ok(LatentVolume::new(Tensor::from_vec(
            g.shape(latent).to_vec(),
            g.data(latent).to_vec(),
        )))
    }

    /// Editable-mode grid generation at any resolution n ≥ 2. Queries are
    /// chunked so large grids stay within memory.
    pub fn generate_lut(&self, ps: &ParamSet, latent: &LatentVolume, n: usize) -> Result<Lut3d> {
        let coords = GridCoords::full_lattice(n)?;
        let ident = identity_lut(n)?;
        let mut values = ident.values().to_vec();
        let chunk_rows = 131_072;
        let mut row = 0;
        while row < coords.count() {
            let rows = chunk_rows.min(coords.count() - row);
            let chunk = Arc::new(coords.coords()[row * 3..(row + rows) * 3].to_vec());
            let mut g = Graph::new();
            let bp = ps.bind(&mut g, false);
            let lv = g.leaf(latent.tensor());
            let delta = self.inn_delta_var(&mut g, &bp, lv, &chunk)?;
            for (dst, &d) in values[row * 3..(row + rows) * 3]
                .iter_mut()
                .zip(g.data(delta))
            {
                *dst += d;
            }
            row += rows;
        }
        Lut3d::new(n, values)
    }

    /// Per-pixel convex blend of the full-resolution exposures.
    pub fn image_weight_fuse(&self, ps: &ParamSet, images: &[ImageRgb]) -> Result<ImageRgb> {
        let (h, w) = require_same_size(images)?;
        let stack128 = stack_to_input(images, STACK_SIDE)?;
        let mut g = Graph::new();
        let bp = ps.bind(&mut g, false);
        let sv = g.leaf(&stack128);
        let fused = self.fuse_var(&mut g, &bp, sv, images)?;
        Ok(ImageRgb::new(h, w, g.data(fused).to_vec()))
    }

    /// Full inference: editable grid at `n`, fusion, LUT application.
    pub fn forward(&self, ps: &ParamSet, images: &[ImageRgb], n: usize) -> Result<StudentOutput> {
        let latent = self.encode_latent(ps, images)?;
        let lut = self.generate_lut(ps, &latent, n)?;
        let fused = self.image_weight_fuse(ps, images)?;
        let enhanced = crate::lut::apply(&lut, &fused);
        Ok(StudentOutput {
            enhanced,
            fused,
            lut,
        })
    }

    /// Standalone correlation matrices (inference helpers).
    pub fn tokenize_lut(&self, ps: &ParamSet, lut: &Lut3d) -> Result<CorrelationMatrix> {
        if lut.n() != DISTILL_GRID {
            return Err(Error::shape("tokenize_lut", DISTILL_GRID, lut.n()));
        }
        let mut g = Graph::new();
        let bp = ps.bind(&mut g, false);
        let grid = g.constant_f32(lut.values(), vec![lut.n().pow(3), 3]);
        let m = self.tokenize_lut_var(&mut g, &bp, grid)?;
        Ok(CorrelationMatrix::new(g.data(m).to_vec()))
    }

    pub fn tokenize_truth(&self, ps: &ParamSet, truth: &ImageRgb) -> Result<CorrelationMatrix> {
        let mut g = Graph::new();
        let bp = ps.bind(&mut g, false);
        let m = self.tokenize_truth_var(&mut g, &bp, truth)?;
        Ok(CorrelationMatrix::new(g.data(m).to_vec()))
    }
}

// ── teacher ─────────────────────────────────────────────────────────

/// Inference outputs of one teacher pass.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub enhanced: ImageRgb,
    pub fused: ImageRgb,
    pub v_hat: Lut3d,
}

pub struct TeacherGraph {
    pub fused: Var,
    pub enhanced: Var,
}

#[derive(Debug, Clone)]
pub struct TeacherNet {
    k: usize,
    proj_in: ConvSpec,
    encoder: Vec<ConvSpec>,
    proj_out: ConvSpec,
    inn: Vec<LinearSpec>,
    wp_convs: Vec<ConvSpec>,
    wp_fc: Vec<LinearSpec>,
    iw: ImageWeighter,
    basis_fields: Vec<Tensor>,
    basis: Vec<Lut3d>,
}

/// Fixed toned basis grids: neutral, gamma-0.6 brighten, gamma-1.8 darken.
pub fn basis_luts() -> Vec<Lut3d> {
    let ident = identity_lut(DISTILL_GRID).expect("valid grid size");
    let gamma = |gm: f32| {
        let values = ident.values().iter().map(|&v| v.powf(gm)).collect();
        Lut3d::new(DISTILL_GRID, values).expect("same shape")
    };
    vec![ident.clone(), gamma(0.6), gamma(1.8)]
}

/// (n³, 3) grid reshaped to a (1, 3n, n, n) conv input, matching the graph
/// op `lut_grid_to_field`.
fn lut_field_tensor(lut: &Lut3d) -> Tensor {
    let n = lut.n();
    let src = lut.values();
    let mut data = vec![0.0f32; 3 * n * n * n];
    for k in 0..n {
        for ch in 0..3 {
            let plane = &mut data[(k * 3 + ch) * n * n..(k * 3 + ch + 1) * n * n];
            for j in 0..n {
                for i in 0..n {
                    plane[j * n + i] = src[((k * n + j) * n + i) * 3 + ch];
                }
            }
        }
    }
    Tensor::from_vec(vec![1, 3 * n, n, n], data)
}

impl TeacherNet {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2);
        let proj_in = ConvSpec::new("encoder/proj_in", 3 * DISTILL_GRID, 24, 1, 1);
        let e = |i: usize| format!("encoder/conv{i}");
        let encoder = vec![
            ConvSpec::new(e(0), 24, 32, 3, 2),
            ConvSpec::new(e(1), 32, 48, 3, 2),
            ConvSpec::new(e(2), 48, 64, 3, 1),
            ConvSpec::new(e(3), 64, 96, 3, 1),
            ConvSpec::new(e(4), 96, 96, 3, 1),
        ];
        let proj_out = ConvSpec::new("encoder/proj_out", 96, 96, 1, 1);
        let width = 32;
        let mut inn = vec![LinearSpec::new("inn/fc0", LATENT_CHANNELS + 3, width)];
        for i in 1..4 {
            inn.push(LinearSpec::new(format!("inn/fc{i}"), width, width));
        }
        inn.push(LinearSpec::new("inn/fc4", width, 3));
        let w = |i: usize| format!("wp/conv{i}");
        let wp_convs = vec![
            ConvSpec::new(w(0), 3 * k, 16, 3, 2),
            ConvSpec::new(w(1), 16, 32, 3, 2),
            ConvSpec::new(w(2), 32, 64, 3, 2),
            ConvSpec::new(w(3), 64, 64, 3, 2),
        ];
        let wp_fc = vec![
            LinearSpec::new("wp/fc0", 64, 32),
            LinearSpec::new("wp/fc1", 32, 3),
        ];
        let iw = ImageWeighter::new("iw", k);
        let basis = basis_luts();
        let basis_fields = basis.iter().map(lut_field_tensor).collect();
        TeacherNet {
            k,
            proj_in,
            encoder,
            proj_out,
            inn,
            wp_convs,
            wp_fc,
            iw,
            basis_fields,
            basis,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn basis(&self) -> &[Lut3d] {
        &self.basis
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.proj_in.init(&mut ps, &mut rng);
        for c in &self.encoder {
            c.init(&mut ps, &mut rng);
        }
        self.proj_out.init(&mut ps, &mut rng);
        for l in &self.inn {
            l.init(&mut ps, &mut rng);
        }
        for c in &self.wp_convs {
            c.init(&mut ps, &mut rng);
        }
        for l in &self.wp_fc {
            l.init(&mut ps, &mut rng);
        }
        self.iw.init(&mut ps, &mut rng);
        ps
    }

    /// Basis grid field -> (12, 8, 8, 8) latent.
    fn encode_grid_var(&self, g: &mut Graph, bp: &Bound, field: Var) -> Result<Var> {
        let pooled = g.adaptive_avg_pool2d(field, 32, 32)?;
        let mut x = self.proj_in.apply(g, bp, pooled)?;
        x = g.relu(x);
        x = conv_stack(g, bp, &self.encoder, x)?;
        x = self.proj_out.apply(g, bp, x)?;
        Ok(g.reshape(x, vec![LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE, LATENT_SIDE]))
    }

    /// Fusion weights for the basis deltas: unconstrained 3-vector.
    pub fn predict_weights_var(&self, g: &mut Graph, bp: &Bound, stack: Var) -> Result<Var> {
        let x = conv_stack(g, bp, &self.wp_convs, stack)?;
        let pooled = g.global_avg_pool(x)?;
        let flat = g.reshape(pooled, vec![1, 64]);
        let mut y = self.wp_fc[0].apply(g, bp, flat)?;
        y = g.relu(y);
        y = self.wp_fc[1].apply(g, bp, y)?;
        Ok(g.reshape(y, vec![3]))
    }

    pub fn predict_weights(&self, ps: &ParamSet, images: &[ImageRgb]) -> Result<crate::lut::FusionWeights> {
        let stack128 = stack_to_input(images, STACK_SIDE)?;
        let mut g = Graph::new();
        let bp = ps.bind(&mut g, false);
        let sv = g.leaf(&stack128);
        let w = self.predict_weights_var(&mut g, &bp, sv)?;
        Ok(crate::lut::FusionWeights::new(g.data(w).to_vec()))
    }

    /// Enhanced-grid rows at the given coordinates: identity base plus the
    /// weight-blended basis deltas. With zeroed generator output layers this
    /// is exactly the identity grid for any predicted weights.
    fn fused_rows_var(
        &self,
        g: &mut Graph,
        bp: &Bound,
        weights: Var,
        coords: &Arc<Vec<f32>>,
        identity_rows: Vec<f32>,
    ) -> Result<Var> {
        let m = coords.len() / 3;
        let mut acc = g.constant_f32(&identity_rows, vec![m, 3]);
        for (bi, field) in self.basis_fields.iter().enumerate() {
            let fv = g.leaf(field);
            let latent = self.encode_grid_var(g, bp, fv)?;
            let delta = inn_delta(g, bp, &self.inn, latent, coords)?;
            let wi = g.slice_scalar(weights, bi);
            let scaled = g.mul_scalar_node(delta, wi);
            acc = g.add(acc, scaled);
        }
        Ok(acc)
    }

    /// Training pass: the LUT generator runs only at the lattice corners the
    /// fused image actually samples.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bp: &Bound,
        images: &[ImageRgb],
        stack128: &Tensor,
    ) -> Result<TeacherGraph> {
        let stack = g.leaf(stack128);
        let fused = self.iw.fuse(g, bp, stack, images)?;
        let plan = Arc::new(LutQueryPlan::build(g.data(fused), DISTILL_GRID));
        let coords = Arc::new(plan.coords_norm());
        let weights = self.predict_weights_var(g, bp, stack)?;
        let rows = self.fused_rows_var(g, bp, weights, &coords, plan.identity_rows())?;
        let enhanced = g.trilinear_rows(rows, fused, plan);
        Ok(TeacherGraph { fused, enhanced })
    }

    /// Full 64³ enhanced grid for one stack (the distillation target).
    pub fn v_hat(&self, ps: &ParamSet, images: &[ImageRgb]) -> Result<Lut3d> {
        let stack128 = stack_to_input(images, STACK_SIDE)?;
        let coords = GridCoords::full_lattice(DISTILL_GRID)?;
        let ident = identity_lut(DISTILL_GRID)?;
        let mut g = Graph::new();
        let bp = ps.bind(&mut g, false);
        let stack = g.leaf(&stack128);
        let weights = self.predict_weights_var(&mut g, &bp, stack)?;
        let rows = self.fused_rows_var(
            &mut g,
            &bp,
            weights,
            coords.coords(),
            ident.values().to_vec(),
        )?;
        Lut3d::new(DISTILL_GRID, g.data(rows).to_vec())
    }

    /// Full inference pass.
    pub fn forward(&self, ps: &ParamSet, images: &[ImageRgb]) -> Result<TeacherOutput> {
        let (h, w) = require_same_size(images)?;
        let v_hat = self.v_hat(ps, images)?;
        let stack128 = stack_to_input(images, STACK_SIDE)?;
        let mut g = Graph::new();
        let bp = ps.bind(&mut g, false);
        let stack = g.leaf(&stack128);
        let fused_var = self.iw.fuse(&mut g, &bp, stack, images)?;
        let fused = ImageRgb::new(h, w, g.data(fused_var).to_vec());
        let enhanced = crate::lut::apply(&v_hat, &fused);
        Ok(TeacherOutput {
            enhanced,
            fused,
            v_hat,
        })
    }
}

#[cfg(test)]
mod tests;
