//! Masked-reconstruction vision transformer.
//!
//! An asymmetric encoder/decoder over ROI patches: the encoder sees only the
//! visible patches (plus a class token), the decoder fills mask tokens back in
//! and predicts pixel values and Sobel edge magnitudes for every masked patch.
//! The training loss is mean squared error on both heads, edges weighted by
//! `lambda_edge`. Forward and backward passes are hand-rolled; gradients are
//! returned in a parameter-shaped struct.

pub mod optim;
pub mod vit;

use crate::error::{Error, Result};
use crate::patching::{MaskPlan, PatchGrid};
use crate::scalar::Scalar;
use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vit::{block_backward, block_forward, BlockCache, BlockParams};

const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters. The positional table is derived from the
/// image geometry, so a model is tied to one image shape and patch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub lambda_edge: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 8,
            embed_dim: 128,
            encoder_depth: 4,
            decoder_depth: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            lambda_edge: 0.1,
            image_height: 256,
            image_width: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::config(format!(
                "patch size {} does not tile a {}x{} image",
                self.patch_size, self.image_height, self.image_width
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::config("embed_dim must be a positive multiple of 4"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config("num_heads must divide embed_dim"));
        }
        if self.encoder_depth == 0 {
            return Err(Error::config("encoder needs at least one block"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if !(self.lambda_edge.is_finite() && self.lambda_edge >= 0.0) {
            return Err(Error::config("lambda_edge must be nonnegative"));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Patch lattice shape (rows, cols) over the full image.
    pub fn lattice_dims(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    /// Positional slots: one per lattice cell plus slot 0 for the class token.
    pub fn n_slots(&self) -> usize {
        let (r, c) = self.lattice_dims();
        r * c + 1
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Fixed 2D sin-cos positional table, (n_slots, embed_dim). Slot 0 (class
/// token) is all zeros; lattice slots concatenate a row encoding over the
/// first half of the channels with a column encoding over the second half.
pub fn positional_table<T: Scalar>(cfg: &ModelConfig) -> Array2<T> {
    let d = cfg.embed_dim;
    let (rows, cols) = cfg.lattice_dims();
    let mut table = Array2::zeros((cfg.n_slots(), d));
    let mut buf = vec![0.0f64; d];
    for r in 0..rows {
        for c in 0..cols {
            sincos_axis(r as f64, &mut buf[..d / 2]);
            sincos_axis(c as f64, &mut buf[d / 2..]);
            let slot = 1 + r * cols + c;
            for (j, &v) in buf.iter().enumerate() {
                table[(slot, j)] = T::from_real(v);
            }
        }
    }
    table
}

fn sincos_axis(pos: f64, out: &mut [f64]) {
    let quarter = out.len() / 2;
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        out[i] = (pos * omega).sin();
        out[quarter + i] = (pos * omega).cos();
    }
}

/// All model weights plus the fixed positional table. The same struct holds
/// gradients (with `pos` ignored) so optimizer state can mirror it.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    /// (P^2, D) linear patch embedding.
    pub patch_w: Array2<T>,
    pub patch_b: Array2<T>,
    pub cls: Array2<T>,
    pub mask: Array2<T>,
    /// Fixed sin-cos table; not trainable, absent from `tensor_slices`.
    pub pos: Array2<T>,
    pub encoder: Vec<BlockParams<T>>,
    pub decoder: Vec<BlockParams<T>>,
    /// (D, P^2) pixel prediction head.
    pub px_w: Array2<T>,
    pub px_b: Array2<T>,
    /// (D, P^2) edge magnitude prediction head.
    pub edge_w: Array2<T>,
    pub edge_b: Array2<T>,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b", "ln2_g", "ln2_b", "mlp1_w", "mlp1_b",
    "mlp2_w", "mlp2_b",
];

fn block_arrays<T>(b: &BlockParams<T>) -> [&Array2<T>; 12] {
    [
        &b.ln1_g, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_g, &b.ln2_b,
        &b.mlp1_w, &b.mlp1_b, &b.mlp2_w, &b.mlp2_b,
    ]
}

fn block_arrays_mut<T>(b: &mut BlockParams<T>) -> [&mut Array2<T>; 12] {
    [
        &mut b.ln1_g, &mut b.ln1_b, &mut b.qkv_w, &mut b.qkv_b, &mut b.proj_w, &mut b.proj_b,
        &mut b.ln2_g, &mut b.ln2_b, &mut b.mlp1_w, &mut b.mlp1_b, &mut b.mlp2_w, &mut b.mlp2_b,
    ]
}

fn flat<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("parameter tensors are standard layout")
}

fn flat_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("parameter tensors are standard layout")
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero weights (layer norm gains included), with the fixed positional
    /// table built from the config.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p2 = cfg.pixels_per_patch();
        let h = cfg.hidden_dim();
        Ok(ModelParams {
            pos: positional_table(&cfg),
            patch_w: Array2::zeros((p2, d)),
            patch_b: Array2::zeros((1, d)),
            cls: Array2::zeros((1, d)),
            mask: Array2::zeros((1, d)),
            encoder: (0..cfg.encoder_depth).map(|_| BlockParams::zeros(d, h)).collect(),
            decoder: (0..cfg.decoder_depth).map(|_| BlockParams::zeros(d, h)).collect(),
            px_w: Array2::zeros((d, p2)),
            px_b: Array2::zeros((1, p2)),
            edge_w: Array2::zeros((d, p2)),
            edge_b: Array2::zeros((1, p2)),
            cfg,
        })
    }

    /// Random init: truncated normal (sigma 0.02, clipped at two sigma) for
    /// weight matrices and tokens, ones for layer norm gains, zeros for biases.
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid sigma");
        fill_trunc_normal(&mut p.patch_w, rng, &normal);
        fill_trunc_normal(&mut p.cls, rng, &normal);
        fill_trunc_normal(&mut p.mask, rng, &normal);
        for b in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            b.ln1_g.fill(T::one());
            b.ln2_g.fill(T::one());
            fill_trunc_normal(&mut b.qkv_w, rng, &normal);
            fill_trunc_normal(&mut b.proj_w, rng, &normal);
            fill_trunc_normal(&mut b.mlp1_w, rng, &normal);
            fill_trunc_normal(&mut b.mlp2_w, rng, &normal);
        }
        fill_trunc_normal(&mut p.px_w, rng, &normal);
        fill_trunc_normal(&mut p.edge_w, rng, &normal);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cfg.clone()).expect("existing config is valid")
    }

    /// Trainable tensors as named flat slices, in a stable order shared with
    /// `tensor_slices_mut`. The positional table is excluded.
    pub fn tensor_slices(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![
            ("patch_w".into(), flat(&self.patch_w)),
            ("patch_b".into(), flat(&self.patch_b)),
            ("cls".into(), flat(&self.cls)),
            ("mask".into(), flat(&self.mask)),
        ];
        for (prefix, blocks) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (i, b) in blocks.iter().enumerate() {
                for (name, arr) in BLOCK_FIELDS.iter().zip(block_arrays(b)) {
                    out.push((format!("{prefix}.{i}.{name}"), flat(arr)));
                }
            }
        }
        out.push(("px_w".into(), flat(&self.px_w)));
        out.push(("px_b".into(), flat(&self.px_b)));
        out.push(("edge_w".into(), flat(&self.edge_w)));
        out.push(("edge_b".into(), flat(&self.edge_b)));
        out
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = vec![
            ("patch_w".into(), flat_mut(&mut self.patch_w)),
            ("patch_b".into(), flat_mut(&mut self.patch_b)),
            ("cls".into(), flat_mut(&mut self.cls)),
            ("mask".into(), flat_mut(&mut self.mask)),
        ];
        for (prefix, blocks) in [("enc", &mut self.encoder), ("dec", &mut self.decoder)] {
            for (i, b) in blocks.iter_mut().enumerate() {
                for (name, arr) in BLOCK_FIELDS.iter().zip(block_arrays_mut(b)) {
                    out.push((format!("{prefix}.{i}.{name}"), flat_mut(arr)));
                }
            }
        }
        out.push(("px_w".into(), flat_mut(&mut self.px_w)));
        out.push(("px_b".into(), flat_mut(&mut self.px_b)));
        out.push(("edge_w".into(), flat_mut(&mut self.edge_w)));
        out.push(("edge_b".into(), flat_mut(&mut self.edge_b)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensor_slices().iter().map(|(_, s)| s.len()).sum()
    }
}

fn fill_trunc_normal<T: Scalar>(a: &mut Array2<T>, rng: &mut ChaCha8Rng, normal: &Normal<f64>) {
    for v in a.iter_mut() {
        *v = T::from_real(loop {
            let draw = normal.sample(rng);
            if draw.abs() <= 2.0 * INIT_STD {
                break draw;
            }
        });
    }
}

/// Sobel gradient magnitude with replicate padding.
pub fn sobel<T: Scalar>(img: &Array2<T>) -> Array2<T> {
    let (h, w) = img.dim();
    let at = |y: isize, x: isize| -> T {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        img[(yy, xx)]
    };
    let two = T::from_real(2.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let gx = at(y - 1, x + 1) - at(y - 1, x - 1)
            + two * (at(y, x + 1) - at(y, x - 1))
            + at(y + 1, x + 1)
            - at(y + 1, x - 1);
        let gy = at(y + 1, x - 1) - at(y - 1, x - 1)
            + two * (at(y + 1, x) - at(y - 1, x))
            + at(y + 1, x + 1)
            - at(y - 1, x + 1);
        (gx * gx + gy * gy).sqrt()
    })
}

fn check_compat<T: Scalar>(
    p: &ModelParams<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
) -> Result<()> {
    let shape = (p.cfg.image_height, p.cfg.image_width);
    if image.dim() != shape || grid.image_shape() != shape {
        return Err(Error::precondition(format!(
            "model is built for {shape:?}, got image {:?} and grid {:?}",
            image.dim(),
            grid.image_shape()
        )));
    }
    if grid.patch_size() != p.cfg.patch_size {
        return Err(Error::precondition("grid patch size does not match the model"));
    }
    Ok(())
}

fn check_indices(idx: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::argument(format!("patch index {i} out of range")));
        }
        if seen[i] {
            return Err(Error::argument(format!("patch index {i} repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}

struct EncodeState<T> {
    x_vis: Array2<T>,
    tokens: Array2<T>,
    caches: Vec<BlockCache<T>>,
}

fn encode_inner<T: Scalar>(
    p: &ModelParams<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
    visible: &[usize],
) -> Result<EncodeState<T>> {
    check_compat(p, image, grid)?;
    check_indices(visible, grid.n_patches())?;
    let d = p.cfg.embed_dim;
    let p2 = p.cfg.pixels_per_patch();
    let v = visible.len();

    let mut x_vis = Array2::zeros((v, p2));
    for (j, &pi) in visible.iter().enumerate() {
        for (k, val) in grid.masked_patch(image, pi).into_iter().enumerate() {
            x_vis[(j, k)] = val;
        }
    }
    let emb = x_vis.dot(&p.patch_w) + &p.patch_b;

    let mut tokens = Array2::zeros((v + 1, d));
    for k in 0..d {
        tokens[(0, k)] = p.cls[(0, k)]; // class slot of the positional table is zero
    }
    for (j, &pi) in visible.iter().enumerate() {
        let slot = grid.lattice_slot(pi);
        for k in 0..d {
            tokens[(1 + j, k)] = emb[(j, k)] + p.pos[(slot, k)];
        }
    }

    let mut caches = Vec::with_capacity(p.encoder.len());
    for b in &p.encoder {
        let (next, cache) = block_forward(b, &tokens, p.cfg.num_heads);
        tokens = next;
        caches.push(cache);
    }
    Ok(EncodeState { x_vis, tokens, caches })
}

/// Encoder tokens for the given visible patches: row 0 is the class token,
/// row 1 + j the j-th visible patch, in the order given.
pub fn encode<T: Scalar>(
    p: &ModelParams<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
    visible: &[usize],
) -> Result<Array2<T>> {
    Ok(encode_inner(p, image, grid, visible)?.tokens)
}

struct DecodeState<T> {
    tokens: Array2<T>,
    caches: Vec<BlockCache<T>>,
}

fn decode_inner<T: Scalar>(
    p: &ModelParams<T>,
    enc_tokens: &Array2<T>,
    grid: &PatchGrid,
    plan: &MaskPlan,
) -> Result<DecodeState<T>> {
    plan.validate(grid.n_patches())?;
    let d = p.cfg.embed_dim;
    let v = plan.visible.len();
    let m = plan.masked.len();
    if enc_tokens.dim() != (v + 1, d) {
        return Err(Error::argument(format!(
            "expected {} encoder tokens of width {d}, got {:?}",
            v + 1,
            enc_tokens.dim()
        )));
    }

    let mut tokens = Array2::zeros((1 + v + m, d));
    for k in 0..d {
        tokens[(0, k)] = enc_tokens[(0, k)];
    }
    for (j, &pi) in plan.visible.iter().enumerate() {
        let slot = grid.lattice_slot(pi);
        for k in 0..d {
            tokens[(1 + j, k)] = enc_tokens[(1 + j, k)] + p.pos[(slot, k)];
        }
    }
    for (j, &pi) in plan.masked.iter().enumerate() {
        let slot = grid.lattice_slot(pi);
        for k in 0..d {
            tokens[(1 + v + j, k)] = p.mask[(0, k)] + p.pos[(slot, k)];
        }
    }

    let mut caches = Vec::with_capacity(p.decoder.len());
    for b in &p.decoder {
        let (next, cache) = block_forward(b, &tokens, p.cfg.num_heads);
        tokens = next;
        caches.push(cache);
    }
    Ok(DecodeState { tokens, caches })
}

/// Pixel and edge predictions, one row per masked patch in `plan.masked`
/// order. `enc_tokens` must come from `encode` over `plan.visible`.
pub fn decode<T: Scalar>(
    p: &ModelParams<T>,
    enc_tokens: &Array2<T>,
    grid: &PatchGrid,
    plan: &MaskPlan,
) -> Result<(Array2<T>, Array2<T>)> {
    let state = decode_inner(p, enc_tokens, grid, plan)?;
    let h = state.tokens.slice(s![1 + plan.visible.len().., ..]);
    Ok((h.dot(&p.px_w) + &p.px_b, h.dot(&p.edge_w) + &p.edge_b))
}

/// A composed reconstruction plus the raw per-patch head outputs.
#[derive(Debug, Clone)]
pub struct Reconstruction<T> {
    pub image: Array2<T>,
    /// (M, P^2) pixel predictions in `plan.masked` order.
    pub pixel: Array2<T>,
    pub edge: Array2<T>,
}

/// Run the full model for one plan and splice the predictions into the image.
pub fn reconstruct<T: Scalar>(
    p: &ModelParams<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
    plan: &MaskPlan,
) -> Result<Reconstruction<T>> {
    let enc = encode(p, image, grid, &plan.visible)?;
    let (pixel, edge) = decode(p, &enc, grid, plan)?;
    let composed = compose_reconstruction(image, grid, plan, &pixel)?;
    Ok(Reconstruction { image: composed, pixel, edge })
}

/// Splice pixel predictions into the image: ROI pixels of masked patches take
/// the predicted value clipped to [0, 1], everything else keeps the input.
pub fn compose_reconstruction<T: Scalar>(
    image: &Array2<T>,
    grid: &PatchGrid,
    plan: &MaskPlan,
    pixel_pred: &Array2<T>,
) -> Result<Array2<T>> {
    plan.validate(grid.n_patches())?;
    if image.dim() != grid.image_shape() {
        return Err(Error::argument("image shape does not match grid"));
    }
    let p2 = grid.patch_size() * grid.patch_size();
    if pixel_pred.dim() != (plan.masked.len(), p2) {
        return Err(Error::argument(format!(
            "expected {} prediction rows of {p2} pixels, got {:?}",
            plan.masked.len(),
            pixel_pred.dim()
        )));
    }
    let roi = grid.roi();
    let mut out = image.clone();
    for (m, &pi) in plan.masked.iter().enumerate() {
        for (k, (y, x)) in grid.pixels(pi).enumerate() {
            if roi[(y, x)] == 1 {
                out[(y, x)] = pixel_pred[(m, k)].max(T::zero()).min(T::one());
            }
        }
    }
    Ok(out)
}

/// Loss values in f64 regardless of the model scalar type.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub edge: f64,
    /// (patch index, contribution to `total`) per masked patch.
    pub per_patch: Vec<(usize, f64)>,
}

impl LossBreakdown {
    fn empty() -> Self {
        LossBreakdown { total: 0.0, mse: 0.0, edge: 0.0, per_patch: Vec::new() }
    }
}

struct TrainState<T> {
    enc: EncodeState<T>,
    dec: DecodeState<T>,
    pixel: Array2<T>,
    edge: Array2<T>,
    targets: Array2<T>,
    edge_targets: Array2<T>,
}

fn forward_train<T: Scalar>(
    p: &ModelParams<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
    plan: &MaskPlan,
) -> Result<TrainState<T>> {
    let enc = encode_inner(p, image, grid, &plan.visible)?;
    let dec = decode_inner(p, &enc.tokens, grid, plan)?;
    let h = dec.tokens.slice(s![1 + plan.visible.len().., ..]);
    let pixel = h.dot(&p.px_w) + &p.px_b;
    let edge = h.dot(&p.edge_w) + &p.edge_b;

    let ps = grid.patch_size();
    let p2 = ps * ps;
    let m = plan.masked.len();
    let mut targets = Array2::zeros((m, p2));
    let mut edge_targets = Array2::zeros((m, p2));
    for (row, &pi) in plan.masked.iter().enumerate() {
        let t = grid.masked_patch(image, pi);
        let patch = Array2::from_shape_vec((ps, ps), t).expect("patch is P^2 long");
        let e = sobel(&patch);
        for (k, (&tv, &ev)) in patch.iter().zip(e.iter()).enumerate() {
            targets[(row, k)] = tv;
            edge_targets[(row, k)] = ev;
        }
    }
    Ok(TrainState { enc, dec, pixel, edge, targets, edge_targets })
}

fn breakdown<T: Scalar>(state: &TrainState<T>, plan: &MaskPlan, lambda: f64) -> LossBreakdown {
    let m = plan.masked.len();
    let p2 = state.pixel.ncols();
    let inv = 1.0 / (m * p2) as f64;
    let mut mse_sum = 0.0;
    let mut edge_sum = 0.0;
    let mut per_patch = Vec::with_capacity(m);
    for row in 0..m {
        let mut s_mse = 0.0;
        let mut s_edge = 0.0;
        for k in 0..p2 {
            let dp = (state.pixel[(row, k)] - state.targets[(row, k)]).to_real();
            let de = (state.edge[(row, k)] - state.edge_targets[(row, k)]).to_real();
            s_mse += dp * dp;
            s_edge += de * de;
        }
        mse_sum += s_mse;
        edge_sum += s_edge;
        per_patch.push((plan.masked[row], (s_mse + lambda * s_edge) * inv));
    }
    let mse = mse_sum * inv;
    let edge = edge_sum * inv;
    LossBreakdown { total: mse + lambda * edge, mse, edge, per_patch }
}

/// Dual-head reconstruction loss for one plan, forward only.
pub fn recon_loss<T: Scalar>(
    p: &ModelParams<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
    plan: &MaskPlan,
) -> Result<LossBreakdown> {
    plan.validate(grid.n_patches())?;
    if plan.masked.is_empty() {
        return Ok(LossBreakdown::empty());
    }
    let state = forward_train(p, image, grid, plan)?;
    Ok(breakdown(&state, plan, p.cfg.lambda_edge))
}

/// Loss plus gradients for every trainable tensor. A plan with no masked
/// patches yields zero loss and zero gradients.
pub fn loss_and_grads<T: Scalar>(
    p: &ModelParams<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
    plan: &MaskPlan,
) -> Result<(LossBreakdown, ModelParams<T>)> {
    plan.validate(grid.n_patches())?;
    if plan.masked.is_empty() {
        return Ok((LossBreakdown::empty(), p.zeros_like()));
    }
    let state = forward_train(p, image, grid, plan)?;
    let loss = breakdown(&state, plan, p.cfg.lambda_edge);

    let d = p.cfg.embed_dim;
    let heads = p.cfg.num_heads;
    let v = plan.visible.len();
    let m = plan.masked.len();
    let scale = T::from_real(2.0 / (m * state.pixel.ncols()) as f64);
    let lambda = T::from_real(p.cfg.lambda_edge);
    let mut g = p.zeros_like();

    let dpixel = (&state.pixel - &state.targets) * scale;
    let dedge = (&state.edge - &state.edge_targets) * (scale * lambda);
    let h_rows = state.dec.tokens.slice(s![1 + v.., ..]);
    g.px_w = h_rows.t().dot(&dpixel);
    g.px_b = dpixel.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.edge_w = h_rows.t().dot(&dedge);
    g.edge_b = dedge.sum_axis(Axis(0)).insert_axis(Axis(0));

    let mut ddec = Array2::zeros(state.dec.tokens.raw_dim());
    ddec.slice_mut(s![1 + v.., ..])
        .assign(&(dpixel.dot(&p.px_w.t()) + dedge.dot(&p.edge_w.t())));
    for i in (0..p.decoder.len()).rev() {
        ddec = block_backward(&p.decoder[i], &state.dec.caches[i], &ddec, &mut g.decoder[i], heads);
    }

    let mut denc = Array2::zeros((v + 1, d));
    for k in 0..d {
        denc[(0, k)] = ddec[(0, k)];
    }
    for j in 0..v {
        for k in 0..d {
            denc[(1 + j, k)] = ddec[(1 + j, k)];
        }
    }
    for j in 0..m {
        for k in 0..d {
            g.mask[(0, k)] += ddec[(1 + v + j, k)];
        }
    }

    for i in (0..p.encoder.len()).rev() {
        denc = block_backward(&p.encoder[i], &state.enc.caches[i], &denc, &mut g.encoder[i], heads);
    }
    for k in 0..d {
        g.cls[(0, k)] = denc[(0, k)];
    }
    let dtok = denc.slice(s![1.., ..]);
    g.patch_w = state.enc.x_vis.t().dot(&dtok);
    g.patch_b = dtok.sum_axis(Axis(0)).insert_axis(Axis(0));

    Ok((loss, g))
}
