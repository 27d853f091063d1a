//! The ε-prediction network.
//!
//! A residual MLP over `[z_t, time embedding, condition block]`:
//!
//! ```text
//! h_0     = x W_in + b_in
//! h_{l+1} = h_l + silu(SCLN_l(h_l, speaker)) W_l + b_l
//! eps     = h_L W_out + b_out          (W_out, b_out zero at init)
//! ```
//!
//! The condition block is `[content, mean f0 embedding, speaker]`, or the
//! learned null embedding when the condition is ∅. SCLN reads the speaker
//! slice of that block, so ∅ replaces the speaker path as well.
//!
//! Parameters live in one flat vector with a named layout; gradients use the
//! same layout, which keeps the optimizer, EMA and checkpointing generic.

pub mod optim;
pub mod scln;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::f0cond::F0_BINS;
use crate::rng;

pub use optim::{LrSchedule, Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub content: Vec<f64>,
    pub f0_bins: Vec<u8>,
    pub speaker: Vec<f64>,
    pub is_null: bool,
}

impl Condition {
    pub fn new(content: Vec<f64>, f0_bins: Vec<u8>, speaker: Vec<f64>) -> Self {
        Self { content, f0_bins, speaker, is_null: false }
    }

    /// The unconditional ∅.
    pub fn null() -> Self {
        Self { content: Vec::new(), f0_bins: Vec::new(), speaker: Vec::new(), is_null: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub content_dim: usize,
    pub f0_dim: usize,
    pub speaker_dim: usize,
    pub time_freqs: usize,
    pub time_dim: usize,
    /// Schedule length `T`; the time embedding sees `t / T`.
    pub steps: usize,
}

impl Arch {
    pub fn cond_dim(&self) -> usize {
        self.content_dim + self.f0_dim + self.speaker_dim
    }

    pub fn time_features(&self) -> usize {
        1 + 2 * self.time_freqs
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.time_dim + self.cond_dim()
    }

    fn speaker_offset(&self) -> usize {
        self.content_dim + self.f0_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("width", self.width),
            ("depth", self.depth),
            ("f0_dim", self.f0_dim),
            ("speaker_dim", self.speaker_dim),
            ("time_dim", self.time_dim),
            ("steps", self.steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    scale: usize,
    shift: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    time_w: usize,
    time_b: usize,
    f0_table: usize,
    null_embed: usize,
    input_w: usize,
    input_b: usize,
    blocks: Vec<BlockSlots>,
    output_w: usize,
    output_b: usize,
}

impl Layout {
    fn new(a: &Arch) -> Self {
        let mut specs = Vec::new();
        let mut total = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            specs.push(TensorSpec { name, rows, cols, offset: total });
            total += rows * cols;
            specs.len() - 1
        };
        let time_w = push("time.w".into(), a.time_features(), a.time_dim);
        let time_b = push("time.b".into(), 1, a.time_dim);
        let f0_table = push("f0_table".into(), F0_BINS, a.f0_dim);
        let null_embed = push("null_embed".into(), 1, a.cond_dim());
        let input_w = push("input.w".into(), a.input_dim(), a.width);
        let input_b = push("input.b".into(), 1, a.width);
        let blocks = (0..a.depth)
            .map(|l| BlockSlots {
                scale: push(format!("block{l}.scln_scale"), a.speaker_dim, a.width),
                shift: push(format!("block{l}.scln_shift"), a.speaker_dim, a.width),
                w: push(format!("block{l}.w"), a.width, a.width),
                b: push(format!("block{l}.b"), 1, a.width),
            })
            .collect();
        let output_w = push("output.w".into(), a.width, a.latent_dim);
        let output_b = push("output.b".into(), 1, a.latent_dim);
        Self { specs, total, time_w, time_b, f0_table, null_embed, input_w, input_b, blocks, output_w, output_b }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

fn view<'a>(data: &'a [f64], spec: &TensorSpec) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((spec.rows, spec.cols), &data[spec.range()]).expect("layout shape")
}

fn view_mut<'a>(data: &'a mut [f64], spec: &TensorSpec) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((spec.rows, spec.cols), &mut data[spec.range()]).expect("layout shape")
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    arch: Arch,
    layout: Arc<Layout>,
    params: Vec<f64>,
    // Identifies the parameter state a cache was produced from.
    stamp: u64,
}

impl PartialEq for DenoiserModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Per-parameter gradients in the model's flat layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(m: &DenoiserModel) -> Self {
        Self { layout: m.layout.clone(), data: vec![0.0; m.params.len()] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.layout.find(name).map(|s| view(&self.data, s))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }

    fn add(&mut self, slot: usize, value: ArrayView2<f64>) {
        let spec = &self.layout.specs[slot];
        let mut v = view_mut(&mut self.data, spec);
        v += &value;
    }
}

struct BlockCache {
    scln: scln::SclnForward,
    act: Array2<f64>,
}

/// Activations retained by [`DenoiserModel::eval`] for an exact backward pass.
pub struct Cache {
    stamp: u64,
    batch: usize,
    feats: Array2<f64>,
    speaker: Array2<f64>,
    x: Array2<f64>,
    blocks: Vec<BlockCache>,
    h_last: Array2<f64>,
    null_rows: Vec<bool>,
    f0_bins: Vec<Vec<u8>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[u, sin(π 2^j u), cos(π 2^j u)]` with `u = t / T`.
pub fn time_features(t: usize, arch: &Arch) -> Vec<f64> {
    let u = t as f64 / arch.steps as f64;
    let mut f = Vec::with_capacity(arch.time_features());
    f.push(u);
    for j in 0..arch.time_freqs {
        let w = std::f64::consts::PI * (1u64 << j) as f64;
        f.push((w * u).sin());
        f.push((w * u).cos());
    }
    f
}

impl DenoiserModel {
    /// Fresh model with the output layer and SCLN projections at zero, so the
    /// untrained network predicts ε = 0 and SCLN starts as plain layer norm.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Arc::new(Layout::new(&arch));
        let mut params = vec![0.0; layout.total];
        let mut g = rng::stream(seed, rng::streams::INIT);
        let mut fill = |params: &mut [f64], slot: usize, std: f64| {
            for p in &mut params[layout.specs[slot].range()] {
                *p = std * rng::normal(&mut g);
            }
        };
        let fan = |slot: usize| (1.0 / layout.specs[slot].rows as f64).sqrt();
        fill(&mut params, layout.time_w, fan(layout.time_w));
        fill(&mut params, layout.f0_table, 1.0);
        fill(&mut params, layout.null_embed, 1.0);
        fill(&mut params, layout.input_w, fan(layout.input_w));
        for b in &layout.blocks {
            fill(&mut params, b.w, 0.5 * fan(b.w));
        }
        Ok(Self { arch, layout, params, stamp: fresh_stamp() })
    }

    /// Every tensor drawn at random, including the zero-initialized ones.
    /// Used by gradient checks so that no path is trivially zero.
    pub fn with_random_params(arch: Arch, seed: u64, std: f64) -> Result<Self> {
        let mut m = Self::new(arch, seed)?;
        let mut g = rng::stream(seed, rng::streams::INIT + 100);
        for p in &mut m.params {
            *p += std * rng::normal(&mut g);
        }
        m.stamp = fresh_stamp();
        Ok(m)
    }

    /// Rebuilds a model from named tensors; every layout tensor must be present.
    pub fn from_tensors<'a>(arch: Arch, tensors: impl IntoIterator<Item = (&'a str, (usize, usize), &'a [f64])>) -> Result<Self> {
        arch.validate()?;
        let layout = Arc::new(Layout::new(&arch));
        let mut params = vec![f64::NAN; layout.total];
        let mut seen = vec![false; layout.specs.len()];
        for (name, shape, data) in tensors {
            let idx = layout
                .specs
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            let spec = &layout.specs[idx];
            if shape != (spec.rows, spec.cols) || data.len() != spec.len() {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected {}x{}, got {}x{}",
                    spec.rows, spec.cols, shape.0, shape.1
                )));
            }
            params[spec.range()].copy_from_slice(data);
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing tensor {}", layout.specs[i].name)));
        }
        let m = Self { arch, layout, params, stamp: fresh_stamp() };
        m.check_finite()?;
        Ok(m)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.layout.find(name).map(|s| view(&self.params, s))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorSpec, &[f64])> {
        self.layout.specs.iter().map(move |s| (s, &self.params[s.range()]))
    }

    /// SHA-256 over the architecture and the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(Error::Divergence(format!("non-finite parameter at index {i}"))),
            None => Ok(()),
        }
    }

    fn v(&self, slot: usize) -> ArrayView2<'_, f64> {
        view(&self.params, &self.layout.specs[slot])
    }

    fn condition_row(&self, c: &Condition, out: &mut [f64]) -> Result<()> {
        let a = &self.arch;
        if c.is_null {
            out.copy_from_slice(&self.params[self.layout.specs[self.layout.null_embed].range()]);
            return Ok(());
        }
        if c.content.len() != a.content_dim || c.speaker.len() != a.speaker_dim || c.f0_bins.is_empty() {
            return Err(Error::Shape(format!(
                "condition has content {} / speaker {} / {} f0 frames, model expects {} / {} / >=1",
                c.content.len(),
                c.speaker.len(),
                c.f0_bins.len(),
                a.content_dim,
                a.speaker_dim
            )));
        }
        out[..a.content_dim].copy_from_slice(&c.content);
        let table = self.v(self.layout.f0_table);
        let f0 = &mut out[a.content_dim..a.speaker_offset()];
        f0.fill(0.0);
        let inv = 1.0 / c.f0_bins.len() as f64;
        for &b in &c.f0_bins {
            for (o, w) in f0.iter_mut().zip(table.row(b as usize)) {
                *o += inv * w;
            }
        }
        out[a.speaker_offset()..].copy_from_slice(&c.speaker);
        Ok(())
    }

    /// Evaluates `ε_θ(z_t, t, c)` for a batch of rows.
    pub fn eval(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Condition]) -> Result<(Array2<f64>, Cache)> {
        let a = &self.arch;
        let batch = z.nrows();
        if z.ncols() != a.latent_dim {
            return Err(Error::Shape(format!("latent dim {} vs model {}", z.ncols(), a.latent_dim)));
        }
        if t.len() != batch || cond.len() != batch {
            return Err(Error::Shape(format!("{batch} rows, {} steps, {} conditions", t.len(), cond.len())));
        }
        if let Some(&bad) = t.iter().find(|&&t| t > a.steps) {
            return Err(Error::StepOutOfRange { t: bad, max: a.steps });
        }

        let mut feats = Array2::zeros((batch, a.time_features()));
        for (mut row, &ti) in feats.rows_mut().into_iter().zip(t) {
            row.assign(&ndarray::Array1::from(time_features(ti, a)));
        }
        let temb = feats.dot(&self.v(self.layout.time_w)) + self.v(self.layout.time_b);

        let mut x = Array2::zeros((batch, a.input_dim()));
        x.slice_mut(s![.., ..a.latent_dim]).assign(&z);
        x.slice_mut(s![.., a.latent_dim..a.latent_dim + a.time_dim]).assign(&temb);
        let cond_start = a.latent_dim + a.time_dim;
        for (i, c) in cond.iter().enumerate() {
            let mut row = x.row_mut(i);
            let slice = row.slice_mut(s![cond_start..]);
            let out = slice.into_slice().expect("contiguous row");
            self.condition_row(c, out)?;
        }
        let speaker = x.slice(s![.., cond_start + a.speaker_offset()..]).to_owned();

        let mut h = x.dot(&self.v(self.layout.input_w)) + self.v(self.layout.input_b);
        let mut blocks = Vec::with_capacity(a.depth);
        for b in &self.layout.blocks {
            let fwd = scln::forward(h.view(), speaker.view(), self.v(b.scale), self.v(b.shift));
            let act = fwd.out.mapv(silu);
            h = h + act.dot(&self.v(b.w)) + self.v(b.b);
            blocks.push(BlockCache { scln: fwd, act });
        }
        let out = h.dot(&self.v(self.layout.output_w)) + self.v(self.layout.output_b);

        let cache = Cache {
            stamp: self.stamp,
            batch,
            feats,
            speaker,
            x,
            blocks,
            h_last: h,
            null_rows: cond.iter().map(|c| c.is_null).collect(),
            f0_bins: cond.iter().map(|c| if c.is_null { Vec::new() } else { c.f0_bins.clone() }).collect(),
        };
        Ok((out, cache))
    }

    /// Gradients of a scalar loss whose gradient w.r.t. the output is `grad_out`.
    pub fn backward(&self, cache: &Cache, grad_out: ArrayView2<f64>) -> Result<Gradients> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache("cache was produced by a different parameter state".into()));
        }
        if grad_out.dim() != (cache.batch, self.arch.latent_dim) {
            return Err(Error::StaleCache(format!(
                "grad_out shape {:?} does not match cached batch {}x{}",
                grad_out.dim(),
                cache.batch,
                self.arch.latent_dim
            )));
        }
        let a = &self.arch;
        let l = &self.layout;
        let mut grads = Gradients::zeros_like(self);

        grads.add(l.output_w, cache.h_last.t().dot(&grad_out).view());
        grads.add(l.output_b, grad_out.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        let mut dh = grad_out.dot(&self.v(l.output_w).t());
        let mut d_speaker = Array2::<f64>::zeros(cache.speaker.dim());

        for (slots, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            grads.add(slots.w, bc.act.t().dot(&dh).view());
            grads.add(slots.b, dh.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
            let d_act = dh.dot(&self.v(slots.w).t());
            let d_pre = &d_act * &bc.scln.out.mapv(silu_grad);
            let sg = scln::backward(d_pre.view(), &bc.scln, cache.speaker.view(), self.v(slots.scale), self.v(slots.shift));
            grads.add(slots.scale, sg.d_scale_w.view());
            grads.add(slots.shift, sg.d_shift_w.view());
            d_speaker += &sg.d_speaker;
            dh += &sg.d_h;
        }

        grads.add(l.input_w, cache.x.t().dot(&dh).view());
        grads.add(l.input_b, dh.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        let dx = dh.dot(&self.v(l.input_w).t());

        let d_temb = dx.slice(s![.., a.latent_dim..a.latent_dim + a.time_dim]);
        grads.add(l.time_w, cache.feats.t().dot(&d_temb).view());
        grads.add(l.time_b, d_temb.sum_axis(Axis(0)).insert_axis(Axis(0)).view());

        let cond_start = a.latent_dim + a.time_dim;
        let mut d_cond = dx.slice(s![.., cond_start..]).to_owned();
        {
            let mut spk = d_cond.slice_mut(s![.., a.speaker_offset()..]);
            spk += &d_speaker;
        }

        let null_spec = l.specs[l.null_embed].clone();
        let f0_spec = l.specs[l.f0_table].clone();
        for (i, row) in d_cond.rows().into_iter().enumerate() {
            if cache.null_rows[i] {
                for (g, d) in grads.data[null_spec.range()].iter_mut().zip(row.iter()) {
                    *g += d;
                }
            } else {
                let bins = &cache.f0_bins[i];
                let inv = 1.0 / bins.len() as f64;
                let d_f0 = row.slice(s![a.content_dim..a.speaker_offset()]);
                let mut table = view_mut(&mut grads.data, &f0_spec);
                for &b in bins {
                    table.row_mut(b as usize).scaled_add(inv, &d_f0);
                }
            }
        }
        Ok(grads)
    }

    /// `θ ← optimizer(θ, ∇θ, η)`. Non-finite gradients abort without mutation.
    pub fn update(&mut self, grads: &Gradients, optimizer: &mut Optimizer, lr: f64) -> Result<()> {
        if grads.data.len() != self.params.len() {
            return Err(Error::Shape("gradient layout does not match model".into()));
        }
        optimizer.apply(&mut self.params, &grads.data, lr)?;
        self.stamp = fresh_stamp();
        self.check_finite()
    }

    /// `self ← μ·self + (1 − μ)·online`, element-wise.
    pub fn ema_from(&mut self, online: &DenoiserModel, mu: f64) -> Result<()> {
        if self.arch != online.arch {
            return Err(Error::Shape("EMA target and online model differ in architecture".into()));
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = mu * *t + (1.0 - mu) * o;
        }
        self.stamp = fresh_stamp();
        Ok(())
    }
}

#[cfg(test)]
mod tests;
