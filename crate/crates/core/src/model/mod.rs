//! The neural repair model: a small pre-norm transformer over the variable
//! sequence.
//!
//! Token `i` is `value_emb[x_i] + pos_emb[i] + m_i * flag_emb` (plus
//! `conflicts_i * conflict_proj` when the structural feature is enabled).
//! Each block is `h += MHA(LN(h)); h += FFN(LN(h))` with a GELU feed-forward,
//! and logits are `h @ output_head`.
//!
//! Parameters live in one flat `f64` buffer described by a [`Layout`]; the
//! optimizer, the model file and the gradient checks all work on that
//! buffer directly.

mod format;
mod gumbel;
mod train;

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csp::{self, Assignment, CspInstance};
use crate::destroy::DestroyMask;
use crate::diff::LogitMatrix;
use crate::error::{Error, Result};

pub use format::{load_model, load_model_file, save_model, save_model_file, FORMAT_VERSION, MAGIC};
pub use gumbel::{gumbel_softmax_sample, gumbel_softmax_with_noise, GumbelSample};
pub use train::{sample_loss_and_grad, TauSchedule, TrainConfig, TrainSample, Trainer};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Domain size `d`.
    pub num_values: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Longest sequence the model accepts.
    pub max_len: usize,
    pub ff_width: usize,
    /// Add learned position embeddings. Graph models turn this off since
    /// vertex indices carry no meaning across instances.
    pub positional: bool,
    /// Add a projected per-variable count of violated constraints.
    pub conflict_feature: bool,
}

impl ModelConfig {
    /// Two blocks of width 64 with four heads.
    pub fn desk(num_values: usize) -> Self {
        ModelConfig {
            num_values,
            width: 64,
            heads: 4,
            blocks: 2,
            max_len: 256,
            ff_width: 128,
            positional: true,
            conflict_feature: false,
        }
    }

    /// Desk defaults adjusted for a problem kind.
    pub fn for_kind(kind: csp::ProblemKind, num_values: usize) -> Self {
        let mut cfg = Self::desk(num_values);
        if kind.is_graph() {
            cfg.positional = false;
            cfg.conflict_feature = true;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_values", self.num_values),
            ("width", self.width),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("max_len", self.max_len),
            ("ff_width", self.ff_width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockLayout {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl BlockLayout {
    fn named(&self) -> [(&'static str, Tensor); 16] {
        [
            ("ln1_g", self.ln1_g),
            ("ln1_b", self.ln1_b),
            ("wq", self.wq),
            ("bq", self.bq),
            ("wk", self.wk),
            ("bk", self.bk),
            ("wv", self.wv),
            ("bv", self.bv),
            ("wo", self.wo),
            ("bo", self.bo),
            ("ln2_g", self.ln2_g),
            ("ln2_b", self.ln2_b),
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
        ]
    }
}

/// Offsets of every tensor, in declaration (and file) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    value_emb: Tensor,
    pos_emb: Tensor,
    flag_emb: Tensor,
    conflict_proj: Tensor,
    blocks: Vec<BlockLayout>,
    head: Tensor,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let mut next = |rows: usize, cols: usize| {
            let t = Tensor { offset, rows, cols };
            offset += rows * cols;
            t
        };
        let (h, f) = (cfg.width, cfg.ff_width);
        let value_emb = next(cfg.num_values + 1, h);
        let pos_emb = next(cfg.max_len, h);
        let flag_emb = next(1, h);
        let conflict_proj = next(1, h);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockLayout {
                ln1_g: next(1, h),
                ln1_b: next(1, h),
                wq: next(h, h),
                bq: next(1, h),
                wk: next(h, h),
                bk: next(1, h),
                wv: next(h, h),
                bv: next(1, h),
                wo: next(h, h),
                bo: next(1, h),
                ln2_g: next(1, h),
                ln2_b: next(1, h),
                w1: next(h, f),
                b1: next(1, f),
                w2: next(f, h),
                b2: next(1, h),
            })
            .collect();
        let head = next(h, cfg.num_values);
        Layout {
            value_emb,
            pos_emb,
            flag_emb,
            conflict_proj,
            blocks,
            head,
            total: offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Every tensor with a stable name, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("value_embedding".to_string(), self.value_emb),
            ("position_embedding".to_string(), self.pos_emb),
            ("destroy_flag_embedding".to_string(), self.flag_emb),
            ("conflict_projection".to_string(), self.conflict_proj),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.named() {
                out.push((format!("block{b}.{name}"), t));
            }
        }
        out.push(("output_head".to_string(), self.head));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn view2(buf: &[f64], t: Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.rows, t.cols), &buf[t.range()]).expect("layout matches buffer")
}

fn view1(buf: &[f64], t: Tensor) -> ArrayView1<'_, f64> {
    ArrayView1::from_shape(t.len(), &buf[t.range()]).expect("layout matches buffer")
}

/// Parameter store of the repair transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-token inputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TokenInput<'a> {
    pub values: &'a [usize],
    pub mask: &'a [bool],
    pub conflicts: &'a [f64],
}

impl RepairModel {
    /// Randomly initialized model: embeddings `N(0, 0.5^2)`, weight matrices
    /// `N(0, 1/fan_in)`, residual output projections further scaled by
    /// `1/sqrt(2 * blocks)`, layer-norm gains one and biases zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let layout = model.layout.clone();
        let mut fill = |t: Tensor, std: f64, rng: &mut R| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut model.params[t.range()] {
                *p = normal.sample(rng);
            }
        };
        let h = config.width as f64;
        let residual = 1.0 / (2.0 * config.blocks as f64).sqrt();
        fill(layout.value_emb, 0.5, rng);
        fill(layout.pos_emb, 0.5, rng);
        fill(layout.flag_emb, 0.5, rng);
        fill(layout.conflict_proj, 0.5, rng);
        for b in &layout.blocks {
            fill(b.wq, h.powf(-0.5), rng);
            fill(b.wk, h.powf(-0.5), rng);
            fill(b.wv, h.powf(-0.5), rng);
            fill(b.wo, h.powf(-0.5) * residual, rng);
            fill(b.w1, h.powf(-0.5), rng);
            fill(b.w2, (config.ff_width as f64).powf(-0.5) * residual, rng);
        }
        fill(layout.head, h.powf(-0.5), rng);
        for b in &layout.blocks {
            model.params[b.ln1_g.range()].fill(1.0);
            model.params[b.ln2_g.range()].fill(1.0);
        }
        Ok(model)
    }

    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total()];
        Ok(RepairModel { config, layout, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(RepairModel { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable access to one named tensor (see [`Layout::named_tensors`]).
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.tensor(name)?;
        Some(&mut self.params[t.range()])
    }

    /// Checks that the model can process `instance`.
    pub fn check_compatible(&self, instance: &CspInstance) -> Result<()> {
        if instance.domain_size() != self.config.num_values {
            return Err(Error::Config(format!(
                "model predicts {} values but instance domain has {}",
                self.config.num_values,
                instance.domain_size()
            )));
        }
        if instance.n() > self.config.max_len {
            return Err(Error::Capacity {
                len: instance.n(),
                capacity: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Logits for every position of `x` with destroy flags `mask`.
    pub fn forward(&self, instance: &CspInstance, x: &Assignment, mask: &DestroyMask) -> Result<LogitMatrix> {
        self.check_compatible(instance)?;
        if x.len() != instance.n() || mask.len() != instance.n() {
            return Err(Error::Structural("assignment or mask length mismatch".into()));
        }
        let conflicts = self.conflict_input(instance, x.values());
        let input = TokenInput {
            values: x.values(),
            mask: mask.flags(),
            conflicts: &conflicts,
        };
        LogitMatrix::new(self.forward_tokens(input)?)
    }

    pub(crate) fn conflict_input(&self, instance: &CspInstance, values: &[usize]) -> Vec<f64> {
        if self.config.conflict_feature {
            csp::conflict_counts(instance, values).into_iter().map(|c| c as f64).collect()
        } else {
            vec![0.0; values.len()]
        }
    }

    pub fn forward_tokens(&self, input: TokenInput<'_>) -> Result<Array2<f64>> {
        self.check_tokens(&input)?;
        Ok(self.run(input, None))
    }

    fn check_tokens(&self, input: &TokenInput<'_>) -> Result<()> {
        let n = input.values.len();
        if n > self.config.max_len {
            return Err(Error::Capacity {
                len: n,
                capacity: self.config.max_len,
            });
        }
        if input.mask.len() != n || input.conflicts.len() != n {
            return Err(Error::Structural("token inputs have mismatched lengths".into()));
        }
        if let Some(&v) = input.values.iter().find(|&&v| v > self.config.num_values) {
            return Err(Error::Structural(format!("token value {v} outside embedding table")));
        }
        Ok(())
    }

    fn embed(&self, input: &TokenInput<'_>) -> Array2<f64> {
        let l = &self.layout;
        let p = &self.params;
        let n = input.values.len();
        let value_emb = view2(p, l.value_emb);
        let pos_emb = view2(p, l.pos_emb);
        let flag = view1(p, l.flag_emb);
        let proj = view1(p, l.conflict_proj);
        let mut h = Array2::zeros((n, self.config.width));
        for (i, mut row) in h.rows_mut().into_iter().enumerate() {
            row.assign(&value_emb.row(input.values[i]));
            if self.config.positional {
                row += &pos_emb.row(i);
            }
            if input.mask[i] {
                row += &flag;
            }
            if self.config.conflict_feature && input.conflicts[i] != 0.0 {
                row.scaled_add(input.conflicts[i], &proj);
            }
        }
        h
    }

    /// Forward pass, optionally recording activations for backward.
    fn run(&self, input: TokenInput<'_>, mut cache: Option<&mut ForwardCache>) -> Array2<f64> {
        let p = &self.params;
        let mut h = self.embed(&input);
        let heads = self.config.heads;
        let dh = self.config.width / heads;
        let scale = (dh as f64).powf(-0.5);
        for b in &self.layout.blocks {
            let (a, xhat1, inv1) = layer_norm(h.view(), view1(p, b.ln1_g), view1(p, b.ln1_b));
            let q = a.dot(&view2(p, b.wq)) + view1(p, b.bq);
            let k = a.dot(&view2(p, b.wk)) + view1(p, b.bk);
            let v = a.dot(&view2(p, b.wv)) + view1(p, b.bv);
            let mut o = Array2::zeros(h.dim());
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                scores *= scale;
                softmax_rows_inplace(&mut scores);
                o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            h += &(o.dot(&view2(p, b.wo)) + view1(p, b.bo));
            let (c, xhat2, inv2) = layer_norm(h.view(), view1(p, b.ln2_g), view1(p, b.ln2_b));
            let u = c.dot(&view2(p, b.w1)) + view1(p, b.b1);
            let g = u.mapv(gelu);
            h += &(g.dot(&view2(p, b.w2)) + view1(p, b.b2));
            if let Some(cache) = cache.as_deref_mut() {
                cache.blocks.push(BlockCache {
                    a,
                    xhat1,
                    inv1,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    c,
                    xhat2,
                    inv2,
                    u,
                    g,
                });
            }
        }
        let logits = h.dot(&view2(p, self.layout.head));
        if let Some(cache) = cache {
            cache.last_hidden = h;
        }
        logits
    }

    /// Forward pass that keeps activations for [`RepairModel::backward`].
    pub(crate) fn forward_cached(&self, input: TokenInput<'_>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_tokens(&input)?;
        let mut cache = ForwardCache {
            blocks: Vec::with_capacity(self.config.blocks),
            last_hidden: Array2::zeros((0, 0)),
        };
        let logits = self.run(input, Some(&mut cache));
        Ok((logits, cache))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub(crate) fn backward(
        &self,
        input: TokenInput<'_>,
        cache: &ForwardCache,
        dlogits: ArrayView2<f64>,
        grads: &mut [f64],
    ) {
        let p = &self.params;
        let l = &self.layout;
        let heads = self.config.heads;
        let dh = self.config.width / heads;
        let scale = (dh as f64).powf(-0.5);

        add2(grads, l.head, &cache.last_hidden.t().dot(&dlogits));
        let mut dh_res = dlogits.dot(&view2(p, l.head).t());

        for (b, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            // feed-forward branch
            add2(grads, b.w2, &bc.g.t().dot(&dh_res));
            add1(grads, b.b2, &dh_res.sum_axis(Axis(0)));
            let mut du = dh_res.dot(&view2(p, b.w2).t());
            du.zip_mut_with(&bc.u, |d, &u| *d *= gelu_grad(u));
            add2(grads, b.w1, &bc.c.t().dot(&du));
            add1(grads, b.b1, &du.sum_axis(Axis(0)));
            let dc = du.dot(&view2(p, b.w1).t());
            dh_res += &layer_norm_backward(dc.view(), &bc.xhat2, &bc.inv2, view1(p, b.ln2_g), grads, b.ln2_g, b.ln2_b);

            // attention branch
            add2(grads, b.wo, &bc.o.t().dot(&dh_res));
            add1(grads, b.bo, &dh_res.sum_axis(Axis(0)));
            let d_o = dh_res.dot(&view2(p, b.wo).t());
            let mut dq = Array2::zeros(bc.q.dim());
            let mut dk = Array2::zeros(bc.k.dim());
            let mut dv = Array2::zeros(bc.v.dim());
            for (hd, probs) in bc.probs.iter().enumerate() {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let d_oh = d_o.slice(cols);
                let dprobs = d_oh.dot(&bc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&d_oh));
                let mut dscores = dprobs;
                let inner = (&dscores * probs).sum_axis(Axis(1));
                for (i, mut row) in dscores.rows_mut().into_iter().enumerate() {
                    row -= inner[i];
                    row *= &probs.row(i);
                }
                dscores *= scale;
                dq.slice_mut(cols).assign(&dscores.dot(&bc.k.slice(cols)));
                dk.slice_mut(cols).assign(&dscores.t().dot(&bc.q.slice(cols)));
            }
            add2(grads, b.wq, &bc.a.t().dot(&dq));
            add1(grads, b.bq, &dq.sum_axis(Axis(0)));
            add2(grads, b.wk, &bc.a.t().dot(&dk));
            add1(grads, b.bk, &dk.sum_axis(Axis(0)));
            add2(grads, b.wv, &bc.a.t().dot(&dv));
            add1(grads, b.bv, &dv.sum_axis(Axis(0)));
            let da = dq.dot(&view2(p, b.wq).t()) + dk.dot(&view2(p, b.wk).t()) + dv.dot(&view2(p, b.wv).t());
            dh_res += &layer_norm_backward(da.view(), &bc.xhat1, &bc.inv1, view1(p, b.ln1_g), grads, b.ln1_g, b.ln1_b);
        }

        // embeddings
        let width = self.config.width;
        for (i, row) in dh_res.rows().into_iter().enumerate() {
            let value_off = l.value_emb.offset + input.values[i] * width;
            axpy(&mut grads[value_off..value_off + width], 1.0, row);
            if self.config.positional {
                let pos_off = l.pos_emb.offset + i * width;
                axpy(&mut grads[pos_off..pos_off + width], 1.0, row);
            }
            if input.mask[i] {
                axpy(&mut grads[l.flag_emb.range()], 1.0, row);
            }
            if self.config.conflict_feature && input.conflicts[i] != 0.0 {
                axpy(&mut grads[l.conflict_proj.range()], input.conflicts[i], row);
            }
        }
    }
}

struct BlockCache {
    a: Array2<f64>,
    xhat1: Array2<f64>,
    inv1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    c: Array2<f64>,
    xhat2: Array2<f64>,
    inv2: Array1<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub(crate) struct ForwardCache {
    blocks: Vec<BlockCache>,
    last_hidden: Array2<f64>,
}

fn axpy(dst: &mut [f64], alpha: f64, src: ArrayView1<f64>) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += alpha * s;
    }
}

fn add2(grads: &mut [f64], t: Tensor, g: &Array2<f64>) {
    debug_assert_eq!(g.dim(), (t.rows, t.cols));
    for (d, s) in grads[t.range()].iter_mut().zip(g.iter()) {
        *d += s;
    }
}

fn add1(grads: &mut [f64], t: Tensor, g: &Array1<f64>) {
    for (d, s) in grads[t.range()].iter_mut().zip(g.iter()) {
        *d += s;
    }
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Row-wise layer norm; returns output, normalized input and `1/sigma`.
fn layer_norm(x: ArrayView2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = x.nrows();
    let w = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv = Array1::zeros(n);
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / w;
        row -= mean;
        let var = row.dot(&row) / w;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row *= r;
        inv[i] = r;
    }
    let out = &xhat * &gain + bias;
    (out, xhat, inv)
}

fn layer_norm_backward(
    dy: ArrayView2<f64>,
    xhat: &Array2<f64>,
    inv: &Array1<f64>,
    gain: ArrayView1<f64>,
    grads: &mut [f64],
    gain_t: Tensor,
    bias_t: Tensor,
) -> Array2<f64> {
    add1(grads, gain_t, &(&dy * xhat).sum_axis(Axis(0)));
    add1(grads, bias_t, &dy.sum_axis(Axis(0)));
    let w = xhat.ncols() as f64;
    let mut dx = &dy * &gain;
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let xr = xhat.row(i);
        let mean_d = row.sum() / w;
        let mean_dx = row.dot(&xr) / w;
        row -= mean_d;
        row.scaled_add(-mean_dx, &xr);
        row *= inv[i];
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
