// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, sublayers and layer-skip interventions.
//!
//! Every per-position computation reads only rows at or before that
//! position and uses a fixed summation order, so a position's values do not
//! depend on how long the sequence is or which other positions are being
//! recomputed. The skip engine relies on this to reuse baseline rows.

use std::ops::Range;

use rayon::prelude::*;

use super::trace::{LayerTrace, ResidualTrace, TraceSpec};
use super::{Ffn, LayerWeights, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    check_finite, rmsnorm_slice, row_times_matrix, softmax_f64, softmax_slice, topk_indices, Tensor,
};

/// Nullify block `layer` at the positions in `span`: the block's output
/// residual there equals its input residual.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skip {
    pub layer: usize,
    pub span: Range<usize>,
}

impl Skip {
    /// Skip `layer` from position `p` to the end of the sequence.
    pub fn from_position(layer: usize, p: usize, n: usize) -> Self {
        Self { layer, span: p..n }
    }

    /// Skip `layer` at positions `0..=pivot`.
    pub fn through_position(layer: usize, pivot: usize) -> Self {
        Self {
            layer,
            span: 0..pivot + 1,
        }
    }
}

/// Logits for every position plus the recorded trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `n × vocab_size`.
    pub logits: Tensor,
    pub trace: ResidualTrace,
}

impl ForwardOutput {
    /// Softmax of the logits at position `t`.
    pub fn distribution(&self, t: usize) -> Result<Vec<f32>> {
        let (n, _) = self.logits.dims2()?;
        if t >= n {
            return Err(Error::Param(format!("position {t} outside sequence of length {n}")));
        }
        softmax_slice(self.logits.row(t))
    }

    pub fn n_tokens(&self) -> usize {
        self.logits.shape()[0]
    }
}

/// Rotary tables for positions `0..n`.
struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    fn new(n: usize, d_head: usize, base: f64) -> Self {
        let half = d_head / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| base.powf(-((2 * i) as f64) / d_head as f64))
            .collect();
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for t in 0..n {
            for &f in &inv_freq {
                let angle = t as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head vector (rotate-half pairing `i ↔ i + d/2`).
    fn apply(&self, t: usize, x: &[f32], out: &mut [f64]) {
        let h = self.half;
        let c = &self.cos[t * h..(t + 1) * h];
        let s = &self.sin[t * h..(t + 1) * h];
        for i in 0..h {
            let x1 = f64::from(x[i]);
            let x2 = f64::from(x[i + h]);
            out[i] = x1 * c[i] - x2 * s[i];
            out[i + h] = x1 * s[i] + x2 * c[i];
        }
    }
}

fn project(x: &[f32], w: &Tensor) -> Vec<f32> {
    let n = w.shape()[1];
    let mut acc = vec![0.0f64; n];
    let mut out = vec![0.0f32; n];
    row_times_matrix(x, w.data(), n, &mut acc, &mut out);
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn ffn_forward(ffn: &Ffn, x: &[f32]) -> Vec<f32> {
    let g = project(x, &ffn.gate);
    let u = project(x, &ffn.up);
    let hidden: Vec<f32> = g
        .iter()
        .zip(&u)
        .map(|(&g, &u)| (silu(f64::from(g)) * f64::from(u)) as f32)
        .collect();
    project(&hidden, &ffn.down)
}

/// Top-K routing for one normalized token: the selected experts in
/// ascending index order with gates renormalized to sum to 1.
pub fn route(config: &ModelConfig, lw: &LayerWeights, x_norm: &[f32]) -> Vec<(usize, f64)> {
    let logits = project(x_norm, &lw.router);
    let wide: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
    let probs = softmax_f64(&wide);
    let mut chosen = topk_indices(&probs, config.top_k).expect("top_k validated against n_experts");
    chosen.sort_unstable();
    let total: f64 = chosen.iter().map(|&i| probs[i]).sum();
    chosen.into_iter().map(|i| (i, probs[i] / total)).collect()
}

fn moe_row(config: &ModelConfig, lw: &LayerWeights, h_hat: &[f32]) -> Vec<f32> {
    let mut x = vec![0.0f32; h_hat.len()];
    rmsnorm_slice(h_hat, lw.moe_norm.data(), config.norm_eps, &mut x);
    let mut acc: Vec<f64> = match &lw.shared {
        Some(shared) => ffn_forward(shared, &x).into_iter().map(f64::from).collect(),
        None => vec![0.0; h_hat.len()],
    };
    for (i, gate) in route(config, lw, &x) {
        let y = ffn_forward(&lw.experts[i], &x);
        for (a, &v) in acc.iter_mut().zip(&y) {
            *a += gate * f64::from(v);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Keys and values for positions `0..ctx` of one block.
struct KvCache {
    /// `[kv_head][dim][position]`, rotary applied.
    keys_t: Vec<f64>,
    /// `[position][kv_head * d_head + dim]`.
    values: Vec<f64>,
    ctx: usize,
}

struct BlockCtx<'a> {
    config: &'a ModelConfig,
    lw: &'a LayerWeights,
    rope: &'a Rope,
}

impl BlockCtx<'_> {
    fn normed_rows(&self, h: &[f32], rows: Range<usize>) -> Vec<f32> {
        let d = self.config.d_model;
        let mut out = vec![0.0f32; rows.len() * d];
        for (o, t) in out.chunks_exact_mut(d).zip(rows) {
            rmsnorm_slice(
                &h[t * d..(t + 1) * d],
                self.lw.attn_norm.data(),
                self.config.norm_eps,
                o,
            );
        }
        out
    }

    fn kv_cache(&self, xs: &[f32], ctx: usize) -> KvCache {
        let cfg = self.config;
        let (d, dh, kvh) = (cfg.d_model, cfg.d_head, cfg.n_kv_heads);
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..ctx)
            .into_par_iter()
            .map(|t| {
                let x = &xs[t * d..(t + 1) * d];
                (project(x, &self.lw.wk), project(x, &self.lw.wv))
            })
            .collect();
        let mut keys_t = vec![0.0f64; kvh * dh * ctx];
        let mut values = vec![0.0f64; ctx * kvh * dh];
        let mut rotated = vec![0.0f64; dh];
        for (t, (k, v)) in rows.iter().enumerate() {
            for g in 0..kvh {
                self.rope.apply(t, &k[g * dh..(g + 1) * dh], &mut rotated);
                for (i, &r) in rotated.iter().enumerate() {
                    keys_t[(g * dh + i) * ctx + t] = r;
                }
            }
            for (dst, &src) in values[t * kvh * dh..(t + 1) * kvh * dh].iter_mut().zip(v) {
                *dst = f64::from(src);
            }
        }
        KvCache { keys_t, values, ctx }
    }

    /// Attention output for query position `t` given its normalized input.
    fn attend(&self, kv: &KvCache, x: &[f32], t: usize) -> Vec<f32> {
        let cfg = self.config;
        let (dh, nh, kvh) = (cfg.d_head, cfg.n_heads, cfg.n_kv_heads);
        let group = nh / kvh;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = project(x, &self.lw.wq);
        let mut q_rot = vec![0.0f64; dh];
        let mut scores = vec![0.0f64; t + 1];
        let mut head_out = vec![0.0f64; dh];
        let mut concat = vec![0.0f32; nh * dh];
        for head in 0..nh {
            let g = head / group;
            self.rope.apply(t, &q[head * dh..(head + 1) * dh], &mut q_rot);
            scores.iter_mut().for_each(|s| *s = 0.0);
            for (i, &qi) in q_rot.iter().enumerate() {
                let k_row = &kv.keys_t[(g * dh + i) * kv.ctx..][..=t];
                for (s, &k) in scores.iter_mut().zip(k_row) {
                    *s += qi * k;
                }
            }
            scores.iter_mut().for_each(|s| *s *= scale);
            let weights = softmax_f64(&scores);
            head_out.iter_mut().for_each(|o| *o = 0.0);
            for (j, &w) in weights.iter().enumerate() {
                let v = &kv.values[j * kvh * dh + g * dh..][..dh];
                for (o, &vi) in head_out.iter_mut().zip(v) {
                    *o += w * vi;
                }
            }
            for (c, &o) in concat[head * dh..(head + 1) * dh].iter_mut().zip(&head_out) {
                *c = o as f32;
            }
        }
        project(&concat, &self.lw.wo)
    }

    /// `(a_t, m_t)` for every query position in `queries`.
    fn run(&self, h: &[f32], queries: Range<usize>) -> Vec<(Vec<f32>, Vec<f32>)> {
        let d = self.config.d_model;
        let ctx = queries.end;
        let xs = self.normed_rows(h, 0..ctx);
        let kv = self.kv_cache(&xs, ctx);
        queries
            .into_par_iter()
            .map(|t| {
                let a = self.attend(&kv, &xs[t * d..(t + 1) * d], t);
                let h_hat: Vec<f32> = h[t * d..(t + 1) * d].iter().zip(&a).map(|(x, y)| x + y).collect();
                let m = moe_row(self.config, self.lw, &h_hat);
                (a, m)
            })
            .collect()
    }
}

fn check_rows(t: &Tensor, d: usize, what: &str) -> Result<usize> {
    let (n, cols) = t.dims2()?;
    if cols != d {
        return Err(Error::Shape(format!(
            "{what} has {cols} columns, expected d_model = {d}"
        )));
    }
    Ok(n)
}

/// Pre-norm causal multi-head attention with rotary encoding and grouped
/// KV heads: `a = Attention(RMSNorm(h))` for every row of `h[n×d_model]`.
pub fn attention_sublayer(config: &ModelConfig, lw: &LayerWeights, h: &Tensor) -> Result<Tensor> {
    let n = check_rows(h, config.d_model, "attention input")?;
    let rope = Rope::new(n, config.d_head, config.rope_base);
    let ctx = BlockCtx {
        config,
        lw,
        rope: &rope,
    };
    let xs = ctx.normed_rows(h.data(), 0..n);
    let kv = ctx.kv_cache(&xs, n);
    let d = config.d_model;
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|t| ctx.attend(&kv, &xs[t * d..(t + 1) * d], t))
        .collect();
    let out = Tensor::matrix(n, d, rows.concat()).map_err(|_| Error::NonFinite("attention"))?;
    Ok(out)
}

/// Sparse MoE sublayer on `ĥ[n×d_model]`: per row, RMSNorm, route to the
/// top-K experts, sum gated expert outputs, plus the shared expert if any.
pub fn moe_sublayer(config: &ModelConfig, lw: &LayerWeights, h_hat: &Tensor) -> Result<Tensor> {
    let n = check_rows(h_hat, config.d_model, "moe input")?;
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|t| moe_row(config, lw, h_hat.row(t)))
        .collect();
    Tensor::matrix(n, config.d_model, rows.concat()).map_err(|_| Error::NonFinite("moe"))
}

fn gather(buf: &[f32], positions: &[usize], d: usize, n: usize) -> Vec<f32> {
    if positions.len() == n {
        return buf.to_vec();
    }
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        out.extend_from_slice(&buf[p * d..(p + 1) * d]);
    }
    out
}

fn complement(span: &Range<usize>, n: usize) -> Vec<Range<usize>> {
    [0..span.start, span.end..n]
        .into_iter()
        .filter(|r| !r.is_empty())
        .collect()
}

impl Model {
    /// Embedding row for a token.
    pub fn embed(&self, token: u32) -> &[f32] {
        self.weights().embed.row(token as usize)
    }

    /// Final RMSNorm followed by the unembedding. The forward pass and the
    /// logit lens both decode residuals through this function.
    pub fn output_logits(&self, residual: &[f32]) -> Vec<f32> {
        let cfg = self.config();
        let mut x = vec![0.0f32; cfg.d_model];
        rmsnorm_slice(residual, self.weights().final_norm.data(), cfg.norm_eps, &mut x);
        project(&x, &self.weights().unembed)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let v = self.config().vocab_size;
        if let Some((i, &tok)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= v) {
            return Err(Error::Input(format!(
                "token {tok} at position {i} is outside the vocabulary of {v}"
            )));
        }
        Ok(())
    }

    fn check_skip(&self, skip: &Skip, n: usize) -> Result<()> {
        if skip.layer >= self.n_layers() {
            return Err(Error::Param(format!(
                "skip layer {} outside 0..{}",
                skip.layer,
                self.n_layers()
            )));
        }
        if skip.span.start >= skip.span.end || skip.span.end > n {
            return Err(Error::Param(format!(
                "skip span {:?} is empty or exceeds the sequence length {n}",
                skip.span
            )));
        }
        Ok(())
    }

    /// Full forward pass.
    pub fn forward(&self, tokens: &[u32], spec: &TraceSpec) -> Result<ForwardOutput> {
        self.run(tokens, None, spec, None)
    }

    /// Forward pass with block `skip.layer` nullified on `skip.span`,
    /// recomputed from scratch.
    pub fn forward_skipped(&self, tokens: &[u32], skip: &Skip, spec: &TraceSpec) -> Result<ForwardOutput> {
        self.run(tokens, Some(skip), spec, None)
    }

    /// Same result as [`Self::forward_skipped`], but copies everything the
    /// intervention cannot change from a complete baseline run over the same
    /// tokens: all layers below the skipped one, and all positions before
    /// the span in every layer.
    pub fn forward_skipped_reusing(
        &self,
        baseline: &ForwardOutput,
        tokens: &[u32],
        skip: &Skip,
        spec: &TraceSpec,
    ) -> Result<ForwardOutput> {
        if !baseline.trace.is_complete() || baseline.n_tokens() != tokens.len() {
            return Err(Error::Param(
                "reuse needs a complete baseline trace over the same tokens".into(),
            ));
        }
        self.run(tokens, Some(skip), spec, Some(baseline))
    }

    fn run(
        &self,
        tokens: &[u32],
        skip: Option<&Skip>,
        spec: &TraceSpec,
        reuse: Option<&ForwardOutput>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        if let Some(s) = skip {
            self.check_skip(s, n)?;
        }
        let cfg = self.config();
        let d = cfg.d_model;
        let positions = spec.resolved_positions(n)?;
        let rope = Rope::new(n, cfg.d_head, cfg.rope_base);

        // With reuse, layers below `start_layer` and rows before `dirty_from`
        // are copied from the baseline.
        let (start_layer, dirty_from, base) = match (reuse, skip) {
            (Some(b), Some(s)) => (s.layer, s.span.start, Some(b)),
            _ => (0, 0, None),
        };

        let mut records = Vec::new();
        let mut h: Vec<f32> = match base {
            Some(b) => b.trace.layer(start_layer)?.residual_in.clone(),
            None => tokens.iter().flat_map(|&t| self.embed(t).iter().copied()).collect(),
        };

        for l in 0..cfg.n_layers {
            if l < start_layer {
                if spec.records_layer(l) {
                    let bl = base.expect("start_layer > 0 only with reuse").trace.layer(l)?;
                    records.push(LayerTrace {
                        layer: l,
                        residual_in: gather(&bl.residual_in, &positions, d, n),
                        attn: gather(&bl.attn, &positions, d, n),
                        moe: gather(&bl.moe, &positions, d, n),
                        residual_out: gather(&bl.residual_out, &positions, d, n),
                    });
                }
                continue;
            }
            let skip_here = skip.filter(|s| s.layer == l);
            let (mut attn, mut moe, mut next) = match base {
                Some(b) => {
                    let bl = b.trace.layer(l)?;
                    (bl.attn.clone(), bl.moe.clone(), bl.residual_out.clone())
                }
                None => (vec![0.0f32; n * d], vec![0.0f32; n * d], h.clone()),
            };
            let compute: Vec<Range<usize>> = match (skip_here, base) {
                (Some(_), Some(_)) => Vec::new(),
                (Some(s), None) => complement(&s.span, n),
                (None, _) => std::iter::once(dirty_from..n).collect(),
            };
            if let Some(s) = skip_here {
                let rows = s.span.start * d..s.span.end * d;
                attn[rows.clone()].fill(0.0);
                moe[rows.clone()].fill(0.0);
                next[rows.clone()].copy_from_slice(&h[rows]);
            }
            let block = BlockCtx {
                config: cfg,
                lw: &self.weights().layers[l],
                rope: &rope,
            };
            for range in compute {
                let start = range.start;
                for (i, (a, m)) in block.run(&h, range).into_iter().enumerate() {
                    let t = start + i;
                    let row = t * d..(t + 1) * d;
                    for (((o, &hv), &av), &mv) in next[row.clone()].iter_mut().zip(&h[row.clone()]).zip(&a).zip(&m) {
                        *o = (hv + av) + mv;
                    }
                    attn[row.clone()].copy_from_slice(&a);
                    moe[row].copy_from_slice(&m);
                }
            }
            if spec.records_layer(l) {
                records.push(LayerTrace {
                    layer: l,
                    residual_in: gather(&h, &positions, d, n),
                    attn: gather(&attn, &positions, d, n),
                    moe: gather(&moe, &positions, d, n),
                    residual_out: gather(&next, &positions, d, n),
                });
            }
            h = next;
        }

        let vocab = cfg.vocab_size;
        let mut logits = match base {
            Some(b) => b.logits.data().to_vec(),
            None => vec![0.0f32; n * vocab],
        };
        let fresh: Vec<Vec<f32>> = (dirty_from..n)
            .into_par_iter()
            .map(|t| self.output_logits(&h[t * d..(t + 1) * d]))
            .collect();
        for (i, row) in fresh.into_iter().enumerate() {
            let t = dirty_from + i;
            logits[t * vocab..(t + 1) * vocab].copy_from_slice(&row);
        }
        check_finite(&logits, "forward")?;
        let logits = Tensor::matrix(n, vocab, logits)?;
        let trace = ResidualTrace::from_layers(cfg.n_layers, d, n, positions, records)?;
        Ok(ForwardOutput { logits, trace })
    }
}
