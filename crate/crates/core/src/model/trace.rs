// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual stream recording.

use crate::error::{Error, Result};

/// Which layers and positions a forward pass records. `None` means all.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSpec {
    pub layers: Option<Vec<usize>>,
    pub positions: Option<Vec<usize>>,
}

impl TraceSpec {
    /// Record every layer at every position.
    pub fn all() -> Self {
        Self::default()
    }

    /// Record nothing; only logits are produced.
    pub fn none() -> Self {
        Self {
            layers: Some(Vec::new()),
            positions: Some(Vec::new()),
        }
    }

    pub fn positions(positions: Vec<usize>) -> Self {
        Self {
            layers: None,
            positions: Some(positions),
        }
    }

    pub(crate) fn records_layer(&self, l: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&l))
    }

    pub(crate) fn resolved_positions(&self, n: usize) -> Result<Vec<usize>> {
        match &self.positions {
            None => Ok((0..n).collect()),
            Some(ps) => {
                let mut ps = ps.clone();
                ps.sort_unstable();
                ps.dedup();
                if let Some(&bad) = ps.iter().find(|&&p| p >= n) {
                    return Err(Error::Param(format!(
                        "trace position {bad} outside sequence of length {n}"
                    )));
                }
                Ok(ps)
            }
        }
    }
}

/// One block's record. Every buffer is `positions × d_model`, row-major, in
/// the trace's position order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// `h_l`, the block input.
    pub residual_in: Vec<f32>,
    /// `a_l`, the attention contribution.
    pub attn: Vec<f32>,
    /// `m_l`, the MoE contribution.
    pub moe: Vec<f32>,
    /// `h_{l+1} = (h_l + a_l) + m_l`.
    pub residual_out: Vec<f32>,
}

/// Per-layer, per-position residual states and sublayer contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    n_layers: usize,
    d_model: usize,
    n_tokens: usize,
    positions: Vec<usize>,
    layers: Vec<LayerTrace>,
    /// Cumulative token counts at the end of each turn, when known.
    pub turn_offsets: Vec<usize>,
}

impl ResidualTrace {
    /// Builds a trace from recorded layers. `positions` must be sorted and
    /// every buffer must hold `positions.len() × d_model` values.
    pub fn from_layers(
        n_layers: usize,
        d_model: usize,
        n_tokens: usize,
        positions: Vec<usize>,
        mut layers: Vec<LayerTrace>,
    ) -> Result<Self> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Trace("positions must be strictly increasing".into()));
        }
        if positions.last().is_some_and(|&p| p >= n_tokens) {
            return Err(Error::Trace("recorded position beyond sequence".into()));
        }
        let len = positions.len() * d_model;
        for lt in &layers {
            if lt.layer >= n_layers {
                return Err(Error::Trace(format!("layer {} beyond depth {n_layers}", lt.layer)));
            }
            for buf in [&lt.residual_in, &lt.attn, &lt.moe, &lt.residual_out] {
                if buf.len() != len {
                    return Err(Error::Trace(format!(
                        "layer {} buffer holds {} values, expected {len}",
                        lt.layer,
                        buf.len()
                    )));
                }
            }
        }
        layers.sort_by_key(|lt| lt.layer);
        if layers.windows(2).any(|w| w[0].layer == w[1].layer) {
            return Err(Error::Trace("duplicate layer record".into()));
        }
        Ok(Self {
            n_layers,
            d_model,
            n_tokens,
            positions,
            layers,
            turn_offsets: Vec::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Recorded positions, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layers(&self) -> &[LayerTrace] {
        &self.layers
    }

    /// True when every layer and every position was recorded.
    pub fn is_complete(&self) -> bool {
        self.layers.len() == self.n_layers && self.positions.len() == self.n_tokens
    }

    pub fn layer(&self, l: usize) -> Result<&LayerTrace> {
        self.layers
            .binary_search_by_key(&l, |lt| lt.layer)
            .map(|i| &self.layers[i])
            .map_err(|_| Error::Trace(format!("layer {l} was not recorded")))
    }

    fn row_index(&self, t: usize) -> Result<usize> {
        if self.positions.len() == self.n_tokens && t < self.n_tokens {
            return Ok(t);
        }
        self.positions
            .binary_search(&t)
            .map_err(|_| Error::Trace(format!("position {t} was not recorded")))
    }

    fn slice<'a>(&self, buf: &'a [f32], t: usize) -> Result<&'a [f32]> {
        let i = self.row_index(t)?;
        Ok(&buf[i * self.d_model..(i + 1) * self.d_model])
    }

    /// `h_l[t]`.
    pub fn residual_in(&self, l: usize, t: usize) -> Result<&[f32]> {
        self.slice(&self.layer(l)?.residual_in, t)
    }

    /// `a_l[t]`.
    pub fn attn(&self, l: usize, t: usize) -> Result<&[f32]> {
        self.slice(&self.layer(l)?.attn, t)
    }

    /// `m_l[t]`.
    pub fn moe(&self, l: usize, t: usize) -> Result<&[f32]> {
        self.slice(&self.layer(l)?.moe, t)
    }

    /// `h_{l+1}[t]`.
    pub fn residual_out(&self, l: usize, t: usize) -> Result<&[f32]> {
        self.slice(&self.layer(l)?.residual_out, t)
    }

    /// Total update `u_l[t] = a_l[t] + m_l[t]`.
    ///
    /// This is also the block contribution `C_l[t]`: both are read through
    /// this one function so they agree bit for bit.
    pub fn update(&self, l: usize, t: usize) -> Result<Vec<f32>> {
        let a = self.attn(l, t)?;
        let m = self.moe(l, t)?;
        Ok(a.iter().zip(m).map(|(x, y)| x + y).collect())
    }

    /// Block contribution `C_l[t]`; identical to [`Self::update`].
    pub fn contribution(&self, l: usize, t: usize) -> Result<Vec<f32>> {
        self.update(l, t)
    }
}
