// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-skip interventions.
//!
//! Skipping block `s` from position `p` sets `h̃_{s+1}[p:] = h̃_s[p:]` and
//! recomputes every later block. Two measurements are built on it:
//!
//! - the Future Effect `E(s, l) = max_p ‖C_l − C̃_l‖ / ‖C_l‖`, where the
//!   contributions are flattened over the intervened suffix `t ≥ p`;
//! - the logit change `D(s)`: skip `s` at positions `≤ t_s` only and take
//!   the mean L2 distance between baseline and intervened logits over the
//!   positions after the pivot.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Model, ResidualTrace, Skip, TraceSpec};
use crate::numerics::{kl_divergence, softmax_slice};
use crate::trajectory::TokenizedTrajectory;

/// `‖C_l‖` below this makes a Future Effect ratio undefined.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-10;

/// Which positions are tried as the skip start `p`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PositionPolicy {
    /// The last token of every turn up to and including the analyzed one.
    #[default]
    TurnBoundaries,
    /// Positions `0, k, 2k, …`.
    Stride(usize),
    /// Exactly these positions.
    Explicit(Vec<usize>),
}

impl PositionPolicy {
    /// Candidate positions for turn `r`, ascending and deduplicated.
    pub fn resolve(&self, tok: &TokenizedTrajectory, r: usize) -> Result<Vec<usize>> {
        let n = tok.turn_len(r)?;
        let mut out = match self {
            Self::TurnBoundaries => tok.boundaries_through(r)?,
            Self::Stride(k) => (0..n).step_by(*k).collect(),
            Self::Explicit(ps) => {
                if let Some(&bad) = ps.iter().find(|&&p| p >= n) {
                    return Err(Error::Param(format!(
                        "position {bad} outside turn {r} prefix of length {n}"
                    )));
                }
                ps.clone()
            }
        };
        out.sort_unstable();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Param("position policy selected no positions".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for PositionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TurnBoundaries => f.write_str("boundaries"),
            Self::Stride(k) => write!(f, "stride:{k}"),
            Self::Explicit(ps) => {
                let list: Vec<String> = ps.iter().map(ToString::to_string).collect();
                write!(f, "list:{}", list.join(","))
            }
        }
    }
}

impl FromStr for PositionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Param(format!(
                "position policy `{s}` is not boundaries, stride:K or list:p1,p2,..."
            ))
        };
        if s == "boundaries" {
            return Ok(Self::TurnBoundaries);
        }
        if let Some(k) = s.strip_prefix("stride:") {
            let k: usize = k.parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(Error::Param("stride must be positive".into()));
            }
            return Ok(Self::Stride(k));
        }
        if let Some(list) = s.strip_prefix("list:") {
            let ps = list
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Self::Explicit(ps));
        }
        Err(bad())
    }
}

impl TryFrom<String> for PositionPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PositionPolicy> for String {
    fn from(p: PositionPolicy) -> Self {
        p.to_string()
    }
}

/// Forward pass with block `s` nullified at positions `p..n`, recomputed
/// from scratch.
pub fn forward_with_skip(model: &Model, tokens: &[u32], s: usize, p: usize) -> Result<ForwardOutput> {
    check_layer(model, s)?;
    if p >= tokens.len() {
        return Err(Error::Param(format!(
            "skip position {p} outside sequence of length {}",
            tokens.len()
        )));
    }
    model.forward_skipped(tokens, &Skip::from_position(s, p, tokens.len()), &TraceSpec::all())
}

fn check_layer(model: &Model, s: usize) -> Result<()> {
    if s >= model.n_layers() {
        return Err(Error::Param(format!("layer {s} outside 0..{}", model.n_layers())));
    }
    Ok(())
}

/// One defined `(s, l)` cell: the maximizing position and the ratio, or
/// `None` when `‖C_l‖` was degenerate at every candidate position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEntry {
    pub value: Option<f64>,
    pub argmax_p: Option<usize>,
}

impl EffectEntry {
    pub fn is_degenerate(&self) -> bool {
        self.value.is_none()
    }
}

/// Relative contribution change of every layer after `s`, for one skip start.
/// Index `i` holds layer `s + 1 + i`.
fn relative_changes(
    baseline: &ResidualTrace,
    intervened: &ResidualTrace,
    s: usize,
    p: usize,
) -> Result<Vec<Option<f64>>> {
    let n = baseline.n_tokens();
    ((s + 1)..baseline.n_layers())
        .map(|l| {
            let mut diff_sq = 0.0f64;
            let mut base_sq = 0.0f64;
            for t in p..n {
                let c = baseline.contribution(l, t)?;
                let c_tilde = intervened.contribution(l, t)?;
                for (&x, &y) in c.iter().zip(&c_tilde) {
                    let (x, y) = (f64::from(x), f64::from(y));
                    diff_sq += (x - y) * (x - y);
                    base_sq += x * x;
                }
            }
            let den = base_sq.sqrt();
            Ok((den >= DEGENERATE_DENOMINATOR).then(|| diff_sq.sqrt() / den))
        })
        .collect()
}

/// Runs the skip of `s` from `p` against a complete baseline and returns
/// the per-layer ratios.
fn skip_effects(
    model: &Model,
    baseline: &ForwardOutput,
    tokens: &[u32],
    s: usize,
    p: usize,
) -> Result<Vec<Option<f64>>> {
    let n = tokens.len();
    let spec = TraceSpec {
        layers: Some(((s + 1)..model.n_layers()).collect()),
        positions: Some((p..n).collect()),
    };
    let out = model.forward_skipped_reusing(baseline, tokens, &Skip::from_position(s, p, n), &spec)?;
    relative_changes(&baseline.trace, &out.trace, s, p)
}

fn fold_max(per_p: &[(usize, Vec<Option<f64>>)], n_entries: usize) -> Vec<EffectEntry> {
    (0..n_entries)
        .map(|i| {
            let mut best = EffectEntry {
                value: None,
                argmax_p: None,
            };
            // positions arrive ascending; strict > keeps the earliest on ties
            for (p, vals) in per_p {
                if let Some(v) = vals[i] {
                    if best.value.is_none_or(|b| v > b) {
                        best = EffectEntry {
                            value: Some(v),
                            argmax_p: Some(*p),
                        };
                    }
                }
            }
            best
        })
        .collect()
}

fn check_positions(positions: &[usize], n: usize) -> Result<Vec<usize>> {
    if positions.is_empty() {
        return Err(Error::Param("empty position set".into()));
    }
    let mut ps = positions.to_vec();
    ps.sort_unstable();
    ps.dedup();
    if let Some(&bad) = ps.iter().find(|&&p| p >= n) {
        return Err(Error::Param(format!("position {bad} outside sequence of length {n}")));
    }
    Ok(ps)
}

/// Row `E(s, ·)` over the candidate positions, computed against a complete
/// baseline forward of the same tokens. Entry `i` is layer `s + 1 + i`.
pub fn future_effect_row_with_baseline(
    model: &Model,
    baseline: &ForwardOutput,
    tokens: &[u32],
    s: usize,
    positions: &[usize],
) -> Result<Vec<EffectEntry>> {
    if s + 1 >= model.n_layers() {
        return Err(Error::Param(format!(
            "skipped layer {s} has no downstream layer (depth {})",
            model.n_layers()
        )));
    }
    let ps = check_positions(positions, tokens.len())?;
    let per_p = ps
        .par_iter()
        .map(|&p| Ok((p, skip_effects(model, baseline, tokens, s, p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(fold_max(&per_p, model.n_layers() - s - 1))
}

/// Row `E(s, ·)`; runs its own baseline forward.
pub fn future_effect_row(model: &Model, tokens: &[u32], s: usize, positions: &[usize]) -> Result<Vec<EffectEntry>> {
    let baseline = model.forward(tokens, &TraceSpec::all())?;
    future_effect_row_with_baseline(model, &baseline, tokens, s, positions)
}

/// `E(s, l)` for every `s < l` at one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureEffectMap {
    pub turn: usize,
    pub n_layers: usize,
    pub n_tokens: usize,
    pub policy: PositionPolicy,
    /// Candidate skip positions actually evaluated.
    pub positions: Vec<usize>,
    entries: BTreeMap<(usize, usize), EffectEntry>,
}

impl FutureEffectMap {
    /// The `(s, l)` entry; `None` when `l <= s`.
    pub fn entry(&self, s: usize, l: usize) -> Option<&EffectEntry> {
        self.entries.get(&(s, l))
    }

    /// The value at `(s, l)`, absent when undefined or degenerate.
    pub fn value(&self, s: usize, l: usize) -> Option<f64> {
        self.entry(s, l).and_then(|e| e.value)
    }

    /// `((s, l), entry)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &EffectEntry)> {
        self.entries.iter()
    }

    /// Number of entries with a defined, non-degenerate value.
    pub fn defined_count(&self) -> usize {
        self.entries.values().filter(|e| e.value.is_some()).count()
    }

    /// Dense `L × L` view (row `s`, column `l`) for plotting.
    pub fn matrix(&self) -> Vec<Vec<Option<f64>>> {
        let mut m = vec![vec![None; self.n_layers]; self.n_layers];
        for (&(s, l), e) in &self.entries {
            m[s][l] = e.value;
        }
        m
    }

    /// CSV with header `s,l,value,argmax_p,flag`. Degenerate cells have
    /// empty `value`/`argmax_p` and flag `degenerate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,l,value,argmax_p,flag\n");
        for (&(s, l), e) in &self.entries {
            match (e.value, e.argmax_p) {
                (Some(v), Some(p)) => out.push_str(&format!("{s},{l},{v},{p},ok\n")),
                _ => out.push_str(&format!("{s},{l},,,degenerate\n")),
            }
        }
        out
    }
}

/// Builds a map from explicit rows (`rows[s]` holds layers `s+1..L`).
fn assemble(
    turn: usize,
    n_layers: usize,
    n_tokens: usize,
    policy: PositionPolicy,
    positions: Vec<usize>,
    rows: Vec<Vec<EffectEntry>>,
) -> FutureEffectMap {
    let mut entries = BTreeMap::new();
    for (s, row) in rows.into_iter().enumerate() {
        for (i, e) in row.into_iter().enumerate() {
            entries.insert((s, s + 1 + i), e);
        }
    }
    FutureEffectMap {
        turn,
        n_layers,
        n_tokens,
        policy,
        positions,
        entries,
    }
}

/// Future Effect map for turn `r` over the candidate positions chosen by
/// `policy`. The baseline trace is shared; each `(s, p)` skip runs
/// independently and only recomputes what it can change.
pub fn future_effect_map(
    model: &Model,
    tok: &TokenizedTrajectory,
    r: usize,
    policy: &PositionPolicy,
) -> Result<FutureEffectMap> {
    let tokens = tok.prefix_for_turn(r)?;
    let positions = policy.resolve(tok, r)?;
    let baseline = model.forward(tokens, &TraceSpec::all())?;
    future_effect_map_with_baseline(model, &baseline, tokens, r, policy, positions)
}

pub(crate) fn future_effect_map_with_baseline(
    model: &Model,
    baseline: &ForwardOutput,
    tokens: &[u32],
    r: usize,
    policy: &PositionPolicy,
    positions: Vec<usize>,
) -> Result<FutureEffectMap> {
    let n_layers = model.n_layers();
    let positions = check_positions(&positions, tokens.len())?;
    let pairs: Vec<(usize, usize)> = (0..n_layers.saturating_sub(1))
        .flat_map(|s| positions.iter().map(move |&p| (s, p)))
        .collect();
    let results = pairs
        .par_iter()
        .map(|&(s, p)| skip_effects(model, baseline, tokens, s, p))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(n_layers.saturating_sub(1));
    for s in 0..n_layers.saturating_sub(1) {
        let per_p: Vec<(usize, Vec<Option<f64>>)> = pairs
            .iter()
            .zip(&results)
            .filter(|((ss, _), _)| *ss == s)
            .map(|((_, p), v)| (*p, v.clone()))
            .collect();
        rows.push(fold_max(&per_p, n_layers - s - 1));
    }
    Ok(assemble(r, n_layers, tokens.len(), policy.clone(), positions, rows))
}

/// Predictive drift after skipping one layer up to a pivot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitChange {
    /// Mean over `t > pivot` of `‖logits_t − logits̃_t‖₂`.
    pub l2: f64,
    /// Mean over `t > pivot` of `KL(p_t ‖ p̃_t)`.
    pub kl: f64,
}

fn check_pivot(n: usize, pivot: usize) -> Result<()> {
    if pivot + 1 >= n {
        return Err(Error::Param(format!(
            "pivot {pivot} leaves no future positions in a sequence of length {n}"
        )));
    }
    Ok(())
}

fn compare_future(baseline: &ForwardOutput, out: &ForwardOutput, pivot: usize) -> Result<LogitChange> {
    let n = baseline.n_tokens();
    let mut l2 = 0.0f64;
    let mut kl = 0.0f64;
    for t in pivot + 1..n {
        let a = baseline.logits.row(t);
        let b = out.logits.row(t);
        let sq = a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            acc + d * d
        });
        l2 += sq.sqrt();
        kl += kl_divergence(&softmax_slice(a)?, &softmax_slice(b)?)?;
    }
    let count = (n - pivot - 1) as f64;
    Ok(LogitChange {
        l2: l2 / count,
        kl: kl / count,
    })
}

/// Skip `s` at positions `0..=pivot` and measure the drift after the pivot.
/// `baseline` must be a complete forward of `tokens`.
pub fn logit_change_with_baseline(
    model: &Model,
    baseline: &ForwardOutput,
    tokens: &[u32],
    s: usize,
    pivot: usize,
) -> Result<LogitChange> {
    check_layer(model, s)?;
    check_pivot(tokens.len(), pivot)?;
    let out = model.forward_skipped_reusing(baseline, tokens, &Skip::through_position(s, pivot), &TraceSpec::none())?;
    compare_future(baseline, &out, pivot)
}

/// `D(s)` with pivot `t_s`.
pub fn logit_change_norm(model: &Model, tokens: &[u32], s: usize, t_s: usize) -> Result<f64> {
    check_layer(model, s)?;
    check_pivot(tokens.len(), t_s)?;
    let baseline = model.forward(tokens, &TraceSpec::all())?;
    Ok(logit_change_with_baseline(model, &baseline, tokens, s, t_s)?.l2)
}

/// `D(s)` for every layer at one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitChangeProfile {
    pub turn: usize,
    pub pivot: usize,
    pub n_tokens: usize,
    /// Mean L2 logit distance per skipped layer.
    pub values: Vec<f64>,
    /// Mean KL alternative per skipped layer.
    pub kl_values: Vec<f64>,
}

impl LogitChangeProfile {
    /// CSV with header `s,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,value\n");
        for (s, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{s},{v}\n"));
        }
        out
    }
}

/// Default pivot: the last token of the previous turn, so the future is the
/// current turn; for turn 1, the middle of the turn.
pub fn default_pivot(tok: &TokenizedTrajectory, r: usize) -> Result<usize> {
    let n = tok.turn_len(r)?;
    let pivot = if r >= 2 { tok.boundary(r - 1)? } else { (n - 1) / 2 };
    check_pivot(n, pivot)?;
    Ok(pivot)
}

/// Logit change profile for turn `r`.
pub fn logit_change_profile(
    model: &Model,
    tok: &TokenizedTrajectory,
    r: usize,
    pivot: Option<usize>,
) -> Result<LogitChangeProfile> {
    let tokens = tok.prefix_for_turn(r)?;
    let baseline = model.forward(tokens, &TraceSpec::all())?;
    logit_change_profile_with_baseline(model, &baseline, tok, r, pivot)
}

pub(crate) fn logit_change_profile_with_baseline(
    model: &Model,
    baseline: &ForwardOutput,
    tok: &TokenizedTrajectory,
    r: usize,
    pivot: Option<usize>,
) -> Result<LogitChangeProfile> {
    let tokens = tok.prefix_for_turn(r)?;
    let pivot = match pivot {
        Some(p) => {
            check_pivot(tokens.len(), p)?;
            p
        }
        None => default_pivot(tok, r)?,
    };
    let changes = (0..model.n_layers())
        .into_par_iter()
        .map(|s| logit_change_with_baseline(model, baseline, tokens, s, pivot))
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitChangeProfile {
        turn: r,
        pivot,
        n_tokens: tokens.len(),
        values: changes.iter().map(|c| c.l2).collect(),
        kl_values: changes.iter().map(|c| c.kl).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::trajectory::{synthesize, tokenize, Domain};

    fn model(layers: usize) -> Model {
        Model::random(ModelConfig {
            n_layers: layers,
            seed: 21,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn toks(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| (i * 53 + 7) % 261).collect()
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            "boundaries".parse::<PositionPolicy>().unwrap(),
            PositionPolicy::TurnBoundaries
        );
        assert_eq!("stride:4".parse::<PositionPolicy>().unwrap(), PositionPolicy::Stride(4));
        assert_eq!(
            "list:3,1".parse::<PositionPolicy>().unwrap(),
            PositionPolicy::Explicit(vec![3, 1])
        );
        for bad in ["stride:0", "stride:x", "list:", "every"] {
            assert!(bad.parse::<PositionPolicy>().is_err(), "{bad}");
        }
        let p = PositionPolicy::Explicit(vec![2, 9]);
        assert_eq!(p.to_string().parse::<PositionPolicy>().unwrap(), p);
    }

    #[test]
    fn null_skip_is_bit_identical() {
        let mut m = model(3);
        m.zero_block_outputs(1).unwrap();
        let t = toks(12);
        let base = m.forward(&t, &TraceSpec::all()).unwrap();
        let skipped = forward_with_skip(&m, &t, 1, 4).unwrap();
        assert_eq!(base.logits, skipped.logits);
    }

    #[test]
    fn last_position_skip_keeps_prefix() {
        let m = model(3);
        let t = toks(10);
        let base = m.forward(&t, &TraceSpec::all()).unwrap();
        let out = forward_with_skip(&m, &t, 0, 9).unwrap();
        for pos in 0..9 {
            assert_eq!(base.logits.row(pos), out.logits.row(pos));
        }
        assert_ne!(base.logits.row(9), out.logits.row(9));
        assert!(forward_with_skip(&m, &t, 3, 0).is_err());
        assert!(forward_with_skip(&m, &t, 0, 10).is_err());
    }

    #[test]
    fn row_over_two_positions_is_elementwise_max() {
        let m = model(4);
        let t = toks(16);
        let a = future_effect_row(&m, &t, 0, &[3]).unwrap();
        let b = future_effect_row(&m, &t, 0, &[11]).unwrap();
        let both = future_effect_row(&m, &t, 0, &[11, 3]).unwrap();
        for i in 0..3 {
            let (va, vb) = (a[i].value.unwrap(), b[i].value.unwrap());
            assert_eq!(both[i].value.unwrap(), va.max(vb));
            let p = if vb > va { 11 } else { 3 };
            assert_eq!(both[i].argmax_p, Some(p));
        }
        assert!(future_effect_row(&m, &t, 0, &[]).is_err());
        assert!(future_effect_row(&m, &t, 3, &[0]).is_err());
    }

    #[test]
    fn identity_network_rows_are_degenerate() {
        let mut m = model(3);
        for l in 0..3 {
            m.zero_block_outputs(l).unwrap();
        }
        let row = future_effect_row(&m, &toks(8), 0, &[0, 4]).unwrap();
        assert!(row.iter().all(EffectEntry::is_degenerate));
    }

    #[test]
    fn two_layer_map_has_one_entry() {
        let m = model(2);
        let traj = synthesize(Domain::CodeGeneration, 2, 1).unwrap();
        let tok = tokenize(&traj, 512).unwrap();
        let map = future_effect_map(&m, &tok, 1, &PositionPolicy::TurnBoundaries).unwrap();
        assert_eq!(map.entries().count(), 1);
        assert!(map.entry(0, 1).is_some());
        assert!(map.entry(1, 1).is_none() && map.entry(1, 0).is_none());
        let csv = map.to_csv();
        assert!(csv.starts_with("s,l,value,argmax_p,flag\n0,1,"));
    }

    #[test]
    fn explicit_and_stride_policies_agree() {
        let m = model(3);
        let traj = synthesize(Domain::DeepResearch, 1, 2).unwrap();
        let tok = tokenize(&traj, 512).unwrap();
        let n = tok.turn_len(1).unwrap();
        let a = future_effect_map(&m, &tok, 1, &PositionPolicy::Explicit(vec![0])).unwrap();
        let b = future_effect_map(&m, &tok, 1, &PositionPolicy::Stride(n + 5)).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert!(PositionPolicy::Explicit(vec![n]).resolve(&tok, 1).is_err());
    }

    #[test]
    fn logit_change_examples() {
        let mut m = model(3);
        let t = toks(12);
        m.zero_block_outputs(2).unwrap();
        assert_eq!(logit_change_norm(&m, &t, 2, 5).unwrap(), 0.0);

        // singleton future: the mean is that position's distance
        let base = m.forward(&t, &TraceSpec::all()).unwrap();
        let out = m
            .forward_skipped(&t, &Skip::through_position(0, 10), &TraceSpec::none())
            .unwrap();
        let want: f64 = base
            .logits
            .row(11)
            .iter()
            .zip(out.logits.row(11))
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert_eq!(logit_change_norm(&m, &t, 0, 10).unwrap(), want);
        assert!(logit_change_norm(&m, &t, 0, 11).is_err());
    }

    #[test]
    fn default_pivot_uses_previous_boundary() {
        let traj = synthesize(Domain::TabularProcessing, 3, 5).unwrap();
        let tok = tokenize(&traj, 512).unwrap();
        assert_eq!(default_pivot(&tok, 3).unwrap(), tok.boundary(2).unwrap());
        assert_eq!(default_pivot(&tok, 1).unwrap(), (tok.turn_len(1).unwrap() - 1) / 2);
    }
}
