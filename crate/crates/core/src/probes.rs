// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-geometry and output-stability probes, and the effective-depth
//! measurements built on them.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ResidualTrace};
use crate::numerics::{cosine_similarity, kl_divergence, softmax_slice, topk_indices, Cosine};
use crate::trajectory::Domain;

/// Default half-width of the injection band.
pub const DEFAULT_TAU: f64 = 0.05;
/// Tokens compared by the lens overlap.
pub const OVERLAP_K: usize = 5;
/// Overlap above which the lens counts as converged.
pub const OVERLAP_THRESHOLD: f64 = 0.3;
/// Fraction of the curve maximum the KL must fall to.
pub const KL_FRACTION: f64 = 0.5;

/// How per-position values collapse into one value per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

impl Aggregation {
    /// `None` for an empty input.
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        match self {
            Self::Mean => Some(values.iter().sum::<f64>() / values.len() as f64),
            Self::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let mid = v.len() / 2;
                Some(if v.len() % 2 == 1 {
                    v[mid]
                } else {
                    0.5 * (v[mid - 1] + v[mid])
                })
            }
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            _ => Err(Error::Param(format!("aggregation `{s}` is not mean or median"))),
        }
    }
}

/// Which update is compared against the incoming residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    /// `u_l = a_l + m_l`.
    Total,
    /// `a_l` alone.
    Attention,
    /// `m_l` alone.
    Moe,
}

impl Sublayer {
    pub const ALL: [Sublayer; 3] = [Sublayer::Total, Sublayer::Attention, Sublayer::Moe];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Total => "total",
            Self::Attention => "attention",
            Self::Moe => "moe",
        }
    }
}

/// `S(l, t) = cossim(update_l[t], h_l[t])` at the probed positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineProfile {
    pub turn: usize,
    pub sublayer: Sublayer,
    pub n_layers: usize,
    pub positions: Vec<usize>,
    /// Layer-major: entry `l * positions.len() + i`.
    values: Vec<Cosine>,
}

impl CosineProfile {
    /// The cosine at layer `l` and the `i`-th probed position.
    pub fn get(&self, l: usize, i: usize) -> Option<Cosine> {
        (l < self.n_layers && i < self.positions.len()).then(|| self.values[l * self.positions.len() + i])
    }

    /// Cosines at layer `l` in position order.
    pub fn layer(&self, l: usize) -> &[Cosine] {
        let p = self.positions.len();
        &self.values[l * p..(l + 1) * p]
    }

    /// Aggregate over the non-degenerate entries of layer `l`; `None` when
    /// every entry is degenerate.
    pub fn aggregate(&self, l: usize, agg: Aggregation) -> Option<f64> {
        let vals: Vec<f64> = self
            .layer(l)
            .iter()
            .filter(|c| !c.degenerate)
            .map(|c| c.value)
            .collect();
        agg.apply(&vals)
    }

    /// Per-layer aggregates.
    pub fn aggregates(&self, agg: Aggregation) -> Vec<Option<f64>> {
        (0..self.n_layers).map(|l| self.aggregate(l, agg)).collect()
    }

    /// CSV with header `layer,position,value`; degenerate entries have an
    /// empty value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,position,value\n");
        for l in 0..self.n_layers {
            for (i, &t) in self.positions.iter().enumerate() {
                let c = self.values[l * self.positions.len() + i];
                if c.degenerate {
                    out.push_str(&format!("{l},{t},\n"));
                } else {
                    out.push_str(&format!("{l},{t},{}\n", c.value));
                }
            }
        }
        out
    }
}

/// Cosine between each layer's update and its input residual.
pub fn residual_cosine_profile(
    trace: &ResidualTrace,
    turn: usize,
    positions: &[usize],
    sublayer: Sublayer,
) -> Result<CosineProfile> {
    let n_layers = trace.n_layers();
    let mut values = Vec::with_capacity(n_layers * positions.len());
    for l in 0..n_layers {
        for &t in positions {
            let h = trace.residual_in(l, t)?;
            let c = match sublayer {
                Sublayer::Total => cosine_similarity(&trace.update(l, t)?, h)?,
                Sublayer::Attention => cosine_similarity(trace.attn(l, t)?, h)?,
                Sublayer::Moe => cosine_similarity(trace.moe(l, t)?, h)?,
            };
            values.push(c);
        }
    }
    Ok(CosineProfile {
        turn,
        sublayer,
        n_layers,
        positions: positions.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Injection,
    Amplification,
    Correction,
}

/// `|s| <= tau` is injection; otherwise the sign decides.
pub fn classify_regime(s: f64, tau: f64) -> Regime {
    if s.abs() <= tau {
        Regime::Injection
    } else if s > 0.0 {
        Regime::Amplification
    } else {
        Regime::Correction
    }
}

/// Number of switches between amplification and correction along the
/// sequence. Injection entries are skipped, so a sign change across the
/// band counts once.
pub fn count_phase_changes(seq: &[f64], tau: f64) -> usize {
    let phases: Vec<Regime> = seq
        .iter()
        .map(|&s| classify_regime(s, tau))
        .filter(|&r| r != Regime::Injection)
        .collect();
    phases.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Orientation of the lens KL.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(final ‖ lens)`.
    #[default]
    FinalToLens,
    /// `KL(lens ‖ final)`.
    LensToFinal,
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_to_lens" => Ok(Self::FinalToLens),
            "lens_to_final" => Ok(Self::LensToFinal),
            _ => Err(Error::Param(format!(
                "kl direction `{s}` is not final_to_lens or lens_to_final"
            ))),
        }
    }
}

/// Distribution read off the residual after block `l` at position `t`,
/// decoded through the model's own final norm and unembedding.
pub fn logit_lens(model: &Model, trace: &ResidualTrace, l: usize, t: usize) -> Result<Vec<f32>> {
    softmax_slice(&model.output_logits(trace.residual_out(l, t)?))
}

/// `|topk(a) ∩ topk(b)| / k` with ties going to the lower token id.
pub fn topk_overlap(a: &[f32], b: &[f32], k: usize) -> Result<f64> {
    let ta = topk_indices(a, k)?;
    let tb = topk_indices(b, k)?;
    let shared = ta.iter().filter(|i| tb.contains(i)).count();
    Ok(shared as f64 / k as f64)
}

/// Per-layer lens divergence from, and top-5 agreement with, the final
/// distribution, averaged over the probed positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCurves {
    pub turn: usize,
    pub positions: Vec<usize>,
    pub direction: KlDirection,
    pub kl: Vec<f64>,
    pub overlap: Vec<f64>,
}

impl LensCurves {
    /// CSV with header `layer,kl,overlap`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kl,overlap\n");
        for (l, (kl, ov)) in self.kl.iter().zip(&self.overlap).enumerate() {
            out.push_str(&format!("{l},{kl},{ov}\n"));
        }
        out
    }
}

pub fn lens_curves(
    model: &Model,
    trace: &ResidualTrace,
    turn: usize,
    positions: &[usize],
    direction: KlDirection,
) -> Result<LensCurves> {
    if positions.is_empty() {
        return Err(Error::Param("lens curves need at least one position".into()));
    }
    let last = trace.n_layers() - 1;
    let finals = positions
        .iter()
        .map(|&t| logit_lens(model, trace, last, t))
        .collect::<Result<Vec<_>>>()?;
    let per_layer = (0..trace.n_layers())
        .into_par_iter()
        .map(|l| {
            let mut kl = 0.0;
            let mut overlap = 0.0;
            for (&t, fin) in positions.iter().zip(&finals) {
                let lens = logit_lens(model, trace, l, t)?;
                kl += match direction {
                    KlDirection::FinalToLens => kl_divergence(fin, &lens)?,
                    KlDirection::LensToFinal => kl_divergence(&lens, fin)?,
                };
                overlap += topk_overlap(&lens, fin, OVERLAP_K)?;
            }
            let n = positions.len() as f64;
            Ok((kl / n, overlap / n))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LensCurves {
        turn,
        positions: positions.to_vec(),
        direction,
        kl: per_layer.iter().map(|p| p.0).collect(),
        overlap: per_layer.iter().map(|p| p.1).collect(),
    })
}

/// Why an effective depth is not a plain crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFlag {
    /// The cosine curve never goes negative; depth reported as 0.
    NeverNegative,
    /// The criterion is never met; depth reported as `L − 1`.
    Never,
    /// The curve carries no signal (all-zero KL); depth reported as 0.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthEstimate {
    pub layer: usize,
    pub flag: Option<DepthFlag>,
}

impl DepthEstimate {
    pub fn plain(layer: usize) -> Self {
        Self { layer, flag: None }
    }
}

/// One past the last layer with a negative cosine.
pub fn effective_depth_cosine(s: &[f64]) -> DepthEstimate {
    match s.iter().rposition(|&v| v < 0.0) {
        Some(l) => DepthEstimate::plain(l + 1),
        None => DepthEstimate {
            layer: 0,
            flag: Some(DepthFlag::NeverNegative),
        },
    }
}

fn check_curve(curve: &[f64], what: &str) -> Result<()> {
    if curve.is_empty() {
        return Err(Error::Param(format!("empty {what} curve")));
    }
    if curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::Param(format!("{what} curve has a non-finite value")));
    }
    Ok(())
}

/// First layer, at or after the curve's peak, whose KL is at most half the
/// peak value.
pub fn effective_depth_kl(kl: &[f64]) -> Result<DepthEstimate> {
    check_curve(kl, "kl")?;
    if kl.iter().any(|&v| v < 0.0) {
        return Err(Error::Param("kl curve has a negative value".into()));
    }
    let (peak, max) = kl
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (l, v)| if v > best.1 { (l, v) } else { best });
    if max == 0.0 {
        return Ok(DepthEstimate {
            layer: 0,
            flag: Some(DepthFlag::Degenerate),
        });
    }
    let threshold = KL_FRACTION * max;
    Ok(match kl[peak..].iter().position(|&v| v <= threshold) {
        Some(i) => DepthEstimate::plain(peak + i),
        None => DepthEstimate {
            layer: kl.len() - 1,
            flag: Some(DepthFlag::Never),
        },
    })
}

/// First layer whose top-5 overlap exceeds 0.3.
pub fn effective_depth_overlap(overlap: &[f64]) -> Result<DepthEstimate> {
    check_curve(overlap, "overlap")?;
    if overlap.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Param("overlap curve leaves [0, 1]".into()));
    }
    Ok(match overlap.iter().position(|&v| v > OVERLAP_THRESHOLD) {
        Some(l) => DepthEstimate::plain(l),
        None => DepthEstimate {
            layer: overlap.len() - 1,
            flag: Some(DepthFlag::Never),
        },
    })
}

/// How an effective depth is normalized by the layer count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioConvention {
    /// `ED / L`.
    #[default]
    EdOverL,
    /// `(ED + 1) / L`.
    EdPlus1OverL,
}

impl RatioConvention {
    pub fn other(self) -> Self {
        match self {
            Self::EdOverL => Self::EdPlus1OverL,
            Self::EdPlus1OverL => Self::EdOverL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::EdOverL => "ed",
            Self::EdPlus1OverL => "ed-plus-1",
        }
    }
}

impl fmt::Display for RatioConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RatioConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ed" | "ed_over_l" => Ok(Self::EdOverL),
            "ed-plus-1" | "ed_plus1_over_l" => Ok(Self::EdPlus1OverL),
            _ => Err(Error::Param(format!("ratio convention `{s}` is not ed or ed-plus-1"))),
        }
    }
}

/// Normalized depth at full precision. `ed == n_layers` is accepted (a
/// cosine curve negative at its last layer reaches it) and is reported as a
/// boundary case by [`EffectiveDepthReport`].
pub fn depth_ratio(ed: usize, n_layers: usize, convention: RatioConvention) -> Result<f64> {
    if n_layers == 0 {
        return Err(Error::Param("layer count must be positive".into()));
    }
    if ed > n_layers {
        return Err(Error::Param(format!("depth {ed} exceeds layer count {n_layers}")));
    }
    let num = match convention {
        RatioConvention::EdOverL => ed,
        RatioConvention::EdPlus1OverL => ed + 1,
    };
    Ok(num as f64 / n_layers as f64)
}

/// Two-decimal display form.
pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.2}")
}

/// One criterion's depth under both conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionDepth {
    pub ed: usize,
    pub flag: Option<DepthFlag>,
    /// Under the report's convention.
    pub ratio: f64,
    pub ratio_display: String,
    /// Under the other convention.
    pub alt_ratio: f64,
    pub alt_ratio_display: String,
    /// `ed == L`.
    pub boundary: bool,
}

impl CriterionDepth {
    fn new(est: DepthEstimate, n_layers: usize, convention: RatioConvention) -> Result<Self> {
        let ratio = depth_ratio(est.layer, n_layers, convention)?;
        let alt_ratio = depth_ratio(est.layer, n_layers, convention.other())?;
        Ok(Self {
            ed: est.layer,
            flag: est.flag,
            ratio,
            ratio_display: format_ratio(ratio),
            alt_ratio,
            alt_ratio_display: format_ratio(alt_ratio),
            boundary: est.layer == n_layers,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Cosine,
    Kl,
    Overlap,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Cosine, Criterion::Kl, Criterion::Overlap];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Kl => "kl",
            Self::Overlap => "overlap",
        }
    }
}

/// Effective depths of one model on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDepthReport {
    pub model_label: String,
    pub domain: Domain,
    pub turn: usize,
    pub n_layers: usize,
    pub convention: RatioConvention,
    pub cosine: CriterionDepth,
    pub kl: CriterionDepth,
    pub overlap: CriterionDepth,
    /// Some displayed ratio differs between the two conventions.
    pub convention_mismatch: bool,
}

impl EffectiveDepthReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_label: impl Into<String>,
        domain: Domain,
        turn: usize,
        n_layers: usize,
        cosine: DepthEstimate,
        kl: DepthEstimate,
        overlap: DepthEstimate,
        convention: RatioConvention,
    ) -> Result<Self> {
        let cosine = CriterionDepth::new(cosine, n_layers, convention)?;
        let kl = CriterionDepth::new(kl, n_layers, convention)?;
        let overlap = CriterionDepth::new(overlap, n_layers, convention)?;
        let convention_mismatch = [&cosine, &kl, &overlap]
            .iter()
            .any(|c| c.ratio_display != c.alt_ratio_display);
        Ok(Self {
            model_label: model_label.into(),
            domain,
            turn,
            n_layers,
            convention,
            cosine,
            kl,
            overlap,
            convention_mismatch,
        })
    }

    pub fn criterion(&self, c: Criterion) -> &CriterionDepth {
        match c {
            Criterion::Cosine => &self.cosine,
            Criterion::Kl => &self.kl,
            Criterion::Overlap => &self.overlap,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A published `(ED, L, ratio)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TabulatedDepth {
    pub ed: usize,
    pub n_layers: usize,
    pub ratio: f64,
}

/// Which tabulated ratios each convention reproduces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionAudit {
    pub total: usize,
    /// Indices of cells that `ED / L` fails to reproduce.
    pub ed_over_l_failures: Vec<usize>,
    /// Indices of cells that `(ED + 1) / L` fails to reproduce.
    pub ed_plus1_failures: Vec<usize>,
}

impl ConventionAudit {
    /// The conventions disagree on at least one cell.
    pub fn discrepancy(&self) -> bool {
        self.ed_over_l_failures != self.ed_plus1_failures
    }
}

/// Checks each cell's two-decimal ratio against both conventions within
/// `tol`.
pub fn audit_conventions(cells: &[TabulatedDepth], tol: f64) -> Result<ConventionAudit> {
    let mut audit = ConventionAudit {
        total: cells.len(),
        ed_over_l_failures: Vec::new(),
        ed_plus1_failures: Vec::new(),
    };
    for (i, c) in cells.iter().enumerate() {
        for (conv, fails) in [
            (RatioConvention::EdOverL, &mut audit.ed_over_l_failures),
            (RatioConvention::EdPlus1OverL, &mut audit.ed_plus1_failures),
        ] {
            let shown: f64 = format_ratio(depth_ratio(c.ed, c.n_layers, conv)?)
                .parse()
                .map_err(|_| Error::Param("unparseable ratio".into()))?;
            if (shown - c.ratio).abs() > tol {
                fails.push(i);
            }
        }
    }
    Ok(audit)
}
