// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs.
//!
//! A [`RunConfig`] names a model, a set of trajectories and the turns to
//! analyze. Every (trajectory, turn) pair is an independent cell: it gets one
//! baseline forward and then the Future Effect map, the logit change
//! profile, the three cosine profiles, the lens curves and an
//! effective-depth report. Cells are computed in parallel, kept in memory,
//! then written in a fixed order. A failing cell is recorded in the manifest
//! and leaves the others untouched.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.json
//! effective_depth_table.csv
//! manifest.json
//! t00_code_generation/turn_01/future_effect.{csv,json,svg}
//!                            /logit_change.{csv,json,svg}
//!                            /cosine_{total,attention,moe}.csv
//!                            /cosine_layers.svg
//!                            /lens.{csv,svg}
//!                            /effective_depth.json
//! ```

mod svg;
mod table;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use svg::{bar_chart_svg, emit_heatmap_svg, heatmap_svg, ChartLabels, ColorScale};
pub use table::{ed_table_csv, emit_ed_table};

use crate::causal::{
    future_effect_map_with_baseline, logit_change_profile_with_baseline, FutureEffectMap, LogitChangeProfile,
    PositionPolicy,
};
use crate::error::{Error, Result};
use crate::model::{load_weights, Model, ModelConfig, TraceSpec};
use crate::probes::{
    count_phase_changes, effective_depth_cosine, effective_depth_kl, effective_depth_overlap, lens_curves,
    residual_cosine_profile, Aggregation, CosineProfile, EffectiveDepthReport, KlDirection, LensCurves,
    RatioConvention, Sublayer, DEFAULT_TAU,
};
use crate::trajectory::{load_trajectory, synthesize, tokenize, Domain, TokenizedTrajectory, Trajectory};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TABLE_FILE: &str = "effective_depth_table.csv";

/// Where the weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// A weight container on disk.
    Weights(PathBuf),
    /// Random initialization from a config (its `seed` included).
    Random(ModelConfig),
}

impl ModelSource {
    pub fn load(&self) -> Result<Model> {
        match self {
            Self::Weights(p) => load_weights(p),
            Self::Random(cfg) => Model::random(cfg.clone()),
        }
    }
}

/// Parameters for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub domain: Domain,
    pub turns: usize,
    pub seed: u64,
}

/// Where a trajectory comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySource {
    Path(PathBuf),
    Synth(SynthSpec),
}

impl TrajectorySource {
    pub fn load(&self) -> Result<Trajectory> {
        match self {
            Self::Path(p) => load_trajectory(p),
            Self::Synth(s) => synthesize(s.domain, s.turns, s.seed),
        }
    }

    /// Short human-readable origin.
    pub fn describe(&self) -> String {
        match self {
            Self::Path(p) => p.display().to_string(),
            Self::Synth(s) => format!("synth:{}:{}:{}", s.domain, s.turns, s.seed),
        }
    }
}

fn default_label() -> String {
    "model".into()
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

/// Everything a run depends on. Relative paths resolve against the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    #[serde(default = "default_label")]
    pub model_label: String,
    pub trajectories: Vec<TrajectorySource>,
    /// Turns to analyze; all turns when absent.
    #[serde(default)]
    pub turns: Option<Vec<usize>>,
    #[serde(default)]
    pub policy: PositionPolicy,
    /// Logit change pivot; the default pivot of each turn when absent.
    #[serde(default)]
    pub pivot: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub ratio_convention: RatioConvention,
    pub out_dir: PathBuf,
    /// Adds wall-clock timings to the manifest, which makes it
    /// nondeterministic.
    #[serde(default)]
    pub record_timings: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Param("run config lists no trajectories".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Param(format!("tau {} outside (0, 1)", self.tau)));
        }
        if let Some(ts) = &self.turns {
            if ts.is_empty() || ts.contains(&0) {
                return Err(Error::Param("turns must be a nonempty list of 1-based indices".into()));
            }
        }
        if self.model_label.is_empty() || self.model_label.contains([',', '\n']) {
            return Err(Error::Param(
                "model_label must be nonempty without commas or newlines".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON encoding.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_value(self)?.to_string().as_bytes()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything computed for one (trajectory, turn) pair.
#[derive(Debug, Clone)]
pub struct TurnAnalysis {
    pub domain: Domain,
    pub turn: usize,
    pub n_tokens: usize,
    pub positions: Vec<usize>,
    pub future_effect: FutureEffectMap,
    pub logit_change: LogitChangeProfile,
    /// Total, attention-only and MoE-only, in [`Sublayer::ALL`] order.
    pub cosine: Vec<CosineProfile>,
    pub lens: LensCurves,
    pub report: EffectiveDepthReport,
    /// Per-layer aggregate of the total-update cosine.
    pub cosine_layers: Vec<Option<f64>>,
    pub phase_changes: usize,
}

/// Analysis settings shared by every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub model_label: String,
    pub policy: PositionPolicy,
    pub pivot: Option<usize>,
    pub tau: f64,
    pub kl_direction: KlDirection,
    pub aggregation: Aggregation,
    pub ratio_convention: RatioConvention,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            model_label: default_label(),
            policy: PositionPolicy::default(),
            pivot: None,
            tau: DEFAULT_TAU,
            kl_direction: KlDirection::default(),
            aggregation: Aggregation::default(),
            ratio_convention: RatioConvention::default(),
        }
    }
}

impl From<&RunConfig> for AnalysisOptions {
    fn from(c: &RunConfig) -> Self {
        Self {
            model_label: c.model_label.clone(),
            policy: c.policy.clone(),
            pivot: c.pivot,
            tau: c.tau,
            kl_direction: c.kl_direction,
            aggregation: c.aggregation,
            ratio_convention: c.ratio_convention,
        }
    }
}

/// Runs every probe on turn `r`.
pub fn analyze_turn(
    model: &Model,
    tok: &TokenizedTrajectory,
    domain: Domain,
    r: usize,
    opts: &AnalysisOptions,
) -> Result<TurnAnalysis> {
    let tokens = tok.prefix_for_turn(r)?;
    let positions = opts.policy.resolve(tok, r)?;
    let baseline = model.forward(tokens, &TraceSpec::all())?;
    let future_effect = future_effect_map_with_baseline(model, &baseline, tokens, r, &opts.policy, positions.clone())?;
    let logit_change = logit_change_profile_with_baseline(model, &baseline, tok, r, opts.pivot)?;
    let cosine = Sublayer::ALL
        .iter()
        .map(|&s| residual_cosine_profile(&baseline.trace, r, &positions, s))
        .collect::<Result<Vec<_>>>()?;
    let lens = lens_curves(model, &baseline.trace, r, &positions, opts.kl_direction)?;

    let depth = effective_depth_from_curves(&cosine[0], &lens, domain, model.n_layers(), opts)?;
    Ok(TurnAnalysis {
        domain,
        turn: r,
        n_tokens: tokens.len(),
        positions,
        future_effect,
        logit_change,
        cosine,
        lens,
        report: depth.report,
        phase_changes: depth.phase_changes,
        cosine_layers: depth.cosine_layers,
    })
}

/// Effective depths and the cosine summary behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSummary {
    pub report: EffectiveDepthReport,
    pub cosine_layers: Vec<Option<f64>>,
    pub phase_changes: usize,
}

/// Applies the three depth criteria to a total-update cosine profile and
/// lens curves of the same turn.
pub fn effective_depth_from_curves(
    cosine_total: &CosineProfile,
    lens: &LensCurves,
    domain: Domain,
    n_layers: usize,
    opts: &AnalysisOptions,
) -> Result<DepthSummary> {
    let cosine_layers = cosine_total.aggregates(opts.aggregation);
    // an all-degenerate layer carries no sign; it counts as non-negative
    let s_curve: Vec<f64> = cosine_layers.iter().map(|v| v.unwrap_or(0.0)).collect();
    let report = EffectiveDepthReport::new(
        opts.model_label.clone(),
        domain,
        cosine_total.turn,
        n_layers,
        effective_depth_cosine(&s_curve),
        effective_depth_kl(&lens.kl)?,
        effective_depth_overlap(&lens.overlap)?,
        opts.ratio_convention,
    )?;
    Ok(DepthSummary {
        report,
        phase_changes: if s_curve.len() >= 2 {
            count_phase_changes(&s_curve, opts.tau)
        } else {
            0
        },
        cosine_layers,
    })
}

#[derive(Serialize)]
struct FutureEffectSidecar<'a> {
    turn: usize,
    policy: String,
    positions: &'a [usize],
    n_layers: usize,
    n_tokens: usize,
    defined_entries: usize,
    config_digest: &'a str,
    model_digest: &'a str,
}

#[derive(Serialize)]
struct LogitChangeSidecar<'a> {
    turn: usize,
    pivot: usize,
    n_tokens: usize,
    kl_values: &'a [f64],
    config_digest: &'a str,
    model_digest: &'a str,
}

#[derive(Serialize)]
struct DepthRecord<'a> {
    #[serde(flatten)]
    report: &'a EffectiveDepthReport,
    phase_changes: usize,
    tau: f64,
    cosine_layers: &'a [Option<f64>],
}

fn json_bytes(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Digests stamped into sidecar files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_digest: String,
    pub model_digest: String,
}

impl Provenance {
    pub fn of(model: &Model) -> Self {
        Self {
            config_digest: model.config().digest(),
            model_digest: model.digest(),
        }
    }
}

/// Future Effect CSV, JSON sidecar and heatmap, keyed by file name.
pub fn future_effect_artifacts(map: &FutureEffectMap, prov: &Provenance) -> Result<Vec<(String, Vec<u8>)>> {
    let sidecar = FutureEffectSidecar {
        turn: map.turn,
        policy: map.policy.to_string(),
        positions: &map.positions,
        n_layers: map.n_layers,
        n_tokens: map.n_tokens,
        defined_entries: map.defined_count(),
        config_digest: &prov.config_digest,
        model_digest: &prov.model_digest,
    };
    let labels = ChartLabels::future_effect(format!("Future Effect, turn {}", map.turn));
    Ok(vec![
        ("future_effect.csv".into(), map.to_csv().into_bytes()),
        ("future_effect.json".into(), json_bytes(&sidecar)?),
        (
            "future_effect.svg".into(),
            heatmap_svg(&map.matrix(), None, &labels)?.into_bytes(),
        ),
    ])
}

/// Logit change CSV, sidecar and bar chart.
pub fn logit_change_artifacts(p: &LogitChangeProfile, prov: &Provenance) -> Result<Vec<(String, Vec<u8>)>> {
    let sidecar = LogitChangeSidecar {
        turn: p.turn,
        pivot: p.pivot,
        n_tokens: p.n_tokens,
        kl_values: &p.kl_values,
        config_digest: &prov.config_digest,
        model_digest: &prov.model_digest,
    };
    let labels = ChartLabels {
        title: format!("Logit change, turn {} (pivot {})", p.turn, p.pivot),
        x: "s (skipped layer)".into(),
        y: "D(s)".into(),
    };
    let bars: Vec<Option<f64>> = p.values.iter().copied().map(Some).collect();
    Ok(vec![
        ("logit_change.csv".into(), p.to_csv().into_bytes()),
        ("logit_change.json".into(), json_bytes(&sidecar)?),
        ("logit_change.svg".into(), bar_chart_svg(&bars, &labels)?.into_bytes()),
    ])
}

/// One CSV per cosine variant.
pub fn cosine_artifacts(profiles: &[CosineProfile]) -> Vec<(String, Vec<u8>)> {
    profiles
        .iter()
        .map(|p| (format!("cosine_{}.csv", p.sublayer.as_str()), p.to_csv().into_bytes()))
        .collect()
}

/// Lens CSV and a KL bar chart.
pub fn lens_artifacts(lens: &LensCurves) -> Result<Vec<(String, Vec<u8>)>> {
    let labels = ChartLabels {
        title: format!("Logit lens KL, turn {}", lens.turn),
        x: "layer".into(),
        y: "KL".into(),
    };
    let bars: Vec<Option<f64>> = lens.kl.iter().copied().map(Some).collect();
    Ok(vec![
        ("lens.csv".into(), lens.to_csv().into_bytes()),
        ("lens.svg".into(), bar_chart_svg(&bars, &labels)?.into_bytes()),
    ])
}

/// The `effective_depth.json` record.
pub fn depth_artifact(
    report: &EffectiveDepthReport,
    cosine_layers: &[Option<f64>],
    phase_changes: usize,
    tau: f64,
) -> Result<(String, Vec<u8>)> {
    let record = DepthRecord {
        report,
        phase_changes,
        tau,
        cosine_layers,
    };
    Ok(("effective_depth.json".into(), json_bytes(&record)?))
}

impl TurnAnalysis {
    /// Every file of the cell, keyed by file name.
    pub fn artifacts(&self, prov: &Provenance, tau: f64) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = future_effect_artifacts(&self.future_effect, prov)?;
        out.extend(logit_change_artifacts(&self.logit_change, prov)?);
        out.extend(cosine_artifacts(&self.cosine));
        let labels = ChartLabels {
            title: format!("Residual cosine by layer, turn {}", self.turn),
            x: "layer".into(),
            y: "S".into(),
        };
        out.push((
            "cosine_layers.svg".into(),
            bar_chart_svg(&self.cosine_layers, &labels)?.into_bytes(),
        ));
        out.extend(lens_artifacts(&self.lens)?);
        out.push(depth_artifact(
            &self.report,
            &self.cosine_layers,
            self.phase_changes,
            tau,
        )?);
        Ok(out)
    }
}

/// One emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Outcome of one (trajectory, turn) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub trajectory: usize,
    pub source: String,
    /// Absent when the trajectory itself failed to load.
    pub turn: Option<usize>,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

/// Index of a run's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub model_config_digest: String,
    pub model_digest: String,
    pub model_label: String,
    /// Sorted by path; covers every file except the manifest itself.
    pub artifacts: Vec<ArtifactRecord>,
    pub cells: Vec<CellRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_ms: Option<u64>,
}

impl RunManifest {
    pub fn failed_cells(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn files_under(root: &Path) -> Result<BTreeSet<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walked path lies under root");
                let parts: Vec<String> = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                out.insert(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    if root.exists() {
        walk(root, root, &mut out)?;
    }
    Ok(out)
}

/// Checks that the manifest in `out_dir` lists exactly the files present,
/// each with a matching digest.
pub fn verify_manifest(out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let dir = out_dir.as_ref();
    let manifest = RunManifest::load(dir.join(MANIFEST_FILE))?;
    let mut present = files_under(dir)?;
    present.remove(MANIFEST_FILE);
    let listed: BTreeSet<String> = manifest.artifacts.iter().map(|a| a.path.clone()).collect();
    if let Some(extra) = present.difference(&listed).next() {
        return Err(Error::Param(format!("`{extra}` is not listed in the manifest")));
    }
    for a in &manifest.artifacts {
        let path = dir.join(&a.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != a.sha256 {
            return Err(Error::Param(format!("digest mismatch for `{}`", a.path)));
        }
    }
    Ok(manifest)
}

/// Makes `dir` ready for a fresh run: files listed by a previous manifest
/// are removed, anything else makes the run refuse to start.
fn prepare_out_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut present = files_under(dir)?;
        if !present.is_empty() {
            let manifest_path = dir.join(MANIFEST_FILE);
            if !manifest_path.exists() {
                return Err(Error::Param(format!(
                    "output directory {} is not empty and holds no manifest",
                    dir.display()
                )));
            }
            let old = RunManifest::load(&manifest_path)?;
            present.remove(MANIFEST_FILE);
            let listed: BTreeSet<String> = old.artifacts.iter().map(|a| a.path.clone()).collect();
            if let Some(foreign) = present.difference(&listed).next() {
                return Err(Error::Param(format!(
                    "output directory holds `{foreign}`, which the previous manifest does not list"
                )));
            }
            for rel in present.iter().chain(std::iter::once(&MANIFEST_FILE.to_string())) {
                let p = dir.join(rel);
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

type Loaded = (Domain, TokenizedTrajectory);

struct Cell {
    trajectory: usize,
    source: String,
    domain: Option<Domain>,
    turn: Option<usize>,
    outcome: Result<Vec<(String, Vec<u8>)>>,
    report: Option<EffectiveDepthReport>,
    elapsed_ms: u64,
}

fn cell_dir(i: usize, domain: Domain, turn: usize) -> String {
    format!("t{i:02}_{domain}/turn_{turn:02}")
}

/// Runs the whole configured sweep and writes the output directory.
///
/// Model or directory problems abort the run; everything that goes wrong
/// inside a cell is recorded in the manifest instead.
pub fn run_turn_analysis(config: &RunConfig) -> Result<RunManifest> {
    let started = Instant::now();
    config.validate()?;
    let config_digest = config.digest()?;
    let model = config.model.load()?;
    let prov = Provenance::of(&model);
    let opts = AnalysisOptions::from(config);

    let loaded: Vec<(usize, String, Result<Loaded>)> = config
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, src)| {
            let tok = src
                .load()
                .and_then(|t| Ok((t.domain, tokenize(&t, model.config().vocab_size)?)));
            (i, src.describe(), tok)
        })
        .collect();

    let mut jobs = Vec::new();
    let mut cells = Vec::new();
    for (i, source, tok) in &loaded {
        match tok {
            Ok((domain, tok)) => {
                let turns = config.turns.clone().unwrap_or_else(|| (1..=tok.n_turns()).collect());
                for r in turns {
                    jobs.push((*i, source.clone(), *domain, tok, r));
                }
            }
            Err(e) => cells.push(Cell {
                trajectory: *i,
                source: source.clone(),
                domain: None,
                turn: None,
                outcome: Err(Error::Param(e.to_string())),
                report: None,
                elapsed_ms: 0,
            }),
        }
    }
    let computed: Vec<Cell> = jobs
        .par_iter()
        .map(|(i, source, domain, tok, r)| {
            let t0 = Instant::now();
            let analysis = analyze_turn(&model, tok, *domain, *r, &opts);
            let (outcome, report) = match analysis {
                Ok(a) => (a.artifacts(&prov, opts.tau), Some(a.report)),
                Err(e) => (Err(e), None),
            };
            Cell {
                trajectory: *i,
                source: source.clone(),
                domain: Some(*domain),
                turn: Some(*r),
                outcome,
                report,
                elapsed_ms: t0.elapsed().as_millis() as u64,
            }
        })
        .collect();
    cells.extend(computed);
    cells.sort_by_key(|c| (c.trajectory, c.turn));

    let mut files: Vec<(String, Vec<u8>)> = vec![(CONFIG_FILE.into(), config.to_json()?.into_bytes())];
    let mut records = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut record = CellRecord {
            trajectory: cell.trajectory,
            source: cell.source.clone(),
            turn: cell.turn,
            status: CellStatus::Ok,
            error: None,
            elapsed_ms: config.record_timings.then_some(cell.elapsed_ms),
        };
        match (&cell.outcome, cell.domain, cell.turn) {
            (Ok(arts), Some(domain), Some(turn)) => {
                let dir = cell_dir(cell.trajectory, domain, turn);
                files.extend(
                    arts.iter()
                        .map(|(name, bytes)| (format!("{dir}/{name}"), bytes.clone())),
                );
            }
            (Err(e), _, _) => {
                record.status = CellStatus::Failed;
                record.error = Some(e.to_string());
            }
            _ => unreachable!("successful cells carry a domain and turn"),
        }
        records.push(record);
    }

    // table: last successful turn of the first trajectory of each domain
    let mut table_reports: Vec<EffectiveDepthReport> = Vec::new();
    for domain in Domain::ALL {
        let of_domain: Vec<(usize, &EffectiveDepthReport)> = cells
            .iter()
            .filter_map(|c| {
                c.report
                    .as_ref()
                    .filter(|r| r.domain == domain)
                    .map(|r| (c.trajectory, r))
            })
            .collect();
        if let Some(&(first, _)) = of_domain.first() {
            let last = of_domain
                .iter()
                .rev()
                .find(|(t, _)| *t == first)
                .expect("first is present");
            table_reports.push(last.1.clone());
        }
    }
    if !table_reports.is_empty() {
        files.push((TABLE_FILE.into(), ed_table_csv(&table_reports)?.into_bytes()));
    }

    let out_dir = &config.out_dir;
    prepare_out_dir(out_dir)?;
    let mut artifacts = Vec::with_capacity(files.len());
    for (rel, bytes) in &files {
        let path = out_dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        artifacts.push(ArtifactRecord {
            path: rel.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = RunManifest {
        config_digest,
        model_config_digest: prov.config_digest,
        model_digest: prov.model_digest,
        model_label: config.model_label.clone(),
        artifacts,
        cells: records,
        total_ms: config.record_timings.then(|| started.elapsed().as_millis() as u64),
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, json_bytes(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Which artifact a CSV holds, judged by its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvKind {
    FutureEffect,
    Cosine,
    LogitChange,
    Lens,
}

fn parse_f64(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Param(format!("line {line}: `{s}` is not a number")))
}

fn parse_index(s: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Param(format!("line {line}: `{s}` is not an index")))
}

/// Renders an emitted CSV as SVG: Future Effect and cosine CSVs become
/// heatmaps, logit change and lens CSVs become bar charts.
pub fn render_csv(csv: &str, title: &str) -> Result<(CsvKind, String)> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| Error::Param("empty CSV".into()))?;
    let kind = match header.trim() {
        "s,l,value,argmax_p,flag" => CsvKind::FutureEffect,
        "layer,position,value" => CsvKind::Cosine,
        "s,value" => CsvKind::LogitChange,
        "layer,kl,overlap" => CsvKind::Lens,
        other => return Err(Error::Param(format!("unrecognized CSV header `{other}`"))),
    };
    let rows: Vec<(usize, Vec<&str>)> = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 2, l.split(',').collect()))
        .collect();
    let width = header.split(',').count();
    if let Some((i, _)) = rows.iter().find(|(_, r)| r.len() != width) {
        return Err(Error::Param(format!("line {i}: expected {width} fields")));
    }
    if rows.is_empty() {
        return Err(Error::Param("CSV has no data rows".into()));
    }
    let svg = match kind {
        CsvKind::FutureEffect => {
            let mut cells = Vec::new();
            for (i, r) in &rows {
                cells.push((parse_index(r[0], *i)?, parse_index(r[1], *i)?, parse_f64(r[2], *i)?));
            }
            let n = cells.iter().map(|c| c.0.max(c.1)).max().unwrap_or(0) + 1;
            let mut m = vec![vec![None; n]; n];
            for (s, l, v) in cells {
                m[s][l] = v;
            }
            heatmap_svg(&m, None, &ChartLabels::future_effect(title))?
        }
        CsvKind::Cosine => {
            let mut cells = Vec::new();
            for (i, r) in &rows {
                cells.push((parse_index(r[0], *i)?, parse_index(r[1], *i)?, parse_f64(r[2], *i)?));
            }
            let layers = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
            let positions: Vec<usize> = cells.iter().map(|c| c.1).collect::<BTreeSet<_>>().into_iter().collect();
            let mut m = vec![vec![None; positions.len()]; layers];
            for (l, t, v) in cells {
                let j = positions.binary_search(&t).expect("position collected above");
                m[l][j] = v;
            }
            let labels = ChartLabels {
                title: title.into(),
                x: "probe position index".into(),
                y: "layer".into(),
            };
            heatmap_svg(&m, Some(ColorScale { min: -1.0, max: 1.0 }), &labels)?
        }
        CsvKind::LogitChange | CsvKind::Lens => {
            let mut vals = Vec::new();
            for (i, r) in &rows {
                vals.push(parse_f64(r[1], *i)?);
            }
            let (x, y) = if kind == CsvKind::Lens {
                ("layer", "KL")
            } else {
                ("s (skipped layer)", "D(s)")
            };
            bar_chart_svg(
                &vals,
                &ChartLabels {
                    title: title.into(),
                    x: x.into(),
                    y: y.into(),
                },
            )?
        }
    };
    Ok((kind, svg))
}
