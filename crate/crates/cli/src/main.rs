// SPDX-License-Identifier: MIT OR Apache-2.0

//! `depthscope` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use depthscope::causal::{future_effect_map, logit_change_profile, PositionPolicy};
use depthscope::model::{load_weights, save_weights, Model, ModelConfig, ResidualTrace, TraceSpec};
use depthscope::pipeline::{
    cosine_artifacts, depth_artifact, effective_depth_from_curves, emit_ed_table, future_effect_artifacts,
    lens_artifacts, logit_change_artifacts, render_csv, run_turn_analysis, AnalysisOptions, Provenance, RunConfig,
    TrajectorySource,
};
use depthscope::probes::{
    lens_curves, residual_cosine_profile, Aggregation, CriterionDepth, DepthEstimate, EffectiveDepthReport,
    KlDirection, RatioConvention, Sublayer,
};
use depthscope::trajectory::{save_trajectory, synthesize, tokenize, Domain, TokenizedTrajectory};

#[derive(Parser, Debug)]
#[command(
    name = "depthscope",
    version,
    about = "Layer-wise causal and geometric probes over multi-turn transcripts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trajectory.
    Synth {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write randomly initialized weights to a container file.
    InitModel {
        /// Model hyperparameters as JSON; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline from a run configuration.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Causal Future Effect map and logit change profile for one turn.
    FutureEffect(ProbeArgs),
    /// Residual cosine profiles for one turn.
    Cosine {
        #[command(flatten)]
        probe: ProbeArgs,
        /// total, attention, moe or all.
        #[arg(long, default_value = "all")]
        sublayer: String,
    },
    /// Logit-lens KL and top-k overlap curves for one turn.
    Lens(ProbeArgs),
    /// Effective depth under all three criteria for one turn.
    EffectiveDepth(ProbeArgs),
    /// Render an emitted CSV as SVG.
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Merge effective depth reports into one table.
    Report {
        /// Report JSON files or directories searched for `effective_depth.json`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Only use reports of this turn.
        #[arg(long)]
        turn: Option<usize>,
        /// Recompute ratios under this convention.
        #[arg(long, value_parser = parse_convention)]
        ratio_convention: Option<RatioConvention>,
    },
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Run configuration supplying defaults; its first trajectory is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight container file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trajectory JSON file.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    turn: usize,
    /// boundaries, stride:K or list:p1,p2
    #[arg(long)]
    policy: Option<PositionPolicy>,
    #[arg(long, value_parser = parse_convention)]
    ratio_convention: Option<RatioConvention>,
    /// final_to_lens or lens_to_final
    #[arg(long)]
    kl_direction: Option<KlDirection>,
    /// mean or median
    #[arg(long)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    pivot: Option<usize>,
    #[arg(long)]
    label: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_convention(s: &str) -> Result<RatioConvention, String> {
    match s {
        "ed" => Ok(RatioConvention::EdOverL),
        "ed-plus-1" => Ok(RatioConvention::EdPlus1OverL),
        _ => Err(format!("expected `ed` or `ed-plus-1`, got `{s}`")),
    }
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<depthscope::Error> for Failure {
    fn from(e: depthscope::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth {
            domain,
            turns,
            seed,
            out,
        } => {
            let traj = synthesize(domain, turns, seed)?;
            save_trajectory(&traj, &out)?;
            println!("wrote {} ({} turns)", out.display(), traj.n_turns());
            Ok(())
        }
        Command::InitModel {
            config,
            layers,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<ModelConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => ModelConfig::default(),
            };
            if let Some(l) = layers {
                cfg.n_layers = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let model = Model::random(cfg)?;
            save_weights(&model, &out)?;
            println!("wrote {} (digest {})", out.display(), model.digest());
            Ok(())
        }
        Command::Analyze { config, out } => analyze(&config, out),
        Command::FutureEffect(args) => {
            let ctx = ProbeContext::load(&args)?;
            let map = future_effect_map(&ctx.model, &ctx.tok, args.turn, &ctx.opts.policy)?;
            let profile = logit_change_profile(&ctx.model, &ctx.tok, args.turn, ctx.opts.pivot)?;
            let mut files = future_effect_artifacts(&map, &ctx.prov)?;
            files.extend(logit_change_artifacts(&profile, &ctx.prov)?);
            write_all(&args.out, &files)
        }
        Command::Cosine { probe, sublayer } => {
            let wanted: Vec<Sublayer> = match sublayer.as_str() {
                "all" => Sublayer::ALL.to_vec(),
                s => vec![Sublayer::ALL
                    .into_iter()
                    .find(|x| x.as_str() == s)
                    .ok_or_else(|| Failure::Usage(format!("unknown sublayer `{s}`")))?],
            };
            let ctx = ProbeContext::load(&probe)?;
            let (positions, trace) = ctx.traced(probe.turn)?;
            let profiles = wanted
                .into_iter()
                .map(|s| residual_cosine_profile(&trace, probe.turn, &positions, s))
                .collect::<Result<Vec<_>, _>>()?;
            write_all(&probe.out, &cosine_artifacts(&profiles))
        }
        Command::Lens(args) => {
            let ctx = ProbeContext::load(&args)?;
            let (positions, trace) = ctx.traced(args.turn)?;
            let lens = lens_curves(&ctx.model, &trace, args.turn, &positions, ctx.opts.kl_direction)?;
            write_all(&args.out, &lens_artifacts(&lens)?)
        }
        Command::EffectiveDepth(args) => {
            let ctx = ProbeContext::load(&args)?;
            let (positions, trace) = ctx.traced(args.turn)?;
            let cosine = residual_cosine_profile(&trace, args.turn, &positions, Sublayer::Total)?;
            let lens = lens_curves(&ctx.model, &trace, args.turn, &positions, ctx.opts.kl_direction)?;
            let d = effective_depth_from_curves(&cosine, &lens, ctx.domain, ctx.model.n_layers(), &ctx.opts)?;
            for (name, c) in [
                ("cosine", &d.report.cosine),
                ("kl", &d.report.kl),
                ("overlap", &d.report.overlap),
            ] {
                println!("{name}: ED {} ratio {}", c.ed, c.ratio_display);
            }
            let file = depth_artifact(&d.report, &d.cosine_layers, d.phase_changes, ctx.opts.tau)?;
            write_all(&args.out, &[file])
        }
        Command::Render { input, out, title } => {
            let csv = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let title = title.unwrap_or_else(|| input.display().to_string());
            let (kind, svg) = render_csv(&csv, &title)?;
            fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} ({kind:?})", out.display());
            Ok(())
        }
        Command::Report {
            inputs,
            out,
            turn,
            ratio_convention,
        } => report(&inputs, &out, turn, ratio_convention),
    }
}

fn analyze(config: &Path, out: Option<PathBuf>) -> CliResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let manifest = run_turn_analysis(&cfg)?;
    let failed: Vec<_> = manifest.failed_cells().collect();
    println!(
        "{} cells, {} artifacts, {} failed -> {}",
        manifest.cells.len(),
        manifest.artifacts.len(),
        failed.len(),
        cfg.out_dir.display()
    );
    if failed.is_empty() {
        return Ok(());
    }
    for c in &failed {
        let turn = c.turn.map_or("-".to_string(), |t| t.to_string());
        eprintln!(
            "failed: trajectory {} turn {turn}: {}",
            c.trajectory,
            c.error.as_deref().unwrap_or("?")
        );
    }
    Err(Failure::Runtime(anyhow!(
        "{} of {} cells failed",
        failed.len(),
        manifest.cells.len()
    )))
}

struct ProbeContext {
    model: Model,
    tok: TokenizedTrajectory,
    domain: Domain,
    opts: AnalysisOptions,
    prov: Provenance,
}

impl ProbeContext {
    fn load(args: &ProbeArgs) -> Result<Self, Failure> {
        let base = args.config.as_deref().map(RunConfig::load).transpose()?;
        let mut opts = base.as_ref().map(AnalysisOptions::from).unwrap_or_default();
        if let Some(p) = &args.policy {
            opts.policy = p.clone();
        }
        if let Some(c) = args.ratio_convention {
            opts.ratio_convention = c;
        }
        if let Some(d) = args.kl_direction {
            opts.kl_direction = d;
        }
        if let Some(a) = args.aggregation {
            opts.aggregation = a;
        }
        if let Some(t) = args.tau {
            opts.tau = t;
        }
        if args.pivot.is_some() {
            opts.pivot = args.pivot;
        }
        if let Some(l) = &args.label {
            opts.model_label = l.clone();
        }

        let model = match (&args.model, &base) {
            (Some(p), _) => load_weights(p)?,
            (None, Some(cfg)) => cfg.model.load()?,
            (None, None) => return Err(Failure::Usage("one of --model or --config is required".into())),
        };
        let source = match (&args.trajectory, &base) {
            (Some(p), _) => TrajectorySource::Path(p.clone()),
            (None, Some(cfg)) => cfg
                .trajectories
                .first()
                .cloned()
                .ok_or_else(|| Failure::Usage("configuration lists no trajectories".into()))?,
            (None, None) => return Err(Failure::Usage("one of --trajectory or --config is required".into())),
        };
        let traj = source.load()?;
        let tok = tokenize(&traj, model.config().vocab_size)?;
        Ok(Self {
            prov: Provenance::of(&model),
            domain: traj.domain,
            model,
            tok,
            opts,
        })
    }

    fn traced(&self, r: usize) -> Result<(Vec<usize>, ResidualTrace), Failure> {
        let positions = self.opts.policy.resolve(&self.tok, r)?;
        let out = self.model.forward(self.tok.prefix_for_turn(r)?, &TraceSpec::all())?;
        Ok((positions, out.trace))
    }
}

fn write_all(dir: &Path, files: &[(String, Vec<u8>)]) -> CliResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn collect_reports(path: &Path, found: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() || e.file_name().is_some_and(|n| n == "effective_depth.json") {
                collect_reports(&e, found)?;
            }
        }
    } else {
        found.push(path.to_path_buf());
    }
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path, turn: Option<usize>, convention: Option<RatioConvention>) -> CliResult {
    let mut files = Vec::new();
    for p in inputs {
        collect_reports(p, &mut files)?;
    }
    // per (label, domain) keep the latest turn; earlier files win ties
    let mut chosen: BTreeMap<(String, Domain), EffectiveDepthReport> = BTreeMap::new();
    for f in &files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let mut rep: EffectiveDepthReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
        if turn.is_some_and(|t| t != rep.turn) {
            continue;
        }
        if let Some(c) = convention {
            let est = |c: &CriterionDepth| DepthEstimate {
                layer: c.ed,
                flag: c.flag,
            };
            rep = EffectiveDepthReport::new(
                rep.model_label.clone(),
                rep.domain,
                rep.turn,
                rep.n_layers,
                est(&rep.cosine),
                est(&rep.kl),
                est(&rep.overlap),
                c,
            )?;
        }
        let key = (rep.model_label.clone(), rep.domain);
        if chosen.get(&key).is_none_or(|old| rep.turn > old.turn) {
            chosen.insert(key, rep);
        }
    }
    if chosen.is_empty() {
        return Err(Failure::Runtime(anyhow!("no reports found")));
    }
    let reports: Vec<EffectiveDepthReport> = chosen.into_values().collect();
    emit_ed_table(&reports, out)?;
    println!("wrote {} ({} reports)", out.display(), reports.len());
    Ok(())
}
