// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use depthscope::causal::PositionPolicy;
use depthscope::model::{save_weights, Model, ModelConfig};
use depthscope::pipeline::{
    emit_ed_table, emit_heatmap_svg, run_turn_analysis, verify_manifest, ChartLabels, ModelSource, RunConfig,
    RunManifest, SynthSpec, TrajectorySource, CONFIG_FILE, TABLE_FILE,
};
use depthscope::probes::{Aggregation, DepthEstimate, EffectiveDepthReport, KlDirection, RatioConvention};
use depthscope::trajectory::{save_trajectory, synthesize, Domain};

fn config(out: &Path, model: ModelSource, trajectories: Vec<TrajectorySource>) -> RunConfig {
    RunConfig {
        model,
        model_label: "probe".into(),
        trajectories,
        turns: None,
        policy: PositionPolicy::TurnBoundaries,
        pivot: None,
        tau: 0.05,
        kl_direction: KlDirection::FinalToLens,
        aggregation: Aggregation::Mean,
        ratio_convention: RatioConvention::EdOverL,
        out_dir: out.to_path_buf(),
        record_timings: false,
    }
}

fn synth(domain: Domain, turns: usize, seed: u64) -> TrajectorySource {
    TrajectorySource::Synth(SynthSpec { domain, turns, seed })
}

fn digests(m: &RunManifest) -> BTreeMap<String, String> {
    m.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect()
}

#[test]
fn per_turn_maps_keep_shape_and_change_values() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelSource::Random(ModelConfig {
        n_layers: 8,
        seed: 7,
        ..ModelConfig::default()
    });
    let cfg = config(dir.path(), model, vec![synth(Domain::CodeGeneration, 4, 7)]);
    let manifest = run_turn_analysis(&cfg).unwrap();
    assert_eq!(manifest.cells.len(), 4);
    let mut defined = Vec::new();
    let mut values = Vec::new();
    for r in 1..=4 {
        let csv = fs::read_to_string(
            dir.path()
                .join(format!("t00_code_generation/turn_{r:02}/future_effect.csv")),
        )
        .unwrap();
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 8 * 7 / 2);
        defined.push(rows.iter().filter(|r| r[4] == "ok").count());
        values.push(rows.iter().map(|r| r[2].to_string()).collect::<Vec<_>>());
    }
    assert!(defined.iter().all(|&d| d == defined[0]), "{defined:?}");
    for r in 1..4 {
        assert_ne!(values[r], values[r - 1], "turns {r} and {} share a map", r + 1);
    }
    let table = fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("probe,8,"));
}

#[test]
fn failing_cells_do_not_disturb_others() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelSource::Random(ModelConfig {
        n_layers: 3,
        seed: 1,
        ..ModelConfig::default()
    });
    let trajs = vec![
        synth(Domain::DeepResearch, 2, 3),
        TrajectorySource::Path(dir.path().join("missing.json")),
    ];

    let mut clean = config(&dir.path().join("a"), model.clone(), trajs[..1].to_vec());
    clean.turns = Some(vec![1, 2]);
    let mut noisy = config(&dir.path().join("b"), model, trajs);
    noisy.turns = Some(vec![1, 2, 9]);

    let a = run_turn_analysis(&clean).unwrap();
    let b = run_turn_analysis(&noisy).unwrap();
    assert_eq!(a.failed_cells().count(), 0);
    let failed: Vec<_> = b.failed_cells().map(|c| (c.trajectory, c.turn)).collect();
    assert_eq!(failed, vec![(0, Some(9)), (1, None)]);
    assert!(b.failed_cells().all(|c| c.error.is_some()));

    let (da, db) = (digests(&a), digests(&b));
    let cell_files: Vec<&String> = da.keys().filter(|k| k.starts_with("t00_")).collect();
    assert!(!cell_files.is_empty());
    for k in cell_files {
        assert_eq!(da.get(k), db.get(k), "{k}");
    }
    verify_manifest(dir.path().join("b")).unwrap();
}

#[test]
fn persisted_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.bin");
    save_weights(
        &Model::random(ModelConfig {
            n_layers: 2,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap(),
        &weights,
    )
    .unwrap();
    let traj_path = dir.path().join("traj.json");
    save_trajectory(&synthesize(Domain::TabularProcessing, 2, 4).unwrap(), &traj_path).unwrap();

    let out = dir.path().join("run");
    let cfg = config(
        &out,
        ModelSource::Weights(weights),
        vec![TrajectorySource::Path(traj_path)],
    );
    let first = run_turn_analysis(&cfg).unwrap();
    let reloaded = RunConfig::load(out.join(CONFIG_FILE)).unwrap();
    assert_eq!(reloaded, cfg);
    let second = run_turn_analysis(&reloaded).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.config_digest, cfg.digest().unwrap());

    // a stray file breaks manifest completeness
    fs::write(out.join("stray.txt"), "x").unwrap();
    assert!(verify_manifest(&out).is_err());
}

#[test]
fn emitted_files_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = vec![
        vec![None, Some(0.2), Some(0.9)],
        vec![None, None, Some(0.4)],
        vec![None, None, None],
    ];
    let labels = ChartLabels::future_effect("map");
    emit_heatmap_svg(&m, None, &labels, dir.path().join("a.svg")).unwrap();
    emit_heatmap_svg(&m, None, &labels, dir.path().join("b.svg")).unwrap();
    assert_eq!(
        fs::read(dir.path().join("a.svg")).unwrap(),
        fs::read(dir.path().join("b.svg")).unwrap()
    );

    let eds = [(19, 44, 45), (20, 44, 45), (19, 45, 46)];
    let reports: Vec<EffectiveDepthReport> = Domain::ALL
        .iter()
        .zip(eds)
        .map(|(&d, (c, k, o))| {
            let p = DepthEstimate::plain;
            EffectiveDepthReport::new("Qwen3-Instruct", d, 1, 48, p(c), p(k), p(o), RatioConvention::EdOverL).unwrap()
        })
        .collect();
    let path = dir.path().join("table.csv");
    emit_ed_table(&reports, &path).unwrap();
    let csv = fs::read_to_string(&path).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let ratios: Vec<&str> = row[2..].iter().skip(1).step_by(2).copied().collect();
    assert_eq!(
        ratios,
        ["0.40", "0.42", "0.40", "0.92", "0.92", "0.94", "0.94", "0.94", "0.96"]
    );
}
