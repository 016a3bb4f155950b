// SPDX-License-Identifier: MIT OR Apache-2.0

use depthscope::causal::{
    forward_with_skip, future_effect_map, future_effect_row, logit_change_norm, logit_change_profile, PositionPolicy,
};
use depthscope::model::{Model, ModelConfig, Skip, TraceSpec};
use depthscope::trajectory::{synthesize, tokenize, Domain};
use proptest::prelude::*;

fn model(layers: usize, seed: u64) -> Model {
    Model::random(ModelConfig {
        n_layers: layers,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn tokens(n: usize, salt: u32) -> Vec<u32> {
    (0..n as u32).map(|i| (i * 89 + salt) % 512).collect()
}

#[test]
fn skipping_block_zero_everywhere_deletes_it() {
    let two = model(2, 13);
    let t = tokens(15, 4);
    let skipped = forward_with_skip(&two, &t, 0, 0).unwrap();

    let mut cfg = two.config().clone();
    cfg.n_layers = 1;
    let mut weights = two.weights().clone();
    weights.layers.remove(0);
    let one = Model::new(cfg, weights).unwrap();
    let direct = one.forward(&t, &TraceSpec::none()).unwrap();

    for (a, b) in skipped.logits.data().iter().zip(direct.logits.data()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn logit_change_matches_two_pass_computation() {
    let m = model(2, 3);
    let t = tokens(20, 9);
    let pivot = 11;
    let base = m.forward(&t, &TraceSpec::none()).unwrap();
    for s in 0..2 {
        let alt = m
            .forward_skipped(&t, &Skip::through_position(s, pivot), &TraceSpec::none())
            .unwrap();
        let mut total = 0.0f64;
        for pos in pivot + 1..t.len() {
            let sq: f64 = base
                .logits
                .row(pos)
                .iter()
                .zip(alt.logits.row(pos))
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                .sum();
            total += sq.sqrt();
        }
        let want = total / (t.len() - pivot - 1) as f64;
        let got = logit_change_norm(&m, &t, s, pivot).unwrap();
        assert!((got - want).abs() <= 1e-5 * want.max(1e-30), "s={s}: {got} vs {want}");
        if s == 0 {
            assert!(got > 0.0);
        } else {
            // the last block's attention reads its unchanged inputs
            assert_eq!(got, 0.0);
        }
    }
}

#[test]
fn pivot_skip_reaches_later_positions() {
    let m = model(3, 1);
    let t = tokens(16, 2);
    let base = m.forward(&t, &TraceSpec::none()).unwrap();
    let alt = m
        .forward_skipped(&t, &Skip::through_position(1, 6), &TraceSpec::none())
        .unwrap();
    // positions inside the skipped span change, later ones see it through attention
    assert_ne!(base.logits.row(3), alt.logits.row(3));
    assert_ne!(base.logits.row(12), alt.logits.row(12));
}

#[test]
fn map_is_triangular_and_nonnegative() {
    let m = model(4, 2);
    let traj = synthesize(Domain::DeepResearch, 2, 5).unwrap();
    let tok = tokenize(&traj, 512).unwrap();
    let map = future_effect_map(&m, &tok, 2, &PositionPolicy::Stride(97)).unwrap();
    assert_eq!(map.entries().count(), 6);
    for (&(s, l), e) in map.entries() {
        assert!(l > s);
        if let Some(v) = e.value {
            assert!(v >= 0.0 && v.is_finite());
            assert!(map.positions.contains(&e.argmax_p.unwrap()));
        }
    }
    let csv = map.to_csv();
    assert_eq!(csv.lines().count(), 7);

    let profile = logit_change_profile(&m, &tok, 2, None).unwrap();
    assert_eq!(profile.values.len(), 4);
    assert_eq!(profile.pivot, tok.boundary(1).unwrap());
    assert!(profile.values.iter().chain(&profile.kl_values).all(|&v| v >= 0.0));
}

#[test]
fn per_turn_maps_share_shape() {
    let m = model(3, 4);
    let traj = synthesize(Domain::CodeGeneration, 3, 2).unwrap();
    let tok = tokenize(&traj, 512).unwrap();
    let maps: Vec<_> = (1..=3)
        .map(|r| future_effect_map(&m, &tok, r, &PositionPolicy::TurnBoundaries).unwrap())
        .collect();
    for (r, map) in maps.iter().enumerate() {
        assert_eq!(map.positions, tok.boundaries_through(r + 1).unwrap());
        assert_eq!(map.entries().count(), 3);
    }
    assert_ne!(maps[0].matrix(), maps[2].matrix());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn enlarging_position_set_never_lowers_entries(
        small in prop::collection::btree_set(0usize..24, 1..3),
        extra in prop::collection::btree_set(0usize..24, 1..3),
        s in 0usize..2,
    ) {
        let m = model(3, 19);
        let t = tokens(24, 5);
        let a: Vec<usize> = small.iter().copied().collect();
        let b: Vec<usize> = small.union(&extra).copied().collect();
        let row_a = future_effect_row(&m, &t, s, &a).unwrap();
        let row_b = future_effect_row(&m, &t, s, &b).unwrap();
        for (ea, eb) in row_a.iter().zip(&row_b) {
            if let Some(va) = ea.value {
                prop_assert!(eb.value.unwrap() >= va);
            }
        }
    }

    #[test]
    fn skip_never_touches_earlier_positions(s in 0usize..3, p in 0usize..20) {
        let m = model(3, 23);
        let t = tokens(20, 1);
        let base = m.forward(&t, &TraceSpec::all()).unwrap();
        let out = forward_with_skip(&m, &t, s, p).unwrap();
        for pos in 0..p {
            prop_assert_eq!(base.logits.row(pos), out.logits.row(pos));
            for l in 0..3 {
                prop_assert_eq!(base.trace.residual_out(l, pos).unwrap(), out.trace.residual_out(l, pos).unwrap());
            }
        }
    }
}
