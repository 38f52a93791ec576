use std::collections::BTreeSet;

use ddfh_core::scoring::DEFAULT_CLIP;
use ddfh_core::select::{aggregate, prepare_round, raw_scores, ReductionCache, ReferenceSets};
use ddfh_core::{BudgetMode, FrameId, GmmConfig, RoundConfig, TsneConfig};
use ddfh_harness::oracle::pipeline_oracle;
use ddfh_harness::{run_rounds, synth_generate, Strategy, SynthConfig};

fn quick_config(seed: u64, budget: usize) -> RoundConfig {
    RoundConfig {
        budget,
        seed,
        tsne: TsneConfig {
            perplexity: 20.0,
            iterations: 250,
            ..TsneConfig::default()
        },
        ..RoundConfig::default()
    }
}

fn small_synth(frames: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        frames,
        instances_per_frame: (1, 2),
        initial_labeled: 10,
        seed,
        ..SynthConfig::default()
    }
}

/// Any two entries of `values` within a relative 1e-9 of each other.
fn has_near_ties(values: &[f64]) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).any(|w| (w[1] - w[0]).abs() <= 1e-9 * w[0].abs().max(w[1].abs()))
}

fn tie_free(sets: &ReferenceSets) -> bool {
    [&sets.s_dd, &sets.s_nov, &sets.s_var, &sets.s_cor]
        .iter()
        .all(|s| !has_near_ties(s))
}

#[test]
fn small_pool_matches_oracle() {
    let mut tested = 0;
    for seed in 0..20 {
        let pool = synth_generate(&SynthConfig {
            frames: 10,
            initial_labeled: 4,
            class_ratios: vec![0.5, 0.5],
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let config = RoundConfig {
            tsne: TsneConfig {
                perplexity: 3.0,
                iterations: 500,
                ..TsneConfig::default()
            },
            gmm: GmmConfig {
                components: 2,
                ..GmmConfig::default()
            },
            seed,
            ..RoundConfig::default()
        };
        let state = prepare_round(&pool, &config, &mut ReductionCache::default()).unwrap();
        let raw = raw_scores(&state);
        let (engine, sets) = aggregate(&raw, state.class_count).unwrap();
        if !tie_free(&sets) {
            continue;
        }
        tested += 1;
        let oracle = pipeline_oracle(&state, DEFAULT_CLIP);
        assert_eq!(engine.len(), oracle.len());
        for (e, o) in engine.iter().zip(&oracle) {
            assert_eq!(e.frame_id, o.frame_id);
            for (name, a, b) in [
                ("i_dd", e.i_dd, o.i_dd),
                ("i_fh", e.i_fh, o.i_fh),
                ("i_cb", e.i_cb, o.i_cb),
                ("i_total", e.i_total, o.i_total),
            ] {
                assert!((a - b).abs() <= 1e-9, "seed {seed} {} {name}: {a} vs {b}", e.frame_id);
            }
        }
    }
    assert!(tested >= 5, "only {tested} tie-free pools");
}

#[test]
fn random_selection_follows_class_ratios() {
    let synth = small_synth(600, 3);
    let pool = synth_generate(&synth).unwrap();
    let run = run_rounds(&pool, Strategy::Random, 5, &quick_config(3, 40)).unwrap();
    let mut counts = vec![0usize; 3];
    for r in &run.rounds {
        for (c, n) in r.class_counts.iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: usize = counts.iter().sum();
    assert!(total > 200);
    for (c, &n) in counts.iter().enumerate() {
        let frac = n as f64 / total as f64;
        assert!((frac - synth.class_ratios[c]).abs() <= 0.1, "class {c}: {frac}");
    }
}

#[test]
fn zero_rounds_leave_the_pool_alone() {
    let pool = synth_generate(&small_synth(60, 1)).unwrap();
    for strategy in Strategy::ALL {
        let run = run_rounds(&pool, strategy, 0, &quick_config(1, 5)).unwrap();
        assert!(run.rounds.is_empty());
        assert!(run.manifests.is_empty());
        assert!(!run.truncated);
        assert_eq!(run.final_pool, pool);
        assert_eq!(run.initial_divergence.len(), pool.class_count());
    }
}

#[test]
fn every_strategy_conserves_the_pool() {
    let pool = synth_generate(&small_synth(120, 5)).unwrap();
    let total = pool.frame_count();
    for mode in [BudgetMode::Frames, BudgetMode::Boxes] {
        let config = RoundConfig {
            budget_mode: mode,
            ..quick_config(5, 6)
        };
        for strategy in Strategy::ALL {
            let run = run_rounds(&pool, strategy, 3, &config).unwrap();
            assert_eq!(run.rounds.len(), 3);
            assert_eq!(run.manifests.len(), 3);
            let mut labeled: BTreeSet<FrameId> = pool.labeled().clone();
            for (i, (m, r)) in run.manifests.iter().zip(&run.rounds).enumerate() {
                assert_eq!(m.strategy, strategy.name());
                assert_eq!(m.round_index, i);
                assert_eq!(r.round_index, i + 1);
                assert_eq!(m.spent_frames, m.selected.len());
                assert_eq!(r.spent_frames, m.spent_frames);
                assert_eq!(r.spent_instances, m.spent_instances);
                assert_eq!(r.class_counts.iter().sum::<usize>(), m.spent_instances);
                assert_eq!(m.ranking.iter().filter(|f| f.selected).count(), m.selected.len());
                match mode {
                    BudgetMode::Frames => assert_eq!(m.spent_frames, 6),
                    BudgetMode::Boxes => assert!(m.spent_instances <= 6 || m.spent_frames == 1),
                }
                for id in &m.selected {
                    assert!(labeled.insert(id.clone()), "{strategy}: {id} selected twice");
                }
                assert!(r.count_entropy >= 0.0 && r.conf_entropy >= 0.0);
            }
            assert_eq!(run.final_pool.labeled(), &labeled);
            assert_eq!(run.final_pool.labeled().len() + run.final_pool.unlabeled_count(), total);
            assert_eq!(run.final_pool.round_index(), 3);
        }
    }
}

#[test]
fn exhausted_pool_truncates() {
    let pool = synth_generate(&small_synth(30, 2)).unwrap();
    let run = run_rounds(&pool, Strategy::ConfEntropy, 10, &quick_config(2, 8)).unwrap();
    assert!(run.truncated);
    assert_eq!(run.rounds.len(), 3);
    assert_eq!(run.final_pool.unlabeled_count(), 0);
}

#[test]
fn synthetic_ratios_hold_at_scale() {
    let synth = SynthConfig {
        frames: 6000,
        instances_per_frame: (1, 3),
        seed: 17,
        ..SynthConfig::default()
    };
    let pool = synth_generate(&synth).unwrap();
    assert!(pool.instance_count() >= 10_000);
    let mut counts = vec![0usize; 3];
    for (_, r) in pool.instances() {
        counts[r.class_id] += 1;
    }
    let n = pool.instance_count() as f64;
    for (c, &k) in counts.iter().enumerate() {
        let frac = k as f64 / n;
        assert!((frac - synth.class_ratios[c]).abs() <= 0.05, "class {c}: {frac}");
    }
}
