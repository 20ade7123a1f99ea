//! Schedule, optimizer, spike detection, data plumbing and sweep outputs.

mod common;

use common::{rng, small_config};
use proptest::prelude::*;
use ropelab_core::train::corpus::{ingest_corpus, tokenize_bytes, ChunkBatcher};
use ropelab_core::train::synthetic::{make_synthetic_task, target_for, SyntheticTask, TaskKind};
use ropelab_core::train::{
    adamw_step, detect_spikes, run_sweep, train_run, AdamWConfig, AdamWState, LossTrace, ParamSlot,
    Schedule, SweepGrid, TrainRun,
};
use ropelab_core::{Error, Tensor, TopologyKind};

fn tiny_run(seed: u64, steps: usize) -> TrainRun {
    let mut model: ropelab_core::model::ModelConfigFile =
        small_config(TopologyKind::Sequential, 1, 0.5, false).into();
    model.vocab_size = 6;
    TrainRun {
        name: None,
        seed,
        steps,
        batch_size: 4,
        corpus: "synthetic:copy".into(),
        seq_len: 8,
        model: model.try_into().unwrap(),
        schedule: Default::default(),
        optimizer: Default::default(),
        spikes: Default::default(),
        eval: ropelab_core::train::EvalSpec {
            examples: 8,
            ..Default::default()
        },
        log_every: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedule_shape(
        total in 2usize..5000,
        peak in 1e-6f64..1e-1,
        warm in 0.01f64..0.5,
        final_frac in 0.001f64..=1.0,
    ) {
        let s = Schedule::new(peak, warm, final_frac, total).unwrap();
        let w = s.warmup_end();
        let lrs: Vec<f64> = (0..=total).map(|t| s.lr_at(t).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&l| l >= 0.0));
        prop_assert_eq!(lrs[w], peak);
        prop_assert!(lrs.iter().all(|&l| l <= peak));
        prop_assert!((lrs[total] - final_frac * peak).abs() <= 1e-12);
        prop_assert!(lrs[..=w].windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(lrs[w..].windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(s.lr_at(total + 1).is_err());
    }

    #[test]
    fn monotone_traces_never_spike(
        start in 0.0f64..10.0,
        drops in prop::collection::vec(0.0f64..0.3, 1..300),
        window in 1usize..50,
    ) {
        let mut trace = LossTrace::default();
        let mut loss = start;
        for (i, d) in drops.iter().enumerate() {
            loss -= d;
            trace.push(i + 1, loss, 1e-3);
        }
        prop_assert!(detect_spikes(&trace, window, 0.5).is_empty());
    }

    #[test]
    fn jumps_above_window_minimum_always_spike(
        base in prop::collection::vec(1.0f64..2.0, 5..60),
        window in 1usize..20,
        jump in 0.51f64..3.0,
    ) {
        let mut trace = LossTrace::default();
        for (i, &l) in base.iter().enumerate() {
            trace.push(i + 1, l, 1e-3);
        }
        let lo = base.len().saturating_sub(window);
        let min = base[lo..].iter().cloned().fold(f64::INFINITY, f64::min);
        trace.push(base.len() + 1, min + jump, 1e-3);
        let spikes = detect_spikes(&trace, window, 0.5);
        prop_assert!(spikes.iter().any(|s| s.step == base.len() + 1));
    }

    #[test]
    fn adamw_with_zero_betas_is_sign_scaled_sgd(
        g in prop::collection::vec(-5.0f64..5.0, 1..20),
        lr in 1e-4f64..1.0,
    ) {
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, weight_decay: 0.0, grad_clip: None };
        let mut p = Tensor::zeros([g.len()]);
        let grads = [Tensor::new([g.len()], g.clone()).unwrap()];
        let mut state = AdamWState::new([&p]);
        adamw_step(&mut [ParamSlot { name: "p", decay: true, tensor: &mut p }], &grads, &mut state, lr, &cfg).unwrap();
        for (u, gi) in p.data().iter().zip(&g) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            prop_assert!((u - expected).abs() <= 1e-15 * lr.max(1.0));
        }
    }
}

#[test]
fn first_adamw_step_moves_by_lr() {
    let mut p = Tensor::full([1], 1.0);
    let mut state = AdamWState::new([&p]);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let g = [Tensor::full([1], 1.0)];
    adamw_step(
        &mut [ParamSlot {
            name: "p",
            decay: true,
            tensor: &mut p,
        }],
        &g,
        &mut state,
        0.1,
        &cfg,
    )
    .unwrap();
    assert!((p.data()[0] - 0.9).abs() < 1e-9);
}

#[test]
fn non_finite_gradient_aborts_without_touching_params() {
    let mut p = Tensor::full([2], 1.0);
    let mut state = AdamWState::new([&p]);
    let g = [Tensor::new([2], vec![1.0, f64::NAN]).unwrap()];
    let err = adamw_step(
        &mut [ParamSlot {
            name: "w",
            decay: true,
            tensor: &mut p,
        }],
        &g,
        &mut state,
        0.1,
        &AdamWConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param, .. } if param == "w"));
    assert_eq!(p.data(), &[1.0, 1.0]);
}

#[test]
fn spike_at_jump_after_dip() {
    let mut trace = LossTrace::default();
    for (i, l) in [3.0, 2.5, 2.0, 3.0].into_iter().enumerate() {
        trace.push(i + 1, l, 0.0);
    }
    let spikes = detect_spikes(&trace, 100, 0.5);
    assert_eq!(spikes.len(), 1);
    assert_eq!(spikes[0].step, 4);
}

#[test]
fn byte_tokenizer_and_split() {
    assert_eq!(tokenize_bytes(b"abc"), vec![97, 98, 99]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    std::fs::write(&path, vec![b'x'; 1000]).unwrap();
    let c = ingest_corpus(&path, 0.1).unwrap();
    assert_eq!((c.train.len(), c.held_out.len()), (900, 100));
    std::fs::write(&path, b"").unwrap();
    assert!(matches!(ingest_corpus(&path, 0.1), Err(Error::Io { .. })));
    assert!(matches!(
        ingest_corpus(&dir.path().join("missing.txt"), 0.1),
        Err(Error::Io { .. })
    ));
}

#[test]
fn batch_order_is_a_function_of_seed() {
    let stream: Vec<usize> = (0..500).map(|i| i % 251).collect();
    let draw = |seed| {
        let mut b = ChunkBatcher::new(stream.len(), 16).unwrap();
        let mut r = rng(seed);
        (0..10)
            .map(|_| b.next_batch(&stream, 3, &mut r).unwrap().0.ids().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(4), draw(4));
    assert_ne!(draw(4), draw(5));
}

#[test]
fn synthetic_targets() {
    assert_eq!(target_for(TaskKind::Reverse, &[3, 5, 7]), vec![7, 5, 3]);
    assert_eq!(target_for(TaskKind::Copy, &[3, 5, 7]), vec![3, 5, 7]);
    // A predictor that copies the token half a sequence back is exact on
    // every scored position of the copy task.
    let task = SyntheticTask::new(TaskKind::Copy, 10, 7).unwrap();
    let seq = task.sample(&mut rng(1));
    for (p, t) in task.targets(&seq).into_iter().enumerate() {
        if let Some(t) = t {
            assert_eq!(seq[p + 1 - task.half()], t);
        }
    }
    assert!(SyntheticTask::new(TaskKind::Copy, 7, 8).is_err());
    assert!(SyntheticTask::new(TaskKind::Copy, 8, 3).is_err());
}

/// Pearson chi-square of source-token counts against the uniform
/// distribution; the 0.001 critical value for 15 degrees of freedom is 37.70.
#[test]
fn synthetic_sources_are_uniform() {
    let (vocab, seq) = (16, 32);
    let batches = make_synthetic_task(TaskKind::Reverse, seq, vocab, 2024, 64).unwrap();
    let mut counts = vec![0usize; vocab];
    let mut n = 0;
    let mut r = rng(2024);
    let task = SyntheticTask::new(TaskKind::Reverse, seq, vocab).unwrap();
    for _ in 0..20 {
        let (tokens, _) = task.sample_batch(64, &mut r).unwrap();
        for b in 0..64 {
            for &t in &tokens.row(b)[..seq / 2] {
                counts[t] += 1;
                n += 1;
            }
        }
    }
    let expected = n as f64 / vocab as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < 37.70, "chi-square {chi2}");
    assert_eq!(batches.0.batch(), 64);
}

#[test]
fn one_run_ten_steps_writes_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [tiny_run(1, 10)];
    let out = run_sweep(&runs, Some(dir.path()), 1).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(format!("{}.csv", out[0].name))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,spike");
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("1,"));
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn identical_runs_give_identical_csv() {
    let a = train_run(&tiny_run(3, 15)).unwrap();
    let b = train_run(&tiny_run(3, 15)).unwrap();
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    let c = train_run(&tiny_run(4, 15)).unwrap();
    assert_ne!(a.trace.to_csv(), c.trace.to_csv());
}

#[test]
fn concurrent_sweep_matches_sequential() {
    let runs: Vec<TrainRun> = (0..3).map(|s| tiny_run(s, 6)).collect();
    let seq = run_sweep(&runs, None, 1).unwrap();
    let par = run_sweep(&runs, None, 3).unwrap();
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    }
}

#[test]
fn grid_expands_cross_product() {
    let grid = SweepGrid {
        base: tiny_run(0, 5),
        rotary_fractions: vec![0.0, 0.25, 1.0],
        seeds: vec![1, 2],
        topologies: vec![TopologyKind::Sequential, TopologyKind::Parallel],
        qk_norm: vec![],
        jobs: 0,
    };
    let runs = grid.expand().unwrap();
    assert_eq!(runs.len(), 12);
    let names: std::collections::BTreeSet<String> = runs.iter().map(|r| r.display_name()).collect();
    assert_eq!(names.len(), 12);
}

#[test]
fn text_corpus_run_and_missing_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("text.txt");
    std::fs::write(
        &path,
        "the quick brown fox jumps over the lazy dog. ".repeat(20),
    )
    .unwrap();
    let mut run = tiny_run(0, 3);
    let mut model: ropelab_core::model::ModelConfigFile = run.model.clone().into();
    model.vocab_size = 256;
    run.model = model.try_into().unwrap();
    run.corpus = path.display().to_string();
    let out = train_run(&run).unwrap();
    assert!(out.final_eval.task_accuracy.is_none());
    run.corpus = dir.path().join("nope.txt").display().to_string();
    assert!(matches!(train_run(&run), Err(Error::Io { .. })));
}

#[test]
fn run_config_round_trips_through_toml_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(9, 12);
    let toml_path = dir.path().join("run.toml");
    std::fs::write(&toml_path, toml::to_string(&run).unwrap()).unwrap();
    assert_eq!(TrainRun::from_file(&toml_path).unwrap(), run);
    let json_path = dir.path().join("run.json");
    std::fs::write(&json_path, serde_json::to_string(&run).unwrap()).unwrap();
    assert_eq!(TrainRun::from_file(&json_path).unwrap(), run);
}
