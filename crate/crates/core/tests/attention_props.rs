//! Attention properties against a loop-based reference implementation.

mod common;

use common::{rng, uniform};
use proptest::prelude::*;
use ropelab_core::attention::{attention_forward_with, AttentionOptions};
use ropelab_core::rope::apply_partial_rope;
use ropelab_core::{
    AttentionConfig, AttentionParams, AttnMask, RopeCache, RopeConfig, Tape, Tensor,
};

struct Setup {
    cfg: AttentionConfig,
    cache: RopeCache,
    params: AttentionParams<Tensor>,
}

fn setup(d: usize, heads: usize, kv: usize, fraction: f64, qk: bool, seed: u64) -> Setup {
    let rope = RopeConfig::new(d / heads, fraction, 32).unwrap();
    let cfg = AttentionConfig::new(d, heads, kv, qk, rope.clone()).unwrap();
    let params = AttentionParams::init(&cfg, &mut rng(seed), 0.3, 0.3);
    Setup {
        cache: RopeCache::build(&rope).unwrap(),
        cfg,
        params,
    }
}

/// `(output, logits)` from the tape implementation.
fn run(s: &Setup, x: &Tensor, opts: AttentionOptions) -> (Tensor, Tensor, Tensor) {
    let tape = Tape::inference();
    let bound = s.params.bind(&tape);
    let xi = tape.constant(x.clone());
    let out = attention_forward_with(&xi, &bound, &s.cfg, &s.cache, opts).unwrap();
    (
        out.output.to_tensor(),
        out.logits.to_tensor(),
        out.values.to_tensor(),
    )
}

fn project(x: &[f64], w: &Tensor, t: usize, d: usize, col0: usize, width: usize) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..width)
        .map(|c| {
            (0..d)
                .map(|i| x[t * d + i] * w.data()[i * cols + col0 + c])
                .sum()
        })
        .collect()
}

fn rms(v: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
    let s = (ms + eps * eps).sqrt();
    v.iter().zip(gain).map(|(a, g)| a / s * g).collect()
}

/// Plain loops over batch, head, query and key.
fn reference(s: &Setup, x: &Tensor) -> Tensor {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h, hd) = (s.cfg.n_heads(), s.cfg.head_dim());
    let group = s.cfg.group_size();
    let p = &s.params;
    let mut concat = vec![0.0; b * t * h * hd];
    for bi in 0..b {
        let xb = &x.data()[bi * t * d..(bi + 1) * t * d];
        for head in 0..h {
            let kvh = head / group;
            let prep = |w: &Tensor, col: usize, gain: &Option<Tensor>| -> Vec<Vec<f64>> {
                (0..t)
                    .map(|ti| {
                        let mut v = project(xb, w, ti, d, col * hd, hd);
                        if let Some(g) = gain {
                            v = rms(&v, g.data(), s.cfg.qk_norm_eps());
                        }
                        let row = Tensor::new([1, hd], v).unwrap();
                        apply_partial_rope(&row, &s.cache, ti).unwrap().into_data()
                    })
                    .collect()
            };
            let q = prep(&p.wq, head, &p.q_gain);
            let k = prep(&p.wk, kvh, &p.k_gain);
            let v: Vec<Vec<f64>> = (0..t)
                .map(|ti| project(xb, &p.wv, ti, d, kvh * hd, hd))
                .collect();
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i].iter().zip(&k[j]).map(|(a, c)| a * c).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    concat[(bi * t + i) * h * hd + head * hd + c] =
                        (0..=i).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
    }
    let wo = &p.wo;
    let out: Vec<f64> = (0..b * t)
        .flat_map(|r| {
            let row = &concat[r * h * hd..(r + 1) * h * hd];
            (0..d)
                .map(|o| {
                    row.iter()
                        .enumerate()
                        .map(|(i, a)| a * wo.data()[i * d + o])
                        .sum()
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    Tensor::new([b, t, d], out).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn matches_reference_multi_head() {
    for (fraction, qk) in [(0.0, false), (0.5, false), (1.0, true), (0.25, true)] {
        let s = setup(16, 4, 4, fraction, qk, 1);
        let x = uniform(&mut rng(2), &[2, 7, 16], -1.0, 1.0);
        let (out, _, _) = run(&s, &x, AttentionOptions::default());
        let err = max_abs_diff(&out, &reference(&s, &x));
        assert!(err < 1e-12, "f={fraction} qk={qk}: {err:e}");
    }
}

#[test]
fn matches_reference_grouped_query() {
    for kv in [1, 2] {
        let s = setup(16, 4, kv, 0.5, true, 3);
        let x = uniform(&mut rng(4), &[2, 6, 16], -1.0, 1.0);
        let (out, _, _) = run(&s, &x, AttentionOptions::default());
        let err = max_abs_diff(&out, &reference(&s, &x));
        assert!(err < 1e-12, "kv={kv}: {err:e}");
    }
}

#[test]
fn grouped_kv_equals_multi_head_with_duplicated_kv_weights() {
    let grouped = setup(16, 4, 2, 0.5, false, 5);
    let mut mha = setup(16, 4, 4, 0.5, false, 5);
    mha.params.wq = grouped.params.wq.clone();
    mha.params.wo = grouped.params.wo.clone();
    let dup = |w: &Tensor| {
        let hd = 4;
        let mut data = Vec::new();
        for row in w.data().chunks(w.shape()[1]) {
            for head in row.chunks(hd) {
                data.extend_from_slice(head);
                data.extend_from_slice(head);
            }
        }
        Tensor::new([16, 16], data).unwrap()
    };
    mha.params.wk = dup(&grouped.params.wk);
    mha.params.wv = dup(&grouped.params.wv);
    let x = uniform(&mut rng(6), &[1, 5, 16], -1.0, 1.0);
    let (a, _, _) = run(&grouped, &x, AttentionOptions::default());
    let (b, _, _) = run(&mha, &x, AttentionOptions::default());
    assert!(max_abs_diff(&a, &b) < 1e-13);
}

#[test]
fn value_path_is_independent_of_rotary_fraction() {
    let x = uniform(&mut rng(7), &[2, 6, 16], -1.0, 1.0);
    let base = run(
        &setup(16, 2, 2, 0.0, false, 8),
        &x,
        AttentionOptions::default(),
    );
    for fraction in [0.25, 0.5, 1.0] {
        let s = setup(16, 2, 2, fraction, false, 8);
        let (_, _, values) = run(&s, &x, AttentionOptions::default());
        assert_eq!(values, base.2, "f={fraction}");
    }
}

#[test]
fn causal_logits_ignore_future_positions() {
    let s = setup(16, 2, 2, 0.5, true, 9);
    let mut x = uniform(&mut rng(10), &[1, 6, 16], -1.0, 1.0);
    let (out_a, _, _) = run(&s, &x, AttentionOptions::default());
    for v in &mut x.data_mut()[4 * 16..] {
        *v += 0.5;
    }
    let (out_b, _, _) = run(&s, &x, AttentionOptions::default());
    assert_eq!(&out_a.data()[..4 * 16], &out_b.data()[..4 * 16]);
    assert_ne!(&out_a.data()[4 * 16..], &out_b.data()[4 * 16..]);
}

#[test]
fn full_mask_lets_every_query_see_every_key() {
    let s = setup(8, 2, 2, 0.0, false, 11);
    let mut x = uniform(&mut rng(12), &[1, 4, 8], -1.0, 1.0);
    let opts = AttentionOptions {
        mask: AttnMask::Full,
        ..AttentionOptions::default()
    };
    let (a, _, _) = run(&s, &x, opts);
    x.data_mut()[3 * 8] += 1.0;
    let (b, _, _) = run(&s, &x, opts);
    assert_ne!(&a.data()[..8], &b.data()[..8]);
}

/// Logit between a query at `m` and a key at `n`, with unrelated filler
/// tokens everywhere else.
fn pair_logit(s: &Setup, q: &[f64], k: &[f64], m: usize, n: usize, filler: u64) -> f64 {
    let t = m.max(n) + 1;
    let mut x = uniform(&mut rng(filler), &[1, t, 16], -1.0, 1.0);
    x.data_mut()[m * 16..(m + 1) * 16].copy_from_slice(q);
    x.data_mut()[n * 16..(n + 1) * 16].copy_from_slice(k);
    let (_, logits, _) = run(s, &x, AttentionOptions::default());
    logits.data()[m * t + n]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logits_shift_consistent(
        seed in 0u64..1000,
        n in 0usize..10,
        gap in 0usize..10,
        shift in 1usize..10,
        fraction in prop::sample::select(vec![0.25, 0.5, 1.0]),
    ) {
        let s = setup(16, 1, 1, fraction, false, seed);
        let mut r = rng(seed + 1);
        let q = uniform(&mut r, &[16], -1.0, 1.0).into_data();
        let k = uniform(&mut r, &[16], -1.0, 1.0).into_data();
        let m = n + gap;
        let a = pair_logit(&s, &q, &k, m, n, seed + 2);
        let b = pair_logit(&s, &q, &k, m + shift, n + shift, seed + 3);
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn qk_norm_bounds_logits(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let mut s = setup(16, 2, 1, 0.5, true, seed);
        let mut r = rng(seed);
        s.params.q_gain = Some(uniform(&mut r, &[8], -2.0, 2.0));
        s.params.k_gain = Some(uniform(&mut r, &[8], -2.0, 2.0));
        let x = uniform(&mut r, &[1, 5, 16], -scale, scale);
        let (_, logits, _) = run(&s, &x, AttentionOptions::default());
        let max_abs = |t: &Option<Tensor>| t.as_ref().unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = max_abs(&s.params.q_gain) * max_abs(&s.params.k_gain) * 8f64.sqrt();
        for &l in logits.data().iter().filter(|l| l.is_finite()) {
            prop_assert!(l.abs() <= bound * (1.0 + 1e-12), "{l} > {bound}");
        }
    }
}
