use super::*;
use crate::features::FeatureMatrix;

fn tiny(channels: &[usize], t: usize, f: usize, axis: BroadcastAxis) -> ModelConfig {
    ModelConfig {
        broadcast_axis: axis,
        block_channels: channels.to_vec(),
        input_t: t,
        input_f: f,
        ..ModelConfig::default()
    }
}

fn random_input(cfg: &ModelConfig, seed: u64) -> FeatureMatrix {
    let mut r = rng::rng_from(seed, &[rng::tag("input")]);
    FeatureMatrix {
        rows: cfg.input_f,
        cols: cfg.input_t,
        values: (0..cfg.input_f * cfg.input_t).map(|_| r.random_range(-2.0..2.0)).collect(),
    }
}

fn random_config(r: &mut rng::Rng) -> ModelConfig {
    let n_blocks = r.random_range(1..=3);
    let channels: Vec<usize> = (0..n_blocks).map(|_| r.random_range(1..=3)).collect();
    let axis = if r.random_bool(0.5) {
        BroadcastAxis::Temporal
    } else {
        BroadcastAxis::Feature
    };
    ModelConfig {
        temporal_kernel: [1, 3, 5][r.random_range(0..3)],
        feature_kernel: [1, 3][r.random_range(0..2)],
        ..tiny(&channels, r.random_range(3..=8), r.random_range(3..=6), axis)
    }
}

/// Largest deviation between analytic and central-difference gradients,
/// relative to `max(|analytic|, |numeric|, FD_FLOOR)`. Rounding noise in a
/// central difference at step 1e-5 is around 1e-10 absolute, so entries
/// smaller than the floor are held to 1e-9 absolute instead.
const FD_FLOOR: f64 = 1e-5;

fn gradient_error(cfg: &ModelConfig, seed: u64) -> f64 {
    let mut m = build_model(cfg, seed).unwrap();
    // perturb away from the symmetric init so every path carries gradient
    let mut r = rng::rng_from(seed, &[rng::tag("perturb")]);
    for v in m.params_mut() {
        *v += r.random_range(-0.3..0.3);
    }
    let xs: Vec<FeatureMatrix> = (0..4).map(|i| random_input(cfg, seed * 31 + i)).collect();
    let batch: Vec<(&FeatureMatrix, usize)> = xs.iter().enumerate().map(|(i, x)| (x, i % cfg.n_classes)).collect();
    let lg = loss_and_grad(&m, &batch).unwrap();
    assert!((lg.loss - batch_loss(&m, &batch).unwrap()).abs() < 1e-12);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..m.n_params() {
        let orig = m.params[i];
        m.params[i] = orig + h;
        let up = batch_loss(&m, &batch).unwrap();
        m.params[i] = orig - h;
        let down = batch_loss(&m, &batch).unwrap();
        m.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = lg.grads.values[i];
        let scale = numeric.abs().max(analytic.abs()).max(FD_FLOOR);
        worst = worst.max((numeric - analytic).abs() / scale);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_tiny() {
    let cfg = tiny(&[2], 8, 5, BroadcastAxis::Temporal);
    let err = gradient_error(&cfg, 1);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn gradients_match_finite_differences_random_configs() {
    let mut r = rng::rng_from(2024, &[]);
    for i in 0..20 {
        let cfg = random_config(&mut r);
        let err = gradient_error(&cfg, 100 + i);
        assert!(err <= 1e-4, "config {cfg:?}: max relative error {err}");
    }
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::default();
    let a = build_model(&cfg, 9).unwrap();
    let b = build_model(&cfg, 9).unwrap();
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
    assert_ne!(a.params(), build_model(&cfg, 10).unwrap().params());
}

#[test]
fn single_block_hand_count() {
    let cfg = ModelConfig {
        block_channels: vec![4],
        ..ModelConfig::default()
    };
    let input_norm = 2 * 79 * 41;
    let block = 3        // depthwise, pooled axis
        + 4              // channel mix 1 -> 4
        + 2 * 4          // batch norm
        + 2 * 4 * 41     // summary norm
        + 4 * 3          // depthwise, kept axis
        + 4 * 4 + 4; // summary mix + bias
    let head = 3 * 4 + 3;
    assert_eq!(count_params(&cfg), input_norm + block + head);
    assert_eq!(build_model(&cfg, 0).unwrap().n_params(), input_norm + block + head);
}

#[test]
fn count_matches_built_arrays() {
    let mut r = rng::rng_from(5, &[]);
    for _ in 0..5 {
        let mut cfg = random_config(&mut r);
        cfg.block_channels = (0..r.random_range(1..5)).map(|_| r.random_range(1..40)).collect();
        let m = build_model(&cfg, 1).unwrap();
        let total: usize = m.param_specs().iter().map(ParamSpec::len).sum();
        assert_eq!(count_params(&cfg), total);
        assert_eq!(m.n_params(), total);
    }
}

#[test]
fn default_budget() {
    let cfg = ModelConfig::default();
    let n = count_params(&cfg);
    assert!((80_000..=97_000).contains(&n), "{n}");
    let macs = count_macs(&cfg) as f64;
    assert!((macs / 7.14e6 - 1.0).abs() <= 0.25, "{macs}");
}

#[test]
fn mac_hand_count_unit_model() {
    let cfg = ModelConfig {
        block_channels: vec![1],
        temporal_kernel: 1,
        feature_kernel: 1,
        ..tiny(&[1], 2, 3, BroadcastAxis::Temporal)
    };
    // plane 2x3 = 6, kept axis 3
    let input_norm = 2 * 6;
    let block = 6 + 6 + 2 * 6 + 6 + 2 * 3 + 3 + 3;
    let head = 6 + 3;
    assert_eq!(count_macs(&cfg), (input_norm + block + head) as u64);
}

#[test]
fn macs_grow_with_width() {
    let base = ModelConfig {
        block_channels: vec![3, 5, 7],
        ..ModelConfig::default()
    };
    for i in 0..3 {
        let mut wider = base.clone();
        wider.block_channels[i] += 1;
        assert!(count_macs(&wider) > count_macs(&base));
    }
}

#[test]
fn forward_outputs_distribution() {
    let cfg = tiny(&[3, 3, 5], 9, 7, BroadcastAxis::Temporal);
    let mut m = build_model(&cfg, 3).unwrap();
    let x = random_input(&cfg, 1);
    let p = forward(&m, &x).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6 && p.iter().all(|&v| v >= 0.0));
    m.mode = Mode::Eval;
    assert_eq!(forward(&m, &x).unwrap(), forward(&m, &x).unwrap());
    for name in ["head.weight", "head.bias"] {
        m.param_mut(name).unwrap().fill(0.0);
    }
    assert_eq!(forward(&m, &x).unwrap(), vec![1.0 / 3.0; 3]);
    let batch = [(&x, 1usize)];
    assert!((loss_and_grad(&m, &batch).unwrap().loss - 3f64.ln()).abs() < 1e-12);
    m.param_mut("head.bias").unwrap().copy_from_slice(&[0.0, 1000.0, 0.0]);
    assert_eq!(loss_and_grad(&m, &batch).unwrap().loss, 0.0);
    assert!(forward(&m, &random_input(&tiny(&[1], 9, 6, BroadcastAxis::Temporal), 0)).is_err());
}

#[test]
fn trace_shapes_and_residual_rule() {
    for axis in [BroadcastAxis::Temporal, BroadcastAxis::Feature] {
        let cfg = tiny(&[2, 2, 4], 10, 6, axis);
        let mut m = build_model(&cfg, 4).unwrap();
        m.mode = Mode::Eval;
        let geo = cfg.geometry();
        let tr = m.trace(&random_input(&cfg, 2)).unwrap();
        let mut cin = 1;
        for (i, b) in tr.iter().enumerate() {
            let c = cfg.block_channels[i];
            assert_eq!(b.input_shape, (cin, geo.pooled_len, geo.kept_len));
            assert_eq!(b.summary_shape, (c, 1, geo.kept_len));
            assert_eq!(b.output_shape, (c, geo.pooled_len, geo.kept_len));
            assert_eq!(b.broadcast.len(), c * geo.kept_len);
            assert_eq!(b.output.len(), c * geo.plane());
            let n = b.summary_hat.len() as f64;
            let mean = b.summary_hat.iter().sum::<f64>() / n;
            let var = b.summary_hat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            // eps keeps the variance just under one for small-variance summaries
            let raw_var = {
                let rm = b.summary.iter().sum::<f64>() / n;
                b.summary.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / n
            };
            assert!((var - raw_var / (raw_var + cfg.eps_norm)).abs() < 1e-9);
            if raw_var > 1e-2 {
                assert!((var - 1.0).abs() < 1e-3);
            }
            for idx in 0..b.output.len() {
                let (ch, rest) = (idx / geo.plane(), idx % geo.plane());
                let g = b.broadcast[ch * geo.kept_len + rest % geo.kept_len];
                let want = if cin == c {
                    b.input[idx] + b.temporal[idx] + g
                } else {
                    b.temporal[idx] + g
                };
                assert_eq!(b.output[idx], want);
            }
            cin = c;
        }
    }
}

#[test]
fn batched_eval_matches_trace_head() {
    let cfg = tiny(&[2, 3], 7, 5, BroadcastAxis::Temporal);
    let mut m = build_model(&cfg, 8).unwrap();
    m.mode = Mode::Eval;
    let x = random_input(&cfg, 3);
    let tr = m.trace(&x).unwrap();
    let last = tr.last().unwrap();
    let p = cfg.geometry().plane();
    let pooled: Vec<f64> = (0..3)
        .map(|c| last.output[c * p..(c + 1) * p].iter().sum::<f64>() / p as f64)
        .collect();
    let (w, b) = (m.param("head.weight").unwrap(), m.param("head.bias").unwrap());
    let logits: Vec<f64> = (0..3)
        .map(|k| b[k] + (0..3).map(|c| w[k * 3 + c] * pooled[c]).sum::<f64>())
        .collect();
    let want = ops::softmax(&logits);
    let got = forward(&m, &x).unwrap();
    for (a, b) in want.iter().zip(&got) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn argmax_ignores_logit_offsets() {
    let l = [0.3, 2.0, -1.0];
    let shifted: Vec<f64> = l.iter().map(|v| v + 50.0).collect();
    assert_eq!(argmax(&ops::softmax(&l)), argmax(&ops::softmax(&shifted)));
    assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut w = [2.0];
    let mut st = AdamState::new(1);
    adam_step(&mut w, &[1.0], &mut st, &cfg).unwrap();
    assert!((w[0] - 1.9).abs() < 1e-6);
    let mut z = [2.0];
    let mut st = AdamState::new(1);
    adam_step(&mut z, &[0.0], &mut st, &cfg).unwrap();
    assert_eq!(z, [2.0]);
    assert!(adam_step(&mut z, &[0.0, 1.0], &mut st, &cfg).is_err());

    let mcfg = tiny(&[2], 6, 4, BroadcastAxis::Temporal);
    let x = random_input(&mcfg, 0);
    let run = || {
        let mut m = build_model(&mcfg, 1).unwrap();
        let mut st = AdamState::new(m.n_params());
        for _ in 0..3 {
            let g = loss_and_grad(&m, &[(&x, 2)]).unwrap();
            apply_gradients(&mut m, &g.grads, &mut st, &AdamConfig::default()).unwrap();
        }
        m.params().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn running_stats_follow_batches() {
    let cfg = tiny(&[2], 6, 4, BroadcastAxis::Temporal);
    let mut m = build_model(&cfg, 0).unwrap();
    let x = random_input(&cfg, 1);
    let g = loss_and_grad(&m, &[(&x, 0)]).unwrap();
    m.update_running_stats(&g.batch_stats);
    let want = 0.9 * 0.0 + 0.1 * g.batch_stats[0].mean[0];
    assert!((m.running_stats()[0].mean[0] - want).abs() < 1e-15);
}

#[test]
fn checkpoint_roundtrip_and_validation() {
    let cfg = tiny(&[2, 3], 6, 4, BroadcastAxis::Feature);
    let m = build_model(&cfg, 2).unwrap();
    let bytes = encode_checkpoint(&m);
    let back = decode_checkpoint(&bytes, Path::new("x")).unwrap();
    assert_eq!(back.config, cfg);
    for (a, b) in back.params().iter().zip(m.params()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert_eq!(encode_checkpoint(&back), bytes);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    let mut other = bytes.clone();
    other[0] = b'Q';
    assert!(decode_checkpoint(&other, Path::new("x")).is_err());

    // a config that disagrees with the stored arrays is rejected
    let wider = tiny(&[2, 4], 6, 4, BroadcastAxis::Feature);
    let mut forged = encode_checkpoint(&build_model(&wider, 0).unwrap());
    let json_old = serde_json::to_vec(&wider).unwrap();
    let json_new = serde_json::to_vec(&cfg).unwrap();
    assert_eq!(json_old.len(), json_new.len());
    let pos = forged.windows(json_old.len()).position(|w| w == json_old.as_slice()).unwrap();
    forged[pos..pos + json_new.len()].copy_from_slice(&json_new);
    let err = decode_checkpoint(&forged, Path::new("ckpt")).unwrap_err();
    assert!(err.to_string().contains("ckpt"));
}

use std::path::Path;

#[test]
#[ignore]
fn bench_default_step() {
    let cfg = ModelConfig::default();
    let m = build_model(&cfg, 0).unwrap();
    let xs: Vec<FeatureMatrix> = (0..128).map(|i| random_input(&cfg, i)).collect();
    let batch: Vec<(&FeatureMatrix, usize)> = xs.iter().enumerate().map(|(i, x)| (x, i % 3)).collect();
    let t = std::time::Instant::now();
    let lg = loss_and_grad(&m, &batch).unwrap();
    println!("step {:?} loss {}", t.elapsed(), lg.loss);
    let mut e = m.clone();
    e.mode = Mode::Eval;
    let t = std::time::Instant::now();
    for x in &xs {
        forward(&e, x).unwrap();
    }
    println!("eval per sample {:?}", t.elapsed() / 128);
}
