//! Acceptance suite. One PASS/FAIL line per criterion.
//!
//! `cargo test -p tcnn --test acceptance -- 1 4 7` runs a subset.
//! Criterion 7 is a known red (see README); every other FAIL exits nonzero.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcnn::gpsa::{gated_attention, gpsa_forward, positional_logits, GpsaConfig, GpsaLayer};
use tcnn::io::checkpoint::{decode, encode};
use tcnn::io::data::{synthetic_split, Split};
use tcnn::io::kv::KvMap;
use tcnn::model::{build_cnn, cross_entropy, ModelConfig, ModelGraph, StageSpec};
use tcnn::nn::ConvLayer;
use tcnn::reparam::{
    conv_to_gpsa, filter_pixel, transform_last_stage, verify_equivalence, Downsample, GpsaBlock, InitMode,
};
use tcnn::tensor::{gradcheck_projected, no_grad};
use tcnn::train::{
    lr_sweep, schedule_csv, schedule_sweep, schedule_table, sweep_csv, train_epochs, ExperimentSetup, MetricsLog,
    TrainPlan,
};
use tcnn::{DType, Element, Tensor};

const KNOWN_RED: &[usize] = &[7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn out_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn max_dev<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(p, q)| (p.f64() - q.f64()).abs()).fold(0.0, f64::max)
}

// Direct-loop cross-correlation, stride 1, zero padding 1.
fn naive_conv(x: &Tensor<f64>, f: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let o = f.shape()[0];
    let (xd, fd) = (x.data(), f.data());
    let mut out = vec![0.0; b * o * h * w];
    for bi in 0..b {
        for oc in 0..o {
            for i in 0..h {
                for j in 0..w {
                    let mut s = bias[oc];
                    for ic in 0..c {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (r, q) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                s += xd[((bi * c + ic) * h + r as usize) * w + q as usize]
                                    * fd[((oc * c + ic) * 3 + di) * 3 + dj];
                            }
                        }
                    }
                    out[((bi * o + oc) * h + i) * w + j] = s;
                }
            }
        }
    }
    out
}

fn random_conv<T: Element>(rng: &mut ChaCha8Rng) -> (ConvLayer<T>, usize) {
    let d_in = [4, 8, 16][rng.random_range(0..3)];
    let d_out = d_in * rng.random_range(1..=2);
    let filter = Tensor::randn(&[d_out, d_in, 3, 3], (2.0 / (9 * d_in) as f64).sqrt(), rng);
    let bias = Tensor::randn(&[d_out], 0.5, rng);
    (ConvLayer::new(filter, Some(bias), 1, 1).unwrap(), d_in)
}

fn c1_layer_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst32, mut worst64, mut worst_ref) = (0f64, 0f64, 0f64);
    for _ in 0..20 {
        let (conv, d_in) = random_conv::<f64>(&mut rng);
        let (h, w) = (rng.random_range(8..=16), rng.random_range(8..=16));
        let x = Tensor::<f64>::randn(&[2, d_in, h, w], 1.0, &mut rng);
        let reference = naive_conv(&x, &conv.filter, conv.bias.as_ref().unwrap().data());
        let y = no_grad(|| conv.forward(&x)).unwrap();
        worst_ref = y.data().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(worst_ref, f64::max);

        let g64 = GpsaBlock::from_conv(&conv, &InitMode::strict_for(DType::F64), Downsample::Subsample).unwrap();
        worst64 = worst64.max(max_dev(&y, &no_grad(|| g64.forward(&x)).unwrap()));

        let conv32 = ConvLayer::<f32>::new(conv.filter.cast(), conv.bias.as_ref().map(|b| b.cast()), 1, 1).unwrap();
        let x32 = x.cast::<f32>();
        let g32 = GpsaBlock::from_conv(&conv32, &InitMode::strict_for(DType::F32), Downsample::Subsample).unwrap();
        let y32 = no_grad(|| conv32.forward(&x32)).unwrap();
        worst32 = worst32.max(max_dev(&y32, &no_grad(|| g32.forward(&x32)).unwrap()));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst32 <= 1e-4 && worst64 <= 1e-9 && worst_ref <= 1e-12 && secs < 60.0,
        format!(
            "20 layers: max abs f32 {worst32:.2e} (<= 1e-4), f64 {worst64:.2e} (<= 1e-9); conv vs direct loop {worst_ref:.1e}; {secs:.1}s"
        ),
    )
}

/// `tiny` CNN with one epoch of training, so BatchNorm statistics are non-trivial.
fn trained_tiny() -> (ModelGraph<f32>, Split) {
    let split = synthetic_split(512, 256, 32, 10, 3).unwrap();
    let mut cnn: ModelGraph<f32> = build_cnn(&ModelConfig::tiny()).unwrap();
    let plan = TrainPlan { total_epochs: 1, warmup_epochs: 0, ..TrainPlan::from_scratch() };
    train_epochs(&mut cnn, &split, &plan, &mut MetricsLog::default()).unwrap();
    (cnn, split)
}

fn c2_model_equivalence(cnn: &ModelGraph<f32>) -> Outcome {
    let (t, report) = transform_last_stage(cnn, &InitMode::strict()).unwrap();
    let strided = report.layers.iter().filter(|l| l.stride == 2).count();
    let eq = verify_equivalence(cnn, &t, 100, 1e-3, 32, 0).unwrap();
    outcome(
        eq.passed && strided == 1 && report.layers.len() == 4,
        format!(
            "tiny, 4 layers ({strided} strided), 100 probes at 32x32: max abs {:.2e}, max rel {:.2e} (tol 1e-3)",
            eq.max_abs, eq.max_rel
        ),
    )
}

fn c3_resolution_transfer(cnn: &ModelGraph<f32>) -> Outcome {
    let (t, _) = transform_last_stage(cnn, &InitMode::strict()).unwrap();
    let before: Vec<Vec<f32>> = t.named_params().iter().map(|(_, p)| p.to_vec()).collect();
    let mut pass = true;
    let mut detail = String::new();
    for res in [16, 24, 32] {
        let eq = verify_equivalence(cnn, &t, 100, 1e-3, res, res as u64).unwrap();
        pass &= eq.passed;
        write!(detail, "{res}px max abs {:.2e}; ", eq.max_abs).unwrap();
    }
    let after: Vec<Vec<f32>> = t.named_params().iter().map(|(_, p)| p.to_vec()).collect();
    let unchanged = before == after;
    write!(detail, "parameters unchanged: {unchanged}").unwrap();
    outcome(pass && unchanged, detail)
}

fn c4_gradients() -> Outcome {
    type Get = fn(&GpsaLayer<f64>) -> Tensor<f64>;
    type Set = fn(&mut GpsaLayer<f64>, Tensor<f64>);
    let classes: [(&str, Get, Set); 8] = [
        ("W_qry", |l| l.w_qry.clone(), |l, t| l.w_qry = t),
        ("W_key", |l| l.w_key.clone(), |l, t| l.w_key = t),
        ("W_val", |l| l.w_val.clone(), |l, t| l.w_val = t),
        ("W_out", |l| l.w_out.clone(), |l, t| l.w_out = t),
        ("alpha", |l| l.alpha_raw.clone(), |l, t| l.alpha_raw = t),
        ("Delta", |l| l.centers.clone(), |l, t| l.centers = t),
        ("lambda", |l| l.gate.clone(), |l, t| l.gate = t),
        ("bias", |l| l.bias.clone().unwrap(), |l, t| l.bias = Some(t)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = GpsaConfig::new(4, 3, 5);
    cfg.bias = true;
    let mut layer = GpsaLayer::random(cfg, &mut rng).unwrap();
    layer.centers = Tensor::uniform(&[4, 2], -1.3, 1.3, &mut rng);
    layer.gate = Tensor::uniform(&[4], -1.5, 1.5, &mut rng);
    layer.alpha_raw = Tensor::uniform(&[4], -0.2, 0.6, &mut rng);
    layer.bias = Some(Tensor::uniform(&[5], -1.0, 1.0, &mut rng));
    let x = Tensor::<f64>::randn(&[2, 12, 3], 1.0, &mut rng);
    let mut worst_layer = 0f64;
    for (_, get, set) in classes {
        let r = gradcheck_projected(
            |p| {
                let mut l = layer.clone();
                set(&mut l, p.clone());
                gpsa_forward(&x, &l, 3, 4)
            },
            &get(&layer),
            1e-5,
            1e-5,
            0,
        )
        .unwrap();
        worst_layer = worst_layer.max(r.max_rel_err);
    }

    // Two residual blocks, the second transformed; full loss, every parameter and the input.
    let cfg = ModelConfig {
        name: "two".into(),
        in_channels: 2,
        n_classes: 3,
        stem_channels: 3,
        resolution: 16,
        stages: vec![StageSpec::basic(1, 3, 1), StageSpec::basic(1, 4, 2)],
        drop_rate: 0.0,
        seed: 11,
    };
    let cnn: ModelGraph<f64> = build_cnn(&cfg).unwrap();
    let (model, _) = transform_last_stage(&cnn, &InitMode { qk_std: 0.5, seed: 3, ..InitMode::paper() }).unwrap();
    let x = Tensor::<f64>::randn(&[2, 2, 16, 16], 1.0, &mut rng).requires_grad_();
    let labels = [0usize, 2];
    let loss = |m: &ModelGraph<f64>, x: &Tensor<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        cross_entropy(&m.forward_mode(x, true, &mut r).unwrap(), &labels).unwrap()
    };
    model.zero_grad();
    loss(&model, &x).backward().unwrap();
    let mut params = model.named_params();
    params.push(("input".into(), x.clone()));
    let eps = 1e-6;
    let mut worst_model = 0f64;
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let eval = |d: f64| {
                    let mut v = base.clone();
                    v[i] += d;
                    let t = Tensor::from_vec(v, p.shape()).unwrap();
                    no_grad(|| {
                        if name == "input" {
                            loss(&model, &t)
                        } else {
                            let mut m = model.clone();
                            m.set_param(&name, t).unwrap();
                            loss(&m, &x)
                        }
                    })
                    .item()
                };
                (eval(eps) - eval(-eps)) / (2.0 * eps)
            })
            .collect();
        let err = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        worst_model = worst_model.max(if scale > 0.0 { err / scale } else { err });
    }
    outcome(
        worst_layer <= 1e-5 && worst_model <= 1e-4,
        format!("GPSA 8 classes max rel {worst_layer:.2e} (<= 1e-5); 2-block T-CNN loss max rel {worst_model:.2e} (<= 1e-4)"),
    )
}

fn c5_attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut row_err, mut argmax_miss, mut worst_off, mut worst_peak) = (0f64, 0usize, 0f64, 0f64);
    let draws = 10_000;
    for _ in 0..draws {
        // Row sums under random parameters.
        let heads = rng.random_range(1..=9);
        let d_in = rng.random_range(1..=6);
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let mut layer = GpsaLayer::<f64>::random(GpsaConfig::new(heads, d_in, 2), &mut rng).unwrap();
        layer.gate = Tensor::uniform(&[heads], -6.0, 6.0, &mut rng);
        layer.alpha_raw = Tensor::uniform(&[heads], -1.0, 4.0, &mut rng);
        layer.centers = Tensor::uniform(&[heads, 2], -3.0, 3.0, &mut rng);
        layer.w_qry = Tensor::randn(layer.w_qry.shape(), 2.0, &mut rng);
        let x = Tensor::<f64>::randn(&[h * w, d_in], 2.0, &mut rng);
        let pl = layer.positional_logits(h, w).unwrap();
        for m in gated_attention(&x, &layer, &pl).unwrap() {
            for row in m.data().chunks(h * w) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                if row.iter().any(|&v| v < 0.0) {
                    row_err = f64::INFINITY;
                }
            }
        }

        // Positional argmax for an integer centre, query in the middle of a 7×7 grid.
        let alpha = rng.random_range(0.05..30.0);
        let (dr, dc) = (rng.random_range(-3i64..=3), rng.random_range(-3i64..=3));
        let pl = positional_logits::<f64>(7, 7, &[alpha], &[[dr as f64, dc as f64]]).unwrap();
        let q = 3 * 7 + 3;
        let best = (0..49).max_by(|&a, &b| pl.at(0, q, a).total_cmp(&pl.at(0, q, b))).unwrap();
        if best != ((3 + dr) * 7 + 3 + dc) as usize {
            argmax_miss += 1;
        }

        // Strict init: interior-query maps are one-hot at query + Δ.
        let c = rng.random_range(1..=4);
        let conv = ConvLayer::<f64>::he_init(c, rng.random_range(1..=4), 3, 1, 1, &mut rng);
        let g = conv_to_gpsa(&conv, &InitMode::strict_for(DType::F64)).unwrap();
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let x = Tensor::<f64>::randn(&[h * w, c], 1.0, &mut rng);
        let maps = gated_attention(&x, &g, &g.positional_logits(h, w).unwrap()).unwrap();
        let (qr, qc) = (rng.random_range(1..h - 1), rng.random_range(1..w - 1));
        let q = qr * w + qc;
        for (head, m) in maps.iter().enumerate() {
            let (kr, kc) = filter_pixel(head, 3);
            let key = (qr + kr - 1) * w + qc + kc - 1;
            let row = &m.data()[q * h * w..(q + 1) * h * w];
            let off: f64 = row.iter().enumerate().filter(|(j, _)| *j != key).map(|(_, v)| v).sum();
            worst_off = worst_off.max(off);
            worst_peak = worst_peak.max(1.0 - row[key]);
        }
    }
    outcome(
        row_err <= 1e-6 && argmax_miss == 0 && worst_off <= 1e-8 && worst_peak <= 1e-8,
        format!(
            "{draws} draws: row-sum error {row_err:.1e}; argmax misses {argmax_miss}; strict off-peak mass {worst_off:.1e}, peak deficit {worst_peak:.1e}"
        ),
    )
}

fn c6_paper_init() -> Outcome {
    let cnn: ModelGraph<f32> = build_cnn(&ModelConfig::tiny()).unwrap();
    let (t, _) = transform_last_stage(&cnn, &InitMode::paper()).unwrap();
    let sigma1 = 1.0 / (1.0 + (-1f64).exp());
    let (mut gate_err, mut span_err, mut heads) = (0f64, 0f64, 0);
    for (_, l) in t.gpsa_layers() {
        for (g, s) in l.gating_values().iter().zip(l.attention_span()) {
            gate_err = gate_err.max((g - sigma1).abs());
            span_err = span_err.max((s - 1.0).abs());
            heads += 1;
        }
    }
    outcome(
        gate_err <= 1e-4 && span_err <= 1e-6 && heads == 36,
        format!("{heads} heads: |gate - {sigma1:.4}| <= {gate_err:.1e} (1e-4), |span - 1| <= {span_err:.1e} (1e-6)"),
    )
}

fn c7_param_count() -> Outcome {
    let cfg = ModelConfig::tiny();
    let cnn: ModelGraph<f32> = build_cnn(&cfg).unwrap();
    let (t, report) = transform_last_stage(&cnn, &InitMode::paper()).unwrap();
    let count = |m: &ModelGraph<f32>| m.named_params().iter().map(|(_, p)| p.numel()).sum::<usize>();
    let (before, after) = (count(&cnn), count(&t));

    // Closed form from the config: each 3×3 conv of the last stage adds 3·D_in² + 9 heads × 4 scalars.
    let last = cfg.stages.last().unwrap();
    let prev = if cfg.stages.len() > 1 { cfg.stages[cfg.stages.len() - 2].channels } else { cfg.stem_channels };
    let mut expected = 0;
    for b in 0..last.blocks {
        let d_in = if b == 0 { prev } else { last.channels };
        expected += 3 * d_in * d_in + 36;
        expected += 3 * last.channels * last.channels + 36;
    }
    let added = after - before;
    let increase = added as f64 / before as f64;
    let exact = added == expected && report.added_params() == expected;
    outcome(
        exact && increase <= 0.10,
        format!(
            "added {added} (closed form {expected}, exact: {exact}) on {before}: +{:.2}% (limit 10%). \
             The last stage holds {:.0}% of tiny's weights and Q/K/V add 3 D_in^2 against 9 D_in D_out per conv, \
             so a one-third increase of that stage alone exceeds 10% of the model",
            100.0 * increase,
            100.0 * last_stage_share(&cnn)
        ),
    )
}

fn last_stage_share(m: &ModelGraph<f32>) -> f64 {
    let s = m.stages.len() - 1;
    let prefix = format!("stages.{s}.");
    let params = m.named_params();
    let total: usize = params.iter().map(|(_, p)| p.numel()).sum();
    let last: usize = params.iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(_, p)| p.numel()).sum();
    last as f64 / total as f64
}

fn c8_protocol() -> Outcome {
    let t0 = Instant::now();
    let split = synthetic_split(8000, 2000, 32, 10, 0).unwrap();
    let cfg = ModelConfig::tiny();
    let setup = ExperimentSetup {
        model: &cfg,
        data: &split,
        scratch: TrainPlan::from_scratch(),
        finetune: TrainPlan::finetune(),
        init: InitMode::paper(),
    };
    let rows = match schedule_sweep::<f32>(&setup, &[0, 10, 20, 30, 40], 10) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("schedule failed: {e}")),
    };
    let path = out_dir().join("schedule.csv");
    std::fs::write(&path, schedule_csv(&rows)).unwrap();
    eprint!("{}", schedule_table(&rows));
    let csv_rows = std::fs::read_to_string(&path).unwrap().lines().count() - 1;
    let same: Vec<_> = rows.iter().filter(|r| r.same_optimizer).collect();
    let tcnn = rows.iter().find(|r| r.name == "T-CNN").unwrap();
    let vanilla = rows.iter().find(|r| r.name == "Vanilla CNN + ft").unwrap();
    let a = same.len() == 5 && csv_rows == 7;
    let b = tcnn.test_acc >= vanilla.test_acc - 1.0;
    let c = tcnn.gate_shift.len() == 4 && tcnn.gate_shift.iter().all(|&s| s > 0.05);
    let secs = t0.elapsed().as_secs_f64();
    let by_t1: Vec<String> = same.iter().map(|r| format!("{}:{:.2}", r.t1, r.test_acc)).collect();
    let monotone = same.windows(2).all(|w| w[1].test_acc >= w[0].test_acc);
    outcome(
        a && b && c && secs <= 1800.0,
        format!(
            "(a) {} runs, {csv_rows} CSV rows; (b) T-CNN {:.2}% vs CNN 50 epochs {:.2}% (>= -1.0); \
             (c) max gate shift per layer {:?} (> 0.05); test acc by t1 [{}], monotone in t1: {monotone}; {secs:.0}s (<= 1800); CSV {}",
            same.len(),
            tcnn.test_acc,
            vanilla.test_acc,
            tcnn.gate_shift.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>(),
            by_t1.join(" "),
            path.display()
        ),
    )
}

fn c9_determinism(cnn: &ModelGraph<f32>) -> Outcome {
    let split = synthetic_split(256, 64, 16, 10, 9).unwrap();
    let cfg = ModelConfig { resolution: 16, ..ModelConfig::tiny() };
    let setup = ExperimentSetup {
        model: &cfg,
        data: &split,
        scratch: TrainPlan { total_epochs: 2, warmup_epochs: 1, resolution: 16, ..TrainPlan::from_scratch() },
        finetune: TrainPlan { total_epochs: 1, resolution: 16, ..TrainPlan::finetune() },
        init: InitMode::paper(),
    };
    let run = || schedule_csv(&schedule_sweep::<f64>(&setup, &[0, 1, 2], 1).unwrap());
    let same_csv = run() == run();

    let (t, _) = transform_last_stage(cnn, &InitMode::paper()).unwrap();
    let bytes = encode(&t, None, &KvMap::new());
    let back = decode::<f32>(&bytes).unwrap().model;
    let byte_identical = encode(&back, None, &KvMap::new()) == bytes;
    let bit_exact = t
        .named_params()
        .iter()
        .zip(back.named_params())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let eq = verify_equivalence(&t, &back, 20, 0.0, 32, 0).unwrap();
    outcome(
        same_csv && byte_identical && bit_exact && eq.max_abs == 0.0,
        format!(
            "f64 schedule CSVs identical: {same_csv}; save/load/save byte-identical: {byte_identical}; params bit-exact: {bit_exact}; reload deviation {:.1e}",
            eq.max_abs
        ),
    )
}

fn c10_lr_sweep(cnn: &ModelGraph<f32>, split: &Split) -> Outcome {
    let (t, _) = transform_last_stage(cnn, &InitMode::paper()).unwrap();
    let plan = TrainPlan { total_epochs: 3, warmup_epochs: 1, ..TrainPlan::finetune() };
    let lrs = [1e-4, 1e-3, 1e-2];
    let runs = match lr_sweep(&t, &lrs, &plan, split) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let dir = out_dir().join("lr_sweep");
    std::fs::create_dir_all(&dir).unwrap();
    let mut logs = 0;
    for r in &runs {
        std::fs::write(dir.join(format!("lr_{:e}.csv", r.max_lr)), r.log.to_csv()).unwrap();
        logs += usize::from(r.log.len() == 3);
    }
    std::fs::write(dir.join("sweep.csv"), sweep_csv(&runs, plan.warmup_epochs)).unwrap();
    let dips: Vec<String> = runs.iter().map(|r| format!("{:e}:{:.2}", r.max_lr, r.dip_depth(plan.warmup_epochs))).collect();
    let finite = runs.iter().all(|r| r.dip_depth(plan.warmup_epochs).is_finite());
    let depth: Vec<f64> = runs.iter().map(|r| r.dip_depth(plan.warmup_epochs)).collect();
    let monotone = depth.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        logs == 3 && finite,
        format!("{logs} logs; dip depth at end of warmup (points) [{}], monotone in LR: {monotone}", dips.join(" ")),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| only.is_empty() || only.contains(&n);
    let t_all = Instant::now();
    let base = if [2, 3, 9, 10].iter().any(|&n| want(n)) { Some(trained_tiny()) } else { None };
    let cnn = || &base.as_ref().unwrap().0;
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "layer equivalence", Box::new(c1_layer_equivalence)),
        (2, "model equivalence", Box::new(|| c2_model_equivalence(cnn()))),
        (3, "resolution transfer", Box::new(|| c3_resolution_transfer(cnn()))),
        (4, "gradient suite", Box::new(c4_gradients)),
        (5, "attention invariants", Box::new(c5_attention_invariants)),
        (6, "paper init constants", Box::new(c6_paper_init)),
        (7, "parameter count", Box::new(c7_param_count)),
        (8, "schedule protocol", Box::new(c8_protocol)),
        (9, "determinism and round trip", Box::new(|| c9_determinism(cnn()))),
        (10, "lr sweep", Box::new(|| c10_lr_sweep(cnn(), &base.as_ref().unwrap().1))),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    let mut ran = 0;
    for (n, name, f) in &criteria {
        if !want(*n) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} [{name}] {} ({:.1}s)", o.detail, t0.elapsed().as_secs_f64());
        if o.pass {
            passed += 1;
        } else if !KNOWN_RED.contains(n) {
            unexpected.push(*n);
        }
    }
    println!("acceptance: {passed}/{ran} PASS in {:.0}s; known red: {KNOWN_RED:?}", t_all.elapsed().as_secs_f64());
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
