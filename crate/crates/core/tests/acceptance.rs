//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Takes most of an hour on one core: the
//! memorization run and the ablation grid dominate.

mod common;

use std::time::{Duration, Instant};

use common::{default_full_model_check, op_checks, GRAD_TOL, OPS};
use emoattn::attention::{combine, AttentionBlockParams, MaskMode};
use emoattn::data::{synth_dataset, Dataset};
use emoattn::diffcore::{Graph, Tensor};
use emoattn::fusion::{self_attention_pool, BiRnnState};
use emoattn::heads::{HeadMode, LossWeights};
use emoattn::objective::{ccc, tukey_grad, tukey_loss, PredictionPair, TukeyConfig};
use emoattn::train::{
    ablate, classify_eval, evaluate, metric_rows, parse_grid, train, write_metrics_csv, AblationRow, AblationSpec,
    Checkpoint, EpochRecord, LossKind, TrainConfig, TrainOutcome,
};

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    println!(
        "criterion {} {:<24} {}  {}",
        v.id,
        v.name,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut failing = Vec::new();
    for op in OPS {
        for r in op_checks(op) {
            worst = worst.max(r.max_rel_error());
            checked += r.checked();
            if !r.passes(GRAD_TOL) || r.checked() == 0 {
                failing.push(op);
            }
        }
    }
    let full = default_full_model_check();
    worst = worst.max(full.max_rel_error());
    checked += full.checked();
    if !full.passes(GRAD_TOL) {
        failing.push("full objective");
    }
    let elapsed = start.elapsed();
    Verdict {
        id: 1,
        name: "gradient suite",
        pass: failing.is_empty() && elapsed < Duration::from_secs(120),
        detail: format!("{checked} elements, max rel err {worst:.2e}, {elapsed:.1?}, failing {failing:?}"),
    }
}

fn attention_algebra() -> Verdict {
    let block = AttentionBlockParams::new("b", 16, (24, 24), 2, 3).unwrap();
    let mut g = Graph::new();
    let data = (0..2 * 16 * 24 * 24).map(|i| ((i as f64) * 0.37).sin()).collect();
    let x = g.constant(Tensor::new(&[2, 16, 24, 24], data).unwrap());
    let zero = block.forward(&mut g, x, MaskMode::Constant(0.0)).unwrap();
    let identity = g.value(zero.output).data() == g.value(zero.trunk).data();

    let t = g.constant(Tensor::full(&[1, 3, 4, 4], 4.0));
    let m = g.constant(Tensor::full(&[1, 3, 4, 4], 0.25));
    let h = combine(&mut g, t, m).unwrap();
    let five = g.value(h).data().iter().all(|v| *v == 5.0);

    let free = block.forward(&mut g, x, MaskMode::Learned).unwrap();
    let in_range = g.value(free.mask).data().iter().all(|v| *v > 0.0 && *v < 1.0);
    Verdict {
        id: 2,
        name: "attention algebra",
        pass: identity && five && in_range,
        detail: format!("M=0 gives T: {identity}, (1+0.25)*4=5: {five}, mask in (0,1): {in_range}"),
    }
}

fn pooling() -> Verdict {
    let n = 2;
    let w = 4;
    let level = |g: &mut Graph, seed: f64| {
        let data = (0..n * w).map(|i| ((i as f64) * 0.91 + seed).sin() * 1.3).collect();
        g.constant(Tensor::new(&[n, w], data).unwrap())
    };
    let mut g = Graph::new();
    let hidden: Vec<_> = (0..3).map(|k| level(&mut g, k as f64)).collect();
    let outputs: Vec<_> = (0..3).map(|k| level(&mut g, 10.0 + k as f64)).collect();
    let state = BiRnnState {
        hidden: hidden.clone(),
        outputs: outputs.clone(),
        forward: vec![],
        backward: vec![],
    };
    let (pooled, weights) = self_attention_pool(&mut g, &state).unwrap();
    let wsum_err = g
        .value(weights)
        .data()
        .chunks(3)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    // scalar evaluation: score_i = <h_i, y_i>, softmax over i, sum_i a_i y_i
    let mut oracle_err: f64 = 0.0;
    for s in 0..n {
        let row = |v: &emoattn::diffcore::Var| g.value(*v).data()[s * w..(s + 1) * w].to_vec();
        let scores: Vec<f64> = (0..3)
            .map(|i| {
                let (h, y) = (row(&hidden[i]), row(&outputs[i]));
                h.iter().zip(&y).map(|(a, b)| a * b).sum()
            })
            .collect();
        let z: f64 = scores.iter().map(|e| e.exp()).sum();
        for j in 0..w {
            let expect: f64 = (0..3).map(|i| scores[i].exp() / z * row(&outputs[i])[j]).sum();
            oracle_err = oracle_err.max((g.value(pooled).data()[s * w + j] - expect).abs());
        }
    }

    let single = BiRnnState {
        hidden: vec![hidden[0]],
        outputs: vec![outputs[0]],
        forward: vec![],
        backward: vec![],
    };
    let (one, _) = self_attention_pool(&mut g, &single).unwrap();
    let exact = g.value(one).data() == g.value(outputs[0]).data();
    Verdict {
        id: 3,
        name: "self-attention pooling",
        pass: wsum_err <= 1e-6 && oracle_err <= 1e-9 && exact,
        detail: format!("weight sum err {wsum_err:.1e}, 3-level oracle err {oracle_err:.1e}, l=1 exact: {exact}"),
    }
}

fn objective_oracles() -> Verdict {
    let cfg = TukeyConfig::default();
    let c = cfg.c();
    let boundary = tukey_loss(PredictionPair::new(&[c], &[0.0]).unwrap(), cfg);
    let boundary_ok = (boundary - c * c / 6.0).abs() <= 1e-12;
    let flat = [c + 1e-9, c + 0.5, -c - 2.0, 50.0].iter().all(|r| tukey_grad(*r, cfg) == 0.0);
    let y = [0.3, -0.5, 0.9, -0.7];
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    let same = ccc(PredictionPair::new(&y, &y).unwrap()).unwrap().value;
    let opposite = ccc(PredictionPair::new(&y, &neg).unwrap()).unwrap().value;
    let ccc_ok = (same - 1.0).abs() < 1e-12 && (opposite + 1.0).abs() < 1e-12;
    let combined = LossWeights { alpha: 0.5, beta: 0.3 }.combine(1.0, 2.0, 4.0);
    Verdict {
        id: 4,
        name: "objective oracles",
        pass: boundary_ok && flat && ccc_ok && combined == 2.2,
        detail: format!(
            "rho(c)={boundary:.12}, flat beyond c: {flat}, ccc(y,y)={same}, ccc(y,-y)={opposite}, combined={combined}"
        ),
    }
}

/// Default architecture and objective; batch size, learning rate, warm-up and
/// plateau patience are the memorization recipe.
fn memorization_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    for kv in ["batch_size=8", "lr=3e-4", "warmup_epochs=5", "plateau_patience=10"] {
        cfg.apply_text(kv).unwrap();
    }
    cfg
}

fn memorization(data: &Dataset) -> (Verdict, TrainOutcome) {
    let cfg = memorization_config();
    let start = Instant::now();
    let outcome = train(&cfg, data, None, &mut |r| {
        if r.epoch % 20 == 0 {
            eprintln!("memorize epoch {} loss {:.5} lr {:.0e} ({:.0?})", r.epoch, r.train_loss, r.lr, start.elapsed());
        }
    })
    .unwrap();
    let elapsed = start.elapsed();
    let r = evaluate(&outcome.last.network, data).unwrap();
    let (v, a) = (r.ccc_valence.unwrap(), r.ccc_arousal.unwrap());
    let verdict = Verdict {
        id: 5,
        name: "memorization",
        pass: v > 0.95 && a > 0.95 && outcome.history.len() <= 200 && elapsed < Duration::from_secs(600),
        detail: format!(
            "train ccc valence {v:.4} arousal {a:.4}, rmse {:.4}, {} epochs, {elapsed:.0?}",
            r.rmse_mean().unwrap(),
            outcome.history.len()
        ),
    };
    (verdict, outcome)
}

/// Largest relative epoch-over-epoch loss increase once the warm-up is over.
fn worst_uptick(history: &[EpochRecord], warmup: usize) -> f64 {
    history[warmup..]
        .windows(2)
        .map(|w| (w[1].train_loss - w[0].train_loss) / w[0].train_loss)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Ablation recipe: default architecture, short runs at the memorization
/// batch size and learning rate.
fn ablation_base() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    cfg.apply_text("batch_size=8").unwrap();
    cfg.apply_text("lr=3e-4").unwrap();
    cfg
}

fn row_ccc(rows: &[AblationRow], key: &str, value: &str) -> f64 {
    rows.iter()
        .find(|r| r.settings.iter().any(|(k, v)| k == key && v == value))
        .and_then(|r| r.report)
        .and_then(|r| r.ccc_mean())
        .unwrap_or(f64::NAN)
}

fn ablation() -> Verdict {
    let start = Instant::now();
    let mut progress = |row: usize, seed: u64, mode: HeadMode, r: &EpochRecord| {
        let ccc = r.val.and_then(|v| v.ccc_mean()).unwrap_or(f64::NAN);
        eprintln!(
            "ablation row {row} seed {seed} {mode} epoch {} val ccc {ccc:.4} ({:.0?})",
            r.epoch,
            start.elapsed()
        );
    };
    let losses = AblationSpec {
        base: ablation_base(),
        axes: parse_grid("loss=mse,tukey").unwrap(),
        ..AblationSpec::default()
    };
    let loss_rows = ablate(&losses, &mut progress).unwrap();
    // the 2mt/tukey row above is the default configuration; only the other heads run again
    let mut tukey = ablation_base();
    tukey.loss = LossKind::Tukey;
    let heads = AblationSpec {
        base: tukey,
        axes: parse_grid("head_mode=mt,single").unwrap(),
        ..AblationSpec::default()
    };
    let head_rows = ablate(&heads, &mut progress).unwrap();
    let elapsed = start.elapsed();

    let mse = row_ccc(&loss_rows, "loss", "mse");
    let two = row_ccc(&loss_rows, "loss", "tukey");
    let mt = row_ccc(&head_rows, "head_mode", "mt");
    let single = row_ccc(&head_rows, "head_mode", "single");
    let a = two > mse;
    let b = two >= mt && mt >= single;
    Verdict {
        id: 6,
        name: "ablation direction",
        pass: a && b && elapsed < Duration::from_secs(3600),
        detail: format!(
            "(a) tukey {two:.4} vs mse {mse:.4}: {a}; (b) 2mt {two:.4} >= mt {mt:.4} >= single {single:.4}: {b}; \
             3 seeds x {} samples, {elapsed:.0?}",
            losses.samples
        ),
    }
}

fn metrics_csv(outcome: &TrainOutcome) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, outcome.last.config.head_mode, &metric_rows(&outcome.history)).unwrap();
    buf
}

fn determinism(memorized: &TrainOutcome, data: &Dataset) -> Verdict {
    let mut cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    cfg.batch_size = 8;
    let (train_set, val_set) = synth_dataset(48, 7).split_at(32);
    let run = || train(&cfg, &train_set, Some(&val_set), &mut |_| {}).unwrap();
    let (a, b) = (metrics_csv(&run()), metrics_csv(&run()));
    let identical = a == b && !a.is_empty();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memorized.ckpt");
    memorized.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let images = common::center_batch(data).images;
    let before = memorized.last.network.predict(&images).unwrap();
    let after = loaded.network.predict(&images).unwrap();
    let bits = |v: &Option<Vec<f64>>| v.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let round_trip = bits(&before.valence) == bits(&after.valence)
        && bits(&before.arousal) == bits(&after.arousal)
        && bits(&before.logits) == bits(&after.logits);
    Verdict {
        id: 7,
        name: "determinism",
        pass: identical && round_trip,
        detail: format!("metric csv byte-identical: {identical}, checkpoint forward bit-exact: {round_trip}"),
    }
}

fn classification(memorized: &TrainOutcome, data: &Dataset) -> Verdict {
    let (acc, labeled) = classify_eval(&memorized.last.network, data).unwrap();
    Verdict {
        id: 8,
        name: "classification head",
        pass: acc > 0.9,
        detail: format!("accuracy {acc:.4} on {labeled} memorized samples"),
    }
}

#[test]
fn acceptance() {
    let data = synth_dataset(64, 42);
    let mut verdicts = vec![gradient_suite(), attention_algebra(), pooling(), objective_oracles()];
    verdicts.iter().for_each(report);

    let (mem, outcome) = memorization(&data);
    report(&mem);
    let warmup = memorization_config().warmup_epochs;
    let uptick = worst_uptick(&outcome.history, warmup);
    println!("invariant: largest epoch-over-epoch loss increase after warm-up {:.2}%", 100.0 * uptick);
    verdicts.push(mem);

    let rest = [ablation(), determinism(&outcome, &data), classification(&outcome, &data)];
    rest.iter().for_each(report);
    verdicts.extend(rest);

    println!("summary:");
    verdicts.iter().for_each(report);
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
