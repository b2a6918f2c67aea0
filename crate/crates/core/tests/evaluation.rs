//! Evaluation, classification and ablation contracts on small models.

use emoattn::data::{make_batch, synth_dataset, CropSpec, Sample};
use emoattn::diffcore::Tensor;
use emoattn::model::Network;
use emoattn::nn::zero_all;
use emoattn::train::{
    ablate, classify_eval, evaluate, parse_grid, tta_predict, write_ablation_csv, AblationSpec, TrainConfig,
};

fn tiny() -> TrainConfig {
    TrainConfig::from_text("channels = 2,3,4\nn_dim = 6\nn_cat = 5\nembed_d = 4\nrnn_u = 3\nbatch_size = 8").unwrap()
}

fn network(cfg: &TrainConfig) -> Network {
    Network::new(cfg.model_config(), cfg.seed).unwrap()
}

#[test]
fn constant_predictions_give_degenerate_zero_ccc() {
    let mut net = network(&tiny());
    zero_all(&mut net.heads.valence_out);
    zero_all(&mut net.heads.arousal_out);
    let data = synth_dataset(20, 3);
    let r = evaluate(&net, &data).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.ccc_valence, Some(0.0));
    assert_eq!(r.ccc_arousal, Some(0.0));
    // tanh(0) = 0, so RMSE is the root mean square of the labels
    let rms = |v: Vec<f64>| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    assert!((r.rmse_valence.unwrap() - rms(data.valence())).abs() < 1e-12);
    assert!((r.rmse_arousal.unwrap() - rms(data.arousal())).abs() < 1e-12);
}

#[test]
fn evaluation_is_repeatable() {
    let net = network(&tiny());
    let data = synth_dataset(10, 4);
    assert_eq!(evaluate(&net, &data).unwrap(), evaluate(&net, &data).unwrap());
}

#[test]
fn uniform_logits_on_balanced_classes() {
    let mut net = network(&tiny());
    zero_all(net.heads.clf_out.as_mut().unwrap());
    let mut data = synth_dataset(70, 5);
    for (i, s) in data.samples.iter_mut().enumerate() {
        s.expression = Some(i % 7);
    }
    let (acc, labeled) = classify_eval(&net, &data).unwrap();
    assert_eq!(labeled, 70);
    assert!((acc - 1.0 / 7.0).abs() < 1e-12, "accuracy {acc}");
}

#[test]
fn single_task_model_cannot_classify() {
    let mut cfg = tiny();
    cfg.set("head_mode", "single_v").unwrap();
    assert!(classify_eval(&network(&cfg), &synth_dataset(4, 1)).is_err());
}

#[test]
fn symmetric_image_needs_no_averaging() {
    let net = network(&tiny());
    let data: Vec<f64> = (0..56 * 56)
        .map(|i| {
            let (y, x) = (i / 56, i % 56);
            let m = x.min(55 - x);
            (((y * 3 + m * 5) % 17) as f64) / 17.0
        })
        .collect();
    let sample = Sample {
        image: Tensor::new(&[1, 56, 56], data).unwrap(),
        valence: 0.0,
        arousal: 0.0,
        expression: None,
    };
    let both = tta_predict(&net, &[&sample, &sample]).unwrap();
    let plain = net
        .predict(&make_batch(&[&sample], &[CropSpec::CENTER]).unwrap().images)
        .unwrap();
    assert_eq!(both.valence.as_ref().unwrap()[0], plain.valence.as_ref().unwrap()[0]);
    assert_eq!(both.arousal.as_ref().unwrap()[1], plain.arousal.as_ref().unwrap()[0]);
}

#[test]
fn block_grid_gives_one_row_per_value() {
    let mut base = tiny();
    base.epochs = 1;
    let spec = AblationSpec {
        base,
        axes: parse_grid("blocks=1,2,3").unwrap(),
        seeds: vec![0],
        samples: 40,
        ..AblationSpec::default()
    };
    let rows = ablate(&spec, &mut |_, _, _, _| {}).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.status == "ok"), "{rows:?}");
    let mut buf = Vec::new();
    write_ablation_csv(&mut buf, &spec.axes, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("blocks,"));
    assert!(lines[0].contains("ccc_mean"));
}
