use xmodal_core::nn::Parameters;
use xmodal_core::synthdata::{generate_dataset, SceneConfig, SceneSample};
use xmodal_core::train::{
    median, one_cycle_lr, orthogonality_norms, pretrain, write_metrics_csv, Checkpoint, Model, TermFlags, TrainConfig, TrainError,
};

fn scenes(n: usize) -> Vec<SceneSample> {
    generate_dataset(&SceneConfig::default(), n, 31).unwrap()
}

fn small(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { seed, epochs, ..TrainConfig::default() }
}

#[test]
fn null_objective_leaves_parameters_untouched() {
    let data = scenes(4);
    let cfg = TrainConfig { terms: TermFlags::NONE, ..small(1, 1) };
    let out = pretrain(&cfg, &data).unwrap();
    assert_eq!(out.model.snapshot(), Model::new(&cfg).snapshot());
    assert!(out.codebook.is_none());
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let data = scenes(5);
    let cfg = small(4, 2);
    let a = pretrain(&cfg, &data).unwrap().checkpoint.to_json().unwrap();
    let b = pretrain(&cfg, &data).unwrap().checkpoint.to_json().unwrap();
    assert_eq!(a, b);
    let other = pretrain(&small(5, 2), &data).unwrap().checkpoint.to_json().unwrap();
    assert_ne!(a, other);
}

#[test]
fn checkpoint_round_trips() {
    let data = scenes(3);
    let out = pretrain(&small(2, 1), &data).unwrap();
    let bytes = out.checkpoint.to_json().unwrap();
    let back = Checkpoint::from_json(&bytes).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.model().unwrap().snapshot(), out.model.snapshot());
    let tampered = String::from_utf8(bytes).unwrap().replacen("\"schema_version\": \"1\"", "\"schema_version\": \"9\"", 1);
    assert!(matches!(Checkpoint::from_json(tampered.as_bytes()), Err(TrainError::Version { .. })));
}

#[test]
fn metrics_steps_are_gap_free() {
    let data = scenes(6);
    let out = pretrain(&TrainConfig { batch_size: 4, ..small(3, 3) }, &data).unwrap();
    // Two batches per epoch.
    assert_eq!(out.metrics.len(), 6);
    for (i, row) in out.metrics.iter().enumerate() {
        assert_eq!(row.step, i as u64);
        assert!(row.total.is_finite() && row.lr > 0.0);
    }
    let mut csv = Vec::new();
    write_metrics_csv(&out.metrics, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,epoch,lr,nce,commit,rec,occ,orth,kl,total,joint_usage,perplexity\n"));
    assert_eq!(text.lines().count(), 7);
}

fn epoch_mean(rows: &[xmodal_core::train::MetricsRow], epoch: usize) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn total_loss_falls_over_training_median_of_five_seeds() {
    let data = scenes(8);
    let drops: Vec<f64> = (0..5)
        .map(|seed| {
            let out = pretrain(&small(seed, 6), &data).unwrap();
            epoch_mean(&out.metrics, 0) - epoch_mean(&out.metrics, 5)
        })
        .collect();
    assert!(median(&drops) > 0.0, "{drops:?}");
}

#[test]
fn orthogonal_term_reduces_feature_overlap() {
    let data = scenes(8);
    let held = generate_dataset(&SceneConfig::default(), 4, 77).unwrap();
    let (mut on_img, mut off_img, mut on_pts, mut off_pts) = (vec![], vec![], vec![], vec![]);
    for seed in 0..5 {
        let on = small(seed, 6);
        let off = TrainConfig { terms: TermFlags { orth: false, ..on.terms }, ..on.clone() };
        let a = orthogonality_norms(&pretrain(&on, &data).unwrap().model, &on, &held).unwrap();
        let b = orthogonality_norms(&pretrain(&off, &data).unwrap().model, &off, &held).unwrap();
        on_img.push(a.image);
        on_pts.push(a.points);
        off_img.push(b.image);
        off_pts.push(b.points);
    }
    assert!(median(&on_img) < median(&off_img), "{on_img:?} vs {off_img:?}");
    assert!(median(&on_pts) < median(&off_pts), "{on_pts:?} vs {off_pts:?}");
}

#[test]
fn schedule_endpoints() {
    assert!((one_cycle_lr(0, 100, 1e-3) - 1e-3 / 25.0).abs() < 1e-15);
    assert_eq!(one_cycle_lr(30, 100, 1e-3), 1e-3);
    assert!((one_cycle_lr(100, 100, 1e-3) - 1e-7).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = scenes(1);
    assert!(pretrain(&TrainConfig { epochs: 0, ..TrainConfig::default() }, &data).is_err());
    assert!(pretrain(&TrainConfig { mask_ratio: 1.0, ..TrainConfig::default() }, &data).is_err());
    assert!(pretrain(&TrainConfig::default(), &[]).is_err());
    assert!(TrainConfig::from_json(br#"{"epochs": 3, "unknown": 1}"#).is_err());
}
