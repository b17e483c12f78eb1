use dml_core::config::{DataConfig, TrainConfig};
use dml_core::eval::EncoderTag;
use dml_core::train::train;
use dml_core::{Error, ModelParams};

#[test]
fn relabeling_does_not_lose_shared_structure() {
    let mut initial = 0.0;
    let mut last = 0.0;
    for seed in 0..5 {
        let (tr, te) = DataConfig::default().load_split(Some(seed)).unwrap();
        let cfg = TrainConfig {
            seed,
            epochs: 20,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &tr, Some(&te)).unwrap();
        initial += out.log.initial_clustering.unwrap().nmi_shared.unwrap();
        let updated = out.log.epochs.iter().rev().find_map(|e| e.relabel.as_ref()).unwrap();
        last += updated.nmi_shared.unwrap();
    }
    assert!(last >= initial, "updated {last} < initial {initial}");
}

#[test]
fn class_loss_moving_average_makes_progress() {
    let (tr, te) = DataConfig::default().load_split(Some(0)).unwrap();
    let out = train(&TrainConfig::default(), &tr, Some(&te)).unwrap();
    let l: Vec<f64> = out.log.epochs.iter().map(|e| e.l_alpha).collect();
    assert!(l.iter().all(|v| v.is_finite()));
    let avg: Vec<f64> = l.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    // Windows covering the first 50 epochs.
    let head = &avg[..41];
    assert!(head[40] < 0.75 * head[0], "{} vs {}", head[40], head[0]);
    let rises = head.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 4, "{rises} rises in the moving average");
}

#[test]
fn checkpoint_resumes_evaluation_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, te) = DataConfig::default().load_split(Some(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &tr, Some(&te)).unwrap();
    let path = dir.path().join("ck.json");
    out.params.save_checkpoint(&path).unwrap();
    let back = ModelParams::load_checkpoint_expecting(&path, &out.params.dims).unwrap();
    let a = out.params.embed(&te.features).unwrap();
    let b = back.embed(&te.features).unwrap();
    assert_eq!(a, b);

    let mut other = out.params.dims.clone();
    other.d_alpha += 1;
    match ModelParams::load_checkpoint_expecting(&path, &other) {
        Err(Error::DimensionMismatch { field, .. }) => assert_eq!(field, "d_alpha"),
        r => panic!("expected a dimension mismatch, got {r:?}"),
    }
}

#[test]
fn baseline_has_no_auxiliary_outputs() {
    let (tr, te) = DataConfig::default().load_split(Some(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    }
    .baseline();
    let out = train(&cfg, &tr, Some(&te)).unwrap();
    assert!(out.log.initial_clustering.is_none());
    let last = out.log.epochs.last().unwrap();
    assert!(last.l_beta.is_none() && last.l_d.is_none());
    let reports = last.test_eval.as_ref().unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].encoder, EncoderTag::Alpha);
}
