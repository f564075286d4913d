//! Library-level flows across modules: CSV in, train, save, reload, forecast.

use fincast_core::config::{ModelConfig, RunConfig};
use fincast_core::data::clean::clean;
use fincast_core::data::eval::{evaluate, EvalOptions};
use fincast_core::data::ingest::ingest_reader;
use fincast_core::error::{FincastError, WeightFileError};
use fincast_core::inference::forecast;
use fincast_core::trainer::{Trainer, TrainingSet};
use fincast_core::weights::{load_weights, round_to_f32, save_weights};

fn tiny() -> RunConfig {
    let mut run = RunConfig::default();
    run.model = ModelConfig {
        patch_len: 8,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        n_experts: 4,
        top_k: 2,
        expert_hidden: 16,
        input_hidden: 16,
        output_hidden: 16,
        h_out: 8,
        quantiles: vec![0.1, 0.5, 0.9],
        max_context: 64,
        ..ModelConfig::default()
    };
    run.train.context_len = 32;
    run.train.batch_size = 4;
    run.train.total_steps = 20;
    run.train.lr_peak = 3e-3;
    run
}

fn csv() -> String {
    let mut s = String::from("date,close,volume\n");
    for t in 0..400 {
        let close = 100.0 + 5.0 * (t as f64 * 0.11).sin();
        // one bad cell and one absurd spike
        let close = match t {
            50 => "nan".to_string(),
            200 => "1e9".to_string(),
            _ => close.to_string(),
        };
        s.push_str(&format!(
            "{},{close},{}\n",
            1_600_000_000 + t * 86_400,
            1000 + t % 7
        ));
    }
    s
}

#[test]
fn csv_to_forecast_through_weight_file() {
    let ing = ingest_reader(csv().as_bytes(), 3).unwrap();
    assert_eq!(ing.series.len(), 2);
    let cleaned = clean(&ing.series[0], 40);
    assert_eq!(cleaned.report.dropped_non_finite, 1);
    assert_eq!(cleaned.report.clipped, vec![199]);
    let close = cleaned.into_series().unwrap().unwrap();
    assert!(close.values.iter().all(|&x| x.is_finite() && x < 200.0));

    let run = tiny();
    let mut t = Trainer::from_run_config(&run).unwrap();
    let data = TrainingSet::new(vec![close.clone()], 32, 8).unwrap();
    t.train(&data).unwrap();
    assert_eq!(t.log.len(), 20);
    assert!(t.log.iter().all(|r| r.loss.total.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.w");
    save_weights(&t.model, &path).unwrap();
    let loaded = load_weights(&path, Some(t.model.config())).unwrap();
    let mut rounded = t.model.clone();
    round_to_f32(&mut rounded);
    let ctx = &close.values[close.len() - 48..];
    let a = forecast(&rounded, ctx, 3, 20).unwrap();
    let b = forecast(&loaded, ctx, 3, 20).unwrap();
    assert_eq!(a, b);

    let mut other = t.model.config().clone();
    other.d_model = 8;
    other.input_hidden = 8;
    other.output_hidden = 8;
    match load_weights(&path, Some(&other)) {
        Err(FincastError::Weights(WeightFileError::DigestMismatch { .. })) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched config accepted"),
    }
}

#[test]
fn evaluation_of_trained_model_is_finite() {
    let ing = ingest_reader(csv().as_bytes(), 3).unwrap();
    let series: Vec<_> = ing
        .series
        .iter()
        .filter_map(|r| clean(r, 40).into_series().unwrap())
        .collect();
    let run = tiny();
    let mut t = Trainer::from_run_config(&run).unwrap();
    t.train(&TrainingSet::new(series.clone(), 32, 8).unwrap())
        .unwrap();
    let opts = EvalOptions {
        context_len: 32,
        horizons: vec![8, 20],
        stride: 16,
        baselines: true,
    };
    let rep = evaluate(&t.model, &[("desk".into(), series)], &opts).unwrap();
    assert_eq!(rep.rows.len(), 6);
    assert!(rep.is_finite());
    assert!(rep.find("desk", 20, "fincast").unwrap().pinball.is_some());
    assert!(rep
        .find("desk", 20, "naive_last")
        .unwrap()
        .pinball
        .is_none());
}
