mod common;

use common::tiny_model;
use percdf::config::RunConfig;
use percdf::copula::{ForecastSamples, SampleOptions};
use percdf::data::{forecast_beyond, load_csv, make_forecast_task, random_walk, CsvSchema, WindowTask};
use percdf::guard::GuardConfig;
use percdf::model::Model;
use percdf::training::{train, Checkpoint, RngState, TrainConfig, TrainState};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn csv_round_trip(n in 1usize..5, t in 1usize..30, seed in 0u64..1000, miss in 0.0f64..0.5) {
        let f = random_walk(n, t, seed, miss).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        f.write_csv(&p).unwrap();
        let g = load_csv(&p, &CsvSchema::default()).unwrap();
        prop_assert_eq!(g.n_variables, n);
        prop_assert_eq!(g.n_steps, t);
        for (a, b) in f.points.iter().zip(&g.points) {
            prop_assert_eq!(a.mask, b.mask);
            if a.mask {
                prop_assert_eq!(a.value, b.value);
            }
        }
    }
}

#[test]
fn datetime_axis_and_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(
        &p,
        "series_id,timestamp,value\na,2020-01-01 00:00:00,1\na,2020-01-01 02:00:00,3\nb,2020-01-01 01:00:00,\n",
    )
    .unwrap();
    let f = load_csv(&p, &CsvSchema::default()).unwrap();
    assert_eq!((f.n_variables, f.n_steps), (2, 3));
    assert_eq!(f.observed_count(), 2);
    assert_eq!(f.axis.label(1), "2020-01-01 01:00:00");
}

#[test]
fn malformed_rows_are_reported_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "series_id,timestamp,value\na,0,1\na,1,oops\n").unwrap();
    let e = load_csv(&p, &CsvSchema::default()).unwrap_err().to_string();
    assert!(e.contains("row 3"), "{e}");
    std::fs::write(&p, "series_id,timestamp,value\na,0,1\na,0,2\n").unwrap();
    assert!(load_csv(&p, &CsvSchema::default()).unwrap_err().to_string().contains("duplicate"));
}

#[test]
fn forecast_tasks_mask_the_horizon() {
    let f = random_walk(2, 20, 0, 0.0).unwrap();
    let w = WindowTask::new(8, 4).unwrap();
    let t = make_forecast_task(&f, &w).unwrap();
    assert_eq!(t.n_steps, 12);
    assert!(t.points.iter().all(|p| p.mask == (p.timestamp < 8)));
    let b = forecast_beyond(&f, &w).unwrap();
    assert_eq!(b.n_steps, 12);
    assert_eq!(b.missing_ids().len(), 8);
    assert!(make_forecast_task(&f, &WindowTask::new(18, 4).unwrap()).is_err());
}

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::table3();
    let m = tiny_model(6);
    cfg.embed = m.embed;
    if let percdf::model::EncoderConfig::Perceiver(p) = m.encoder {
        cfg.perceiver = p;
    }
    cfg.flow = m.flow;
    cfg.copula = m.copula;
    cfg.observed_steps = 6;
    cfg.predict_steps = 3;
    cfg.train.batches_per_epoch = 2;
    cfg.train.batch_size = 3;
    cfg
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = tiny_run_config();
    let series = random_walk(2, 30, 1, 0.0).unwrap();
    let window = WindowTask::new(6, 3).unwrap();
    let run = |epochs: usize, from: Option<&Checkpoint>| {
        let (m, mut store) = Model::new(&cfg.model(), 2, cfg.seed).unwrap();
        let mut st = match from {
            Some(ck) => {
                ck.restore_into(&mut store).unwrap();
                TrainState {
                    store,
                    optimizer: ck.optimizer.clone(),
                    epoch: ck.epoch,
                    rng: ck.rng.restore(),
                }
            }
            None => TrainState::new(store, cfg.seed),
        };
        let tc = TrainConfig {
            epochs,
            ..cfg.train_config()
        };
        train(&m, &mut st, &series, &window, &tc, |_, _| {}).unwrap();
        Checkpoint {
            config: cfg.to_text(),
            n_variables: 2,
            epoch: st.epoch,
            rng: RngState::capture(&st.rng),
            params: st.store,
            optimizer: st.optimizer,
        }
    };
    let a = run(1, None);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    a.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, a);
    assert_eq!(RunConfig::parse(&back.config).unwrap(), RunConfig { preset: None, ..cfg.clone() });
    assert_eq!(run(1, Some(&back)).to_bytes(), run(2, None).to_bytes());

    // truncated and foreign files fail cleanly
    let bytes = a.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    let mut other = Model::new(&RunConfig::table3().model(), 2, 0).unwrap().1;
    assert!(a.restore_into(&mut other).is_err());
}

#[test]
fn samples_csv_round_trip() {
    let (m, store) = Model::new(&tiny_model(6), 2, 0).unwrap();
    let series = random_walk(2, 12, 2, 0.0).unwrap();
    let task = make_forecast_task(&series, &WindowTask::new(8, 4).unwrap()).unwrap();
    let plan = m.plan(&task, 0).unwrap();
    let out = m.sample(&store, &task, &plan, &SampleOptions::new(7, 3, GuardConfig::default())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    out.samples.write_csv(&p).unwrap();
    let back = ForecastSamples::read_csv(&p).unwrap();
    assert_eq!(back.n_draws(), 7);
    assert_eq!(back.n_points(), 8);
    for d in 0..7 {
        for k in 0..8 {
            let j = (0..8)
                .find(|&j| back.variables[j] == out.samples.variables[k] && back.timestamps[j] == out.samples.timestamps[k])
                .unwrap();
            assert_eq!(back.values[d][j], out.samples.values[d][k]);
        }
    }
}

#[test]
fn config_reports_every_bad_line() {
    let e = RunConfig::parse("preset = table4\ncopula.heads = x\nnope = 1\ntrain.epochs = 3\n")
        .unwrap_err()
        .to_string();
    assert!(e.contains("line 2") && e.contains("line 3"), "{e}");
    let c = RunConfig::parse("preset = table4\ntrain.epochs = 3\n").unwrap();
    assert_eq!(c.train.epochs, 3);
    assert_eq!(c.copula, RunConfig::table4().copula);
}
