use outlier_gradient::data::{self, gen_half_moons, gen_linear_blobs, gen_linear_blobs_with, inject_label_noise, BlobGeometry, NoiseSpec, MOONS_JITTER};
use outlier_gradient::harness::{self, Budget, DatasetSource, ModelChoice, PipelineConfig, Seeds, TrainParams};
use outlier_gradient::influence::{self, EvalSet, InfluenceMethod};
use outlier_gradient::model::{self, LayerSelector, ModelSpec, TrainConfig};
use outlier_gradient::outlier::{self, Method};

fn quick_moons(seed: u64) -> PipelineConfig {
    PipelineConfig {
        train: Some(TrainParams {
            lr: 0.05,
            epochs: 150,
            batch_size: Some(32),
        }),
        budget: Budget::Count(20),
        seed,
        ..Default::default()
    }
}

fn blobs(method: Method) -> PipelineConfig {
    PipelineConfig {
        dataset: DatasetSource::Blobs {
            n_train: 150,
            n_test: 100,
            flips_per_class: 5,
            n_validation: 50,
        },
        model: ModelChoice::LogReg,
        method,
        budget: Budget::Count(10),
        ..Default::default()
    }
}

#[test]
fn zero_budget_with_shared_seed_is_a_no_op() {
    let mut cfg = quick_moons(3);
    cfg.budget = Budget::Count(0);
    cfg.seeds = Seeds {
        train: Some(11),
        retrain: Some(11),
        ..Default::default()
    };
    let r = harness::run_pipeline(&cfg).unwrap();
    assert!(r.flagged.is_empty());
    assert_eq!(r.n_retrained, r.n_train);
    assert_eq!(r.utility.test_accuracy_before, r.utility.test_accuracy_after);
    assert_eq!(r.utility.test_loss_before, r.utility.test_loss_after);
}

#[test]
fn survivors_reconcile_with_flagged() {
    let r = harness::run_pipeline(&quick_moons(1)).unwrap();
    assert_eq!(r.flagged.len(), 20);
    assert_eq!(r.n_retrained, 230);
    assert_eq!(r.survivors.len(), 230);
    let mut all: Vec<usize> = r.flagged.iter().chain(&r.survivors).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..250).collect::<Vec<_>>());
    let d = r.detection.unwrap();
    for m in [d.accuracy, d.precision, d.recall, r.utility.test_accuracy_before, r.utility.test_accuracy_after] {
        assert!((0.0..=1.0).contains(&m));
    }
    assert!(r.config.train.is_some() && r.config.seeds.retrain.is_some());
}

#[test]
fn report_is_written_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_moons(5);
    cfg.method = Method::L1;
    cfg.out = Some(dir.path().join("a.json"));
    let a = harness::run_pipeline(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("a.json")).unwrap();
    let back: harness::EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, a);
    let b = harness::run_pipeline(&cfg).unwrap();
    assert_eq!(a.masked().to_json().unwrap(), b.masked().to_json().unwrap());
}

#[test]
fn trimming_everything_fails_in_the_retrain_stage() {
    let mut cfg = blobs(Method::L2);
    cfg.budget = Budget::Count(150);
    let err = harness::run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("retrain"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn compare_deduplicates_and_shares_the_model() {
    let cfg = blobs(Method::Exact);
    let methods = [Method::Iforest, Method::L1, Method::L2, Method::Exact, Method::Trace, Method::L1];
    let reports = harness::compare_methods(&cfg, &methods).unwrap();
    let got: Vec<Method> = reports.iter().map(|r| r.method).collect();
    assert_eq!(got, &methods[..5]);
    let before = reports[0].utility.test_accuracy_before;
    assert!(reports.iter().all(|r| r.utility.test_accuracy_before == before));
    assert!(harness::compare_methods(&cfg, &[]).is_err());
}

#[test]
fn sweeps_emit_one_row_per_setting() {
    let cfg = blobs(Method::Iforest);
    let rows = harness::sweep_budget(&cfg, &[0.025, 0.05, 0.075, 0.1, 0.125]).unwrap();
    let ks: Vec<usize> = rows.iter().map(|r| r.budget_k).collect();
    assert_eq!(ks, vec![4, 8, 11, 15, 19]);
    assert_eq!(harness::sweep_budget(&cfg, &[0.05]).unwrap().len(), 1);
    assert!(harness::sweep_budget(&cfg, &[1.2]).is_err());

    let trees = harness::sweep_trees(&cfg, &[1, 25, 50, 100, 200]).unwrap();
    assert_eq!(trees.len(), 5);
    assert_eq!(trees[0].config.iforest.n_trees, 1);
    let acc: Vec<f64> = trees[1..].iter().map(|r| r.utility.test_accuracy_after).collect();
    let spread = acc.iter().cloned().fold(f64::MIN, f64::max) - acc.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.03, "post-trim spread {spread}");
    assert!(harness::sweep_trees(&cfg, &[0]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let table: Vec<harness::TableRow> = trees.iter().map(Into::into).collect();
    harness::write_table(&table, dir.path().join("t.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("method,budget_fraction,budget_k,n_trees"));
}

#[test]
fn tree_sweep_is_stable_on_moons() {
    let rows = harness::sweep_trees(&quick_moons(2), &[25, 50, 100, 200]).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.utility.test_accuracy_after).collect();
    let spread = acc.iter().cloned().fold(f64::MIN, f64::max) - acc.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.03, "{acc:?}");
}

#[test]
fn bench_timing_rows() {
    let mut cfg = quick_moons(0);
    cfg.method = Method::L1;
    let rows = harness::bench_timing(&cfg, &[200]).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ratio.is_none() && rows[0].score_seconds > 0.0);
    let csv_cfg = PipelineConfig {
        dataset: DatasetSource::Csv {
            train: "x.csv".into(),
            test: "y.csv".into(),
            validation: None,
        },
        ..cfg
    };
    assert!(harness::bench_timing(&csv_cfg, &[200]).is_err());
}

#[test]
fn l1_scoring_is_faster_than_iforest() {
    let mut cfg = quick_moons(0);
    cfg.method = Method::L1;
    let l1 = harness::bench_timing(&cfg, &[500]).unwrap()[0].score_seconds;
    cfg.method = Method::Iforest;
    let forest = harness::bench_timing(&cfg, &[500]).unwrap()[0].score_seconds;
    assert!(l1 < forest, "l1 {l1} vs iforest {forest}");
}

#[test]
fn trace_signs_mostly_match_exact_on_blobs() {
    let mut cfg = blobs(Method::Exact);
    cfg.eval_set = EvalSet::External;
    let p = harness::prepare(&cfg).unwrap();
    let g = p.gradients().unwrap();
    let exact = p.influence(InfluenceMethod::Exact, &g).unwrap();
    let trace = p.influence(InfluenceMethod::Trace, &g).unwrap();
    let agree = exact.discrete.iter().zip(&trace.discrete).filter(|(a, b)| a == b).count();
    assert!(agree as f64 >= 0.8 * 150.0, "{agree}/150");
    assert_eq!(exact.eval_set, EvalSet::External);
}

#[test]
fn self_influence_is_larger_on_flipped_moons() {
    let (clean, _) = gen_half_moons(250, 2, MOONS_JITTER, 4).unwrap();
    let train = inject_label_noise(&clean, NoiseSpec { flips_per_class: 10, seed: 9 }).unwrap();
    let spec = ModelSpec::LogReg { d: 2, classes: 2 };
    let m = model::train(&train, spec, TrainConfig::logreg_default(2)).unwrap();
    let g = model::per_sample_gradients(&m, &train, LayerSelector::All).unwrap();
    let h = model::hessian(&m, &train, LayerSelector::All, 0.01).unwrap();
    let r = influence::self_influence_exact(&g, &h).unwrap();
    assert!(r.scores.iter().all(|&s| s <= 0.0));
    let mask = train.noise_mask.unwrap();
    let mean = |flipped: bool| {
        let v: Vec<f64> = (0..250).filter(|&i| mask[i] == flipped).map(|i| r.scores[i].abs()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > mean(false));
}

#[test]
fn semi_inlier_ranks_flips_above_median_with_shifted_validation() {
    let (clean, _) = gen_linear_blobs(150, 2, 8).unwrap();
    let train = inject_label_noise(&clean, NoiseSpec { flips_per_class: 5, seed: 3 }).unwrap();
    let shifted = BlobGeometry {
        center_offset: 2.4,
        ..Default::default()
    };
    let (validation, _) = gen_linear_blobs_with(60, 2, shifted, 21).unwrap();
    let spec = ModelSpec::LogReg { d: 2, classes: 2 };
    let m = model::train(&train, spec, TrainConfig::logreg_default(0)).unwrap();
    let g = model::per_sample_gradients(&m, &train, LayerSelector::All).unwrap();
    let g_val = model::per_sample_gradients(&m, &validation, LayerSelector::All).unwrap();
    let s = outlier::semi_inlier_scores(&g, &g_val, 5).unwrap();
    let mut sorted = s.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[75];
    let mask = train.noise_mask.unwrap();
    assert!((0..150).filter(|&i| mask[i]).all(|i| s[i] > median));
}

#[test]
fn semi_inlier_pipeline_needs_validation() {
    let mut cfg = blobs(Method::SemiInlier);
    let r = harness::run_pipeline(&cfg).unwrap();
    assert_eq!(r.flagged.len(), 10);
    cfg.dataset = DatasetSource::Blobs {
        n_train: 150,
        n_test: 100,
        flips_per_class: 5,
        n_validation: 0,
    };
    assert!(harness::run_pipeline(&cfg).is_err());
}

#[test]
fn lissa_and_self_methods_run_through_the_pipeline() {
    for method in [Method::Lissa, Method::SelfExact, Method::SelfLissa] {
        let mut cfg = blobs(method);
        cfg.lissa.depth = 500;
        let r = harness::run_pipeline(&cfg).unwrap();
        assert_eq!(r.flagged.len(), 10, "{method}");
    }
}

#[test]
fn mlp_influence_uses_the_head_block_only() {
    let mut cfg = quick_moons(0);
    cfg.method = Method::Exact;
    assert!(harness::run_pipeline(&cfg).is_ok());
    cfg.layer = LayerSelector::All;
    let err = harness::run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("score"), "{err}");
}

#[test]
fn wide_gradients_are_projected_before_the_forest() {
    let mut cfg = quick_moons(0);
    cfg.model = ModelChoice::Mlp { h1: 80, h2: 60 };
    cfg.layer = LayerSelector::All;
    cfg.projection.threshold = 1000;
    cfg.projection.target = outlier_gradient::outlier::ProjectionTarget::Dim(256);
    cfg.train = Some(TrainParams {
        lr: 0.05,
        epochs: 5,
        batch_size: Some(32),
    });
    let r = harness::run_pipeline(&cfg).unwrap();
    let info = r.projection.expect("projection ran");
    assert!(info.applied && info.input_dim > 1000 && info.output_dim == 256);
}

#[test]
fn moons_need_a_nonlinear_model() {
    let (train, test) = gen_half_moons(250, 100, MOONS_JITTER, 6).unwrap();
    let lin = model::train(&train, ModelSpec::LogReg { d: 2, classes: 2 }, TrainConfig::logreg_default(0)).unwrap();
    let spec = PipelineConfig::default().model.spec(2, 2);
    let params = PipelineConfig::default().model.default_training();
    let mlp = model::train(&train, spec, params.with_seed(0)).unwrap();
    assert!(lin.accuracy(&test) < 0.95, "linear {}", lin.accuracy(&test));
    assert!(mlp.accuracy(&test) >= 0.95, "mlp {}", mlp.accuracy(&test));
}

#[test]
fn loo_duplicate_clean_sample_matters_less_than_a_flip() {
    let (clean, test) = gen_linear_blobs(30, 100, 5).unwrap();
    let noisy = inject_label_noise(&clean, NoiseSpec { flips_per_class: 1, seed: 2 }).unwrap();
    let mask = noisy.noise_mask.clone().unwrap();
    let flipped = (0..30).find(|&i| mask[i]).unwrap();
    let keeper = (0..30).find(|&i| !mask[i]).unwrap();
    let mut idx: Vec<usize> = (0..30).collect();
    idx.push(keeper);
    let with_dup = noisy.select(&idx);
    let spec = ModelSpec::LogReg { d: 2, classes: 2 };
    let cfg = TrainConfig::logreg_default(0);
    let dup = influence::loo_oracle(&with_dup, &test, spec, cfg, 30).unwrap();
    let flip = influence::loo_oracle(&with_dup, &test, spec, cfg, flipped).unwrap();
    assert!(dup.abs() < flip.abs(), "duplicate {dup} vs flip {flip}");
}

#[test]
fn csv_source_round_trips_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs(Method::L2);
    let p = harness::prepare(&cfg).unwrap();
    data::write_csv(&p.splits.train, dir.path().join("train.csv")).unwrap();
    data::write_csv(&p.splits.test, dir.path().join("test.csv")).unwrap();
    let from_csv = PipelineConfig {
        dataset: DatasetSource::Csv {
            train: dir.path().join("train.csv"),
            test: dir.path().join("test.csv"),
            validation: None,
        },
        ..cfg.clone()
    };
    let a = harness::run_pipeline(&cfg).unwrap();
    let b = harness::run_pipeline(&from_csv).unwrap();
    assert_eq!(a.flagged, b.flagged);
    assert_eq!(a.detection, b.detection);
}
