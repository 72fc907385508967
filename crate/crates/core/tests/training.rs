use dsf_core::config::{AugmentationSpec, DatasetSpec, ExperimentConfig, Method, NegativeMode};
use dsf_core::eval::{knn_eval, EmbeddingTable, Split};
use dsf_core::scalar::dot;
use dsf_core::train::{self, generate_dataset, make_views, NegativeQueue, TrainState, Trainer};
use dsf_core::DsfError;

fn small_config(method: Method, m: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.method = method;
    c.dataset.num_points = 600;
    c.augmentation.views_per_group = m;
    c.optimizer.batch_size = 32;
    c.optimizer.epochs = 2;
    c
}

#[test]
fn concentrated_classes_stay_near_their_centres() {
    let spec = DatasetSpec {
        num_classes: 2,
        num_points: 200,
        input_dim: 3,
        class_kappa: 1e5,
        ..DatasetSpec::default()
    };
    // in d_in = 16 the angular spread is chi2(15)/kappa, about 1% of points land past 1 degree
    let d = generate_dataset(&spec, 4).unwrap();
    let cos_1deg = 1f64.to_radians().cos();
    for i in 0..d.len() {
        let c = d.centers[d.labels[i]].as_slice();
        assert!(dot(c, d.point(i)) > cos_1deg);
    }
}

#[test]
fn dataset_is_deterministic_and_separated() {
    let spec = DatasetSpec::default();
    let a = generate_dataset(&spec, 11).unwrap();
    let b = generate_dataset(&spec, 11).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_ne!(a.points, generate_dataset(&spec, 12).unwrap().points);
    let min_cos = spec.min_separation_deg.to_radians().cos();
    for i in 0..a.centers.len() {
        for j in 0..i {
            assert!(a.centers[i].dot(&a.centers[j]).unwrap() <= min_cos);
        }
    }
    let mut counts = vec![0; spec.num_classes];
    a.labels.iter().for_each(|&l| counts[l] += 1);
    assert!(counts.iter().all(|&c| c == 500));
}

#[test]
fn raw_points_are_knn_separable() {
    // calibration of the default benchmark: raw inputs with true labels
    let d = generate_dataset(&DatasetSpec::default(), 0).unwrap();
    let tr = EmbeddingTable::new(
        d.dim,
        d.train_points().to_vec(),
        d.train_labels().to_vec(),
        Split::Train,
    )
    .unwrap();
    let te = EmbeddingTable::new(
        d.dim,
        d.test_points().to_vec(),
        d.test_labels().to_vec(),
        Split::Test,
    )
    .unwrap();
    let acc = knn_eval(&tr, &te, 200).unwrap();
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn infeasible_separation_is_reported() {
    let spec = DatasetSpec {
        num_classes: 10,
        input_dim: 2,
        min_separation_deg: 60.0,
        ..DatasetSpec::default()
    };
    assert!(matches!(
        generate_dataset(&spec, 0),
        Err(DsfError::Infeasible(_))
    ));
}

#[test]
fn views_without_noise_equal_the_input() {
    let x = vec![0.6, 0.0, -0.8];
    let spec = AugmentationSpec {
        noise_kappa: None,
        views_per_group: 3,
        dropout_prob: 0.0,
    };
    let views = make_views(&x, &spec, 5).unwrap();
    assert_eq!(views.len(), 6);
    assert!(views.iter().all(|v| v == &x));
    let two = make_views(
        &x,
        &AugmentationSpec {
            views_per_group: 1,
            ..AugmentationSpec::default()
        },
        5,
    )
    .unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(
        two,
        make_views(
            &x,
            &AugmentationSpec {
                views_per_group: 1,
                ..AugmentationSpec::default()
            },
            5
        )
        .unwrap()
    );
}

#[test]
fn views_of_one_input_agree_more_than_views_of_different_inputs() {
    let d = generate_dataset(&DatasetSpec::default(), 1).unwrap();
    let spec = AugmentationSpec::default();
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
    let (mut same, mut diff) = (0.0, 0.0);
    let n = 1000;
    for t in 0..n {
        let i = t % d.len();
        let j = (t * 7 + 13) % d.len();
        let vi = make_views(d.point(i), &spec, t as u64).unwrap();
        let vj = make_views(d.point(j), &spec, (t + n) as u64).unwrap();
        same += cos(&vi[0], &vi[1]);
        diff += cos(&vi[0], &vj[0]);
    }
    assert!(same / n as f64 > diff / n as f64 + 0.1, "{same} vs {diff}");
}

#[test]
fn zero_learning_rate_freezes_the_encoder() {
    let mut cfg = small_config(Method::Dsf, 2);
    cfg.optimizer.learning_rate = 0.0;
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    let initial = t.state().encoder.clone();
    let reference = t.probe(0).unwrap().loss;
    for _ in 0..10 {
        t.step().unwrap();
        assert!((t.probe(0).unwrap().loss - reference).abs() < 1e-12);
    }
    assert_eq!(t.state().encoder, initial);
}

#[test]
fn identical_config_gives_identical_metrics() {
    for method in [Method::Dsf, Method::LossAvg, Method::FeaAvg] {
        let cfg = small_config(method, 2);
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (sa, a) = train::train(&cfg, &data).unwrap();
        let (sb, b) = train::train(&cfg, &data).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_values(y)));
    }
}

#[test]
fn checkpoint_resume_is_bitwise() {
    let mut cfg = small_config(Method::Dsf, 2);
    cfg.loss.negatives = NegativeMode::Queue;
    cfg.loss.queue_capacity = 100;
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let mut straight = Trainer::new(&cfg, &data).unwrap();
    let mut interrupted = Trainer::new(&cfg, &data).unwrap();
    for _ in 0..7 {
        straight.step().unwrap();
        interrupted.step().unwrap();
    }
    let saved = interrupted.into_state().to_json();
    let mut resumed = Trainer::resume(&cfg, &data, TrainState::from_json(&saved).unwrap()).unwrap();
    for _ in 0..5 {
        let a = straight.step().unwrap();
        let b = resumed.step().unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert!(a.same_values(&b));
    }
    let mut other = cfg.clone();
    other.seed = 99;
    assert!(Trainer::resume(&other, &data, TrainState::from_json(&saved).unwrap()).is_err());
}

#[test]
fn queue_holds_min_of_pushed_and_capacity() {
    for method in [Method::Dsf, Method::LossAvg] {
        let mut cfg = small_config(method, 2);
        cfg.loss.negatives = NegativeMode::Queue;
        cfg.loss.queue_capacity = 100;
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let mut t = Trainer::new(&cfg, &data).unwrap();
        for step in 1..=6u64 {
            let rec = t.step().unwrap();
            // the first step falls back to in-batch negatives
            if step == 1 {
                assert_eq!(rec.negatives, 31);
            } else {
                assert_eq!(rec.negatives, (((step - 1) * 32) as usize).min(100));
            }
            assert_eq!(t.state().queue.len(), ((step * 32) as usize).min(100));
        }
        let kind_ok = matches!(
            (&t.state().queue, method),
            (NegativeQueue::Distributions(_), Method::Dsf)
                | (NegativeQueue::Keys(_), Method::LossAvg)
        );
        assert!(kind_ok);
    }
}

#[test]
fn queue_evicts_oldest_first() {
    let mut cfg = small_config(Method::FeaAvg, 2);
    cfg.loss.negatives = NegativeMode::Queue;
    cfg.loss.queue_capacity = 40;
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.step().unwrap();
    let NegativeQueue::Keys(q) = &t.state().queue else {
        panic!()
    };
    let first: Vec<Vec<f64>> = q.iter().cloned().collect();
    t.step().unwrap();
    let NegativeQueue::Keys(q) = &t.state().queue else {
        panic!()
    };
    let now: Vec<Vec<f64>> = q.iter().cloned().collect();
    assert_eq!(now.len(), 40);
    // 32 + 32 pushed, 24 oldest gone: the survivors of the first batch lead
    assert_eq!(&now[..8], &first[24..]);
}

#[test]
fn logged_kappa_respects_the_stabilization_ceiling() {
    let cfg = small_config(Method::Dsf, 4);
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let (_, recs) = train::train(&cfg, &data).unwrap();
    let ceiling = cfg.loss.stabilization.kappa_ceiling(cfg.encoder.output_dim);
    for r in &recs {
        assert!(r.max_kappa.unwrap() <= ceiling);
        assert!(r.mean_kappa.unwrap() <= r.max_kappa.unwrap());
    }
}

#[test]
fn dsf_margin_grows_past_the_cosine_bound() {
    let cfg = ExperimentConfig::default();
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let (_, recs) = train::train(&cfg, &data).unwrap();
    let epochs = cfg.optimizer.epochs as u64;
    let epoch_margin = |e: u64| {
        let v: Vec<f64> = recs
            .iter()
            .filter(|r| r.epoch == e)
            .map(|r| r.margin)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let first = epoch_margin(0);
    let last = epoch_margin(epochs - 1);
    let bound = 2.0 / cfg.temperature();
    assert!(last > first, "{first} -> {last}");
    assert!(last > bound, "final margin {last} vs cosine bound {bound}");
}

#[test]
fn divergence_guard_reports_the_step() {
    let mut cfg = small_config(Method::LossAvg, 2);
    cfg.optimizer.learning_rate = 1e200;
    cfg.optimizer.momentum = 0.0;
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    match train::train(&cfg, &data) {
        Err(e @ DsfError::Diverged { .. }) => assert!(e.is_numerical()),
        other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r.len())),
    }
}
