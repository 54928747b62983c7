use std::collections::BTreeSet;

use proptest::prelude::*;

use distnet::data::{apply_split, Portion, SplitSpec};
use distnet::diffnet::{backward, forward, init_params, DenseLayer};
use distnet::distributions::{gaussian_log_density, map_estimate, niw_update, weighted_nll, NiwParams};
use distnet::openset::accepting_argmax;
use distnet::trainer::{pr_curve, select_threshold};
use distnet::{
    fit, synth_blobs, Activation, BlobSpec, ClassDistribution, ClassId, CovarianceMode, Dataset, DistributionRegistry,
    Matrix, NetworkParams, NetworkSpec, OpenSetSession, Origin, TrainConfig, TrainableDistributions,
};

fn mode_strategy() -> impl Strategy<Value = CovarianceMode> {
    prop_oneof![
        Just(CovarianceMode::SharedIsometric),
        Just(CovarianceMode::Isometric),
        Just(CovarianceMode::SharedDiagonal),
    ]
}

fn blobs(classes: u32, dim: usize, per_class: usize, seed: u64) -> Dataset {
    let specs: Vec<BlobSpec> = (0..classes)
        .map(|c| BlobSpec {
            label: ClassId(c),
            mean: (0..dim).map(|j| if j == c as usize % dim { 6.0 } else { 0.0 }).collect(),
            sigma: 1.0,
            count: per_class,
        })
        .collect();
    synth_blobs(&specs, dim, seed).unwrap()
}

fn identity(d: usize) -> (NetworkSpec, NetworkParams) {
    let spec = NetworkSpec::new(d, vec![d], Activation::Relu, 0);
    let mut w = Matrix::zeros(d, d);
    for i in 0..d {
        w.set(i, i, 1.0);
    }
    let layer = DenseLayer {
        weights: w,
        bias: vec![0.0; d],
    };
    (spec, NetworkParams::from_layers(vec![layer]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_shapes_match_parameters(
        input in 1usize..6,
        widths in prop::collection::vec(1usize..8, 1..4),
        n in 1usize..6,
        seed in 0u64..1000,
    ) {
        let spec = NetworkSpec::new(input, widths.clone(), Activation::Tanh, seed);
        let params = init_params(&spec).unwrap();
        let x = Matrix::from_vec(n, input, (0..n * input).map(|i| (i as f64).sin()).collect()).unwrap();
        let (z, tape) = forward(&spec, &params, &x).unwrap();
        prop_assert_eq!((z.rows(), z.cols()), (n, *widths.last().unwrap()));
        let grads = backward(&tape, &params, &z).unwrap();
        prop_assert_eq!(grads.layers.len(), params.layers.len());
        for (g, p) in grads.layers.iter().zip(&params.layers) {
            prop_assert_eq!((g.weights.rows(), g.weights.cols()), (p.weights.rows(), p.weights.cols()));
            prop_assert_eq!(g.bias.len(), p.bias.len());
            prop_assert!(g.weights.is_finite());
        }
    }

    #[test]
    fn embedding_gradient_matches_finite_differences(
        mode in mode_strategy(),
        d in 1usize..4,
        z in prop::collection::vec(-2.0f64..2.0, 12),
        lv in prop::collection::vec(-1.0f64..1.0, 8),
        seed in 0u64..100,
    ) {
        let ids = vec![ClassId(0), ClassId(1)];
        let mut dists = TrainableDistributions::init(mode, d, ids, seed);
        for (v, x) in dists.log_variances.iter_mut().zip(&lv) {
            *v = *x;
        }
        let n = 4;
        let emb = Matrix::from_vec(n, d, z[..n * d].to_vec()).unwrap();
        let idx = [0, 0, 1, 1];
        let w = [0.5, 0.5, 0.5, 0.5];
        let out = weighted_nll(&dists, &emb, &idx, &w).unwrap();
        let h = 1e-5;
        for i in 0..n * d {
            let mut up = emb.clone();
            up.as_mut_slice()[i] += h;
            let mut down = emb.clone();
            down.as_mut_slice()[i] -= h;
            let num = (weighted_nll(&dists, &up, &idx, &w).unwrap().loss - weighted_nll(&dists, &down, &idx, &w).unwrap().loss) / (2.0 * h);
            let ana = out.embedding_grads.as_slice()[i];
            prop_assert!((num - ana).abs() <= 1e-7 || (num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()), "{} vs {}", ana, num);
        }
    }

    #[test]
    fn rank1_fold_equals_batch_update(
        kappa0 in 0u32..40,
        d in prop_oneof![Just(1usize), Just(4usize)],
        m0 in prop::collection::vec(-3.0f64..3.0, 4),
        s0 in prop::collection::vec(0.0f64..4.0, 4),
        data in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..25),
    ) {
        let k = kappa0 as f64;
        let (m0, s0): (Vec<f64>, Vec<f64>) = if kappa0 == 0 {
            (vec![0.0; d], vec![0.0; d])
        } else {
            (m0[..d].to_vec(), s0[..d].iter().map(|s| s * (k + 3.0)).collect())
        };
        let rows: Vec<Vec<f64>> = data.iter().map(|r| r[..d].to_vec()).collect();
        let post = niw_update(&NiwParams { kappa: k, nu: k, mean: m0.clone(), scale: s0.clone() }, &Matrix::from_rows(&rows).unwrap()).unwrap();
        let (mu, var) = map_estimate(&post, 1).unwrap();
        let var0 = s0.iter().map(|s| (s / (k + 3.0)).max(1e-6)).collect();
        let origin = if kappa0 == 0 { Origin::Validated } else { Origin::Trained };
        let mut c = ClassDistribution::from_parts(ClassId(0), m0, var0, s0, k, k, None, origin).unwrap();
        for r in &rows {
            c.rank1_update(r).unwrap();
        }
        prop_assert_eq!(c.kappa(), post.kappa);
        prop_assert_eq!(c.nu(), post.nu);
        for j in 0..d {
            prop_assert!((c.mean()[j] - mu[j]).abs() <= 1e-8);
            prop_assert!((c.variance_diag()[j] - var[j]).abs() <= 1e-8);
        }
    }

    #[test]
    fn one_dimensional_density_integrates_to_one(mu in -5.0f64..5.0, var in 0.05f64..4.0) {
        let sd = var.sqrt();
        let (lo, hi, steps) = (mu - 12.0 * sd, mu + 12.0 * sd, 20_000);
        let h = (hi - lo) / steps as f64;
        // trapezoid rule
        let mut total = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * h;
            let wgt = if i == 0 || i == steps { 0.5 } else { 1.0 };
            total += wgt * gaussian_log_density(&[mu], &[var], &[x]).exp();
        }
        prop_assert!((total * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn log_density_decreases_along_rays(
        mean in prop::collection::vec(-3.0f64..3.0, 3),
        var in prop::collection::vec(0.1f64..3.0, 3),
        dir in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        prop_assume!(dir.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let at = |t: f64| -> Vec<f64> { mean.iter().zip(&dir).map(|(m, u)| m + t * u).collect() };
        let mut prev = gaussian_log_density(&mean, &var, &mean);
        for step in 1..20 {
            let cur = gaussian_log_density(&mean, &var, &at(step as f64 * 0.25));
            prop_assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn trainable_variances_follow_the_mode(mode in mode_strategy(), k in 1usize..5, d in 1usize..5, seed in 0u64..100) {
        let mut dists = TrainableDistributions::init(mode, d, (0..k as u32).map(ClassId).collect(), seed);
        for (i, v) in dists.log_variances.iter_mut().enumerate() {
            *v = ((i as f64 + seed as f64) * 0.7).sin();
        }
        let vars: Vec<Vec<f64>> = (0..k).map(|c| dists.variance(c)).collect();
        match mode {
            CovarianceMode::SharedIsometric => {
                prop_assert!(vars.iter().all(|v| v == &vars[0]));
                prop_assert!(vars[0].iter().all(|&x| x == vars[0][0]));
            }
            CovarianceMode::SharedDiagonal => prop_assert!(vars.iter().all(|v| v == &vars[0])),
            CovarianceMode::Isometric => prop_assert!(vars.iter().all(|v| v.iter().all(|&x| x == v[0]))),
        }
    }

    #[test]
    fn argmax_ignores_a_common_shift(
        lls in prop::collection::vec(-20.0f64..0.0, 1..8),
        ts in prop::collection::vec(-20.0f64..0.0, 8),
        shift in -50.0f64..50.0,
    ) {
        let registry = |offset: f64| {
            let classes = lls
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    ClassDistribution::from_parts(ClassId(i as u32), vec![0.0], vec![1.0], vec![13.0], 10.0, 10.0, Some(ts[i] + offset), Origin::Trained).unwrap()
                })
                .collect();
            DistributionRegistry::new(CovarianceMode::SharedDiagonal, 1, classes, vec![]).unwrap()
        };
        let shifted: Vec<f64> = lls.iter().map(|l| l + shift).collect();
        prop_assert_eq!(accepting_argmax(&lls, &registry(0.0)), accepting_argmax(&shifted, &registry(shift)));
    }

    #[test]
    fn selected_threshold_is_optimal_and_recall_monotone(
        raw in prop::collection::vec((0u8..12, any::<bool>()), 2..50),
    ) {
        let mut scores: Vec<(f64, bool)> = raw.iter().map(|&(s, p)| (-(s as f64), p)).collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let curve = pr_curve(&scores).unwrap();
        let best = select_threshold(&curve).unwrap();
        prop_assert!(curve.iter().all(|p| p.f1 <= best.f1));
        for pair in curve.windows(2) {
            prop_assert!(pair[0].threshold < pair[1].threshold);
            prop_assert!(pair[1].recall <= pair[0].recall);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint(seed in 0u64..500, frac in 0.1f64..0.6) {
        let pool = blobs(5, 5, 12, seed);
        let test = blobs(5, 5, 4, seed + 1);
        let spec = SplitSpec {
            known: vec![ClassId(0), ClassId(1), ClassId(2)],
            validation_unknown: vec![ClassId(3)],
            test_unknown: vec![ClassId(4)],
            validation: Portion::Fraction(frac),
            train_size: None,
            test_size: None,
            seed,
        };
        let a = apply_split(&pool, &test, &spec).unwrap();
        prop_assert_eq!(&a, &apply_split(&pool, &test, &spec).unwrap());
        let train_ids: BTreeSet<usize> = a.train.ids.iter().copied().collect();
        let val_ids: BTreeSet<usize> = a.validation.ids.iter().copied().collect();
        prop_assert_eq!(train_ids.len(), a.train.len());
        prop_assert!(train_ids.is_disjoint(&val_ids));
        prop_assert!(a.train.labels.iter().all(|l| l.0 < 3));
        prop_assert!(a.validation.labels.iter().all(|l| l.0 < 4));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Replays every decision from the event log.
    #[test]
    fn stream_decisions_are_sound(
        points in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 2), 1..60),
        threshold in -12.0f64..-3.0,
    ) {
        let classes = vec![
            ClassDistribution::from_parts(ClassId(0), vec![0.0, 0.0], vec![1.0; 2], vec![13.0; 2], 10.0, 10.0, Some(threshold), Origin::Trained).unwrap(),
            ClassDistribution::from_parts(ClassId(1), vec![10.0, 0.0], vec![1.0; 2], vec![13.0; 2], 10.0, 10.0, Some(threshold), Origin::Trained).unwrap(),
            ClassDistribution::from_parts(ClassId(2), vec![0.0, 10.0], vec![2.0; 2], vec![26.0; 2], 10.0, 10.0, Some(threshold - 1.0), Origin::Validated).unwrap(),
        ];
        let registry = DistributionRegistry::new(CovarianceMode::SharedDiagonal, 2, classes, vec![ClassId(2)]).unwrap();
        let (spec, params) = identity(2);
        let mut session = OpenSetSession::from_registry(spec, params, registry).unwrap();
        for (i, z) in points.iter().enumerate() {
            let before = session.registry().clone();
            let p = session.classify_embedding(i, z).unwrap();
            let event = session.events().last().unwrap().clone();
            let after = session.registry();
            prop_assert_eq!(event.log_likelihoods.len(), before.len());
            if p.is_novel_creation {
                for (id, ll) in &event.log_likelihoods {
                    prop_assert!(*ll < before.get(*id).unwrap().log_threshold().unwrap());
                }
                prop_assert!(before.get(p.label).is_none());
                let created = after.get(p.label).unwrap();
                prop_assert_eq!((created.kappa(), created.nu()), (1.0, 1.0));
                let peak: f64 = created.variance_diag().iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
                prop_assert!((created.log_density(z).unwrap() - peak).abs() < 1e-12);
            } else {
                let old = before.get(p.label).unwrap();
                let ll = event.log_likelihoods.iter().find(|(id, _)| *id == p.label).unwrap().1;
                prop_assert!(ll >= old.log_threshold().unwrap());
                let new = after.get(p.label).unwrap();
                prop_assert_eq!(new.kappa(), old.kappa() + 1.0);
                prop_assert_eq!(new.nu(), old.nu() + 1.0);
                prop_assert_eq!(new.log_threshold(), old.log_threshold());
            }
        }
        prop_assert!(session.warnings().is_empty());
    }
}

#[test]
fn training_is_deterministic_and_keeps_the_best_epoch() {
    let all = blobs(4, 6, 30, 9);
    let train_rows: Vec<usize> = (0..all.len()).filter(|&i| all.labels[i].0 < 3).collect();
    let train = all.subset(&train_rows, "train");
    let validation = blobs(4, 6, 10, 10);
    let mut cfg = TrainConfig::new(NetworkSpec::new(6, vec![8, 3], Activation::Tanh, 4), CovarianceMode::Isometric);
    cfg.epochs = 6;
    cfg.batch_size = 16;
    cfg.adam.lr = 0.01;
    let a = fit(&train, &validation, &cfg).unwrap();
    let b = fit(&train, &validation, &cfg).unwrap();
    assert_eq!(a, b);
    let best = a.checkpoint.report.dscore;
    assert!(a.log.iter().all(|e| e.dscore <= best));
    let first_best = a.log.iter().find(|e| e.dscore == best).unwrap().epoch;
    assert_eq!(first_best, a.checkpoint.report.epoch);
}
