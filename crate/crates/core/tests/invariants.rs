use pacsde_core::bnn::{weight_kl, Activation, BayesLayer, MlpArch, WeightPrior};
use pacsde_core::checkpoint::Checkpoint;
use pacsde_core::datagen::{Dataset, ObservationSequence, Role};
use pacsde_core::harness::{
    derive_seed, evaluate, loss_and_gradients, run_training, MetricsRow, RunPaths,
};
use pacsde_core::pacloss::{
    complexity, empirical_risk, hoeffding_slack, jensen_nll, mc_marginal_nll, LogLikTable,
};
use pacsde_core::priors::{apply_mask, lorenz_drift, lotka_volterra_drift};
use pacsde_core::sde::{em_step, repeat_rows, StepNoise};
use pacsde_core::{
    DiffusionSpec, ExperimentConfig, GammaMask, HybridSde, LikelihoodSpec, Model, PacConfig,
    PriorKind, PriorOde, Tape, Tensor, TimeGrid, Variant, WeightPosterior,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// A one-layer net whose mean output is `x·m + b` and whose weight noise is
/// negligible.
fn linear_net(dim: usize, m: f64, b: f64) -> WeightPosterior {
    let mut mean = vec![0.0; dim * dim];
    for i in 0..dim {
        mean[i * dim + i] = m;
    }
    let layer = BayesLayer {
        mean: Tensor::matrix(dim, dim, mean).unwrap(),
        log_var: Tensor::full(&[dim, dim], -600.0),
        bias_mean: Tensor::full(&[dim], b),
        bias_log_var: Tensor::full(&[dim], -600.0),
    };
    WeightPosterior::new(
        MlpArch::new(vec![dim, dim], Activation::Softplus),
        vec![layer],
    )
    .unwrap()
}

fn small_lv_config(variant: Variant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::lotka_volterra_default(variant);
    cfg.arch = MlpArch::new(vec![2, 8, 2], Activation::Softplus);
    cfg.epochs = 2;
    cfg.samples = 2;
    cfg.checkpoint_every = 0;
    cfg
}

#[test]
fn constant_drift_traces_a_straight_line_on_irregular_grid() {
    let c = -1.3;
    let post = linear_net(1, 0.0, c);
    let sde = HybridSde::new(
        Some(post),
        None,
        GammaMask::zeros(1),
        DiffusionSpec::new(vec![0.7]).unwrap(),
    )
    .unwrap();
    let grid = TimeGrid::new(vec![0.0, 0.05, 0.3, 0.31, 0.9, 1.7]).unwrap();
    let tape = Tape::new();
    let net = sde
        .posterior
        .as_ref()
        .unwrap()
        .register(&tape, false)
        .unwrap();
    let drift = sde.view(Some(&net));
    let h0 = 2.5;
    let mut h = tape.constant(Tensor::matrix(1, 1, vec![h0]).unwrap());
    for k in 0..grid.steps() {
        let noise = StepNoise {
            dw: Tensor::zeros(&[1, 1]),
            layers: vec![Tensor::zeros(&[1, 1])],
        };
        let (next, f) = em_step(
            h,
            grid.times()[k],
            grid.dt(k),
            &drift,
            &sde.diffusion,
            &noise,
            k,
        )
        .unwrap();
        assert_eq!(f.unwrap().item(), c);
        h = next;
        let want = h0 + c * grid.times()[k + 1];
        assert!(
            (h.item() - want).abs() < 1e-12,
            "step {k}: {} vs {want}",
            h.item()
        );
    }
}

#[test]
fn ou_terminal_variance_matches_closed_form() {
    let samples = 10_000;
    let sde = HybridSde::new(
        Some(linear_net(1, -1.0, 0.0)),
        None,
        GammaMask::zeros(1),
        DiffusionSpec::new(vec![1.0]).unwrap(),
    )
    .unwrap();
    let grid = TimeGrid::regular(0.0, 1e-3, 1000).unwrap();
    let states = sde
        .rollout(&Tensor::zeros(&[samples, 1]), &grid, 31)
        .unwrap();
    let last: Vec<f64> = (0..samples)
        .map(|s| states.data()[s * 1001 + 1000])
        .collect();
    let n = samples as f64;
    let mean = last.iter().sum::<f64>() / n;
    let var = last.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let se = exact * (2.0 / (n - 1.0)).sqrt();
    assert!((exact - 0.4323).abs() < 1e-4);
    assert!(
        (var - exact).abs() < 3.0 * se,
        "variance {var} vs {exact} (se {se})"
    );
}

#[test]
fn prior_drifts_match_independent_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(295);
    let lorenz = PriorOde::new(PriorKind::Lorenz, vec![10.0, 28.0, 2.67], 3).unwrap();
    let lv = PriorOde::new(PriorKind::LotkaVolterra, vec![2.0, 1.0, 4.0, 1.0], 2).unwrap();
    for _ in 0..1000 {
        let (x, y, z) = (
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(0.0..50.0),
        );
        let got = lorenz.eval(&[x, y, z]);
        let want = [10.0 * (y - x), x * (28.0 - z) - y, x * y - 2.67 * z];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
        assert_eq!(lorenz_drift(&[x, y, z], lorenz.params()).to_vec(), got);

        let (u, v) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let got = lv.eval(&[u, v]);
        let want = [u * (2.0 - v), v * (u - 4.0)];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
        assert_eq!(lotka_volterra_drift(&[u, v], lv.params()).to_vec(), got);
    }
}

/// A model whose single rollout per sequence is the observed sequence, so
/// the forecast matches every observation exactly.
fn self_consistent_problem(steps: usize, seed: u64) -> (Model, Dataset) {
    let sde = HybridSde::new(
        Some(linear_net(3, -0.5, 0.2)),
        Some(PriorOde::lorenz([10.0, 28.0, 2.67])),
        GammaMask::new(vec![0.0, 1.0, 0.0]).unwrap(),
        DiffusionSpec::constant(3, 0.5).unwrap(),
    )
    .unwrap();
    let model = Model {
        sde,
        likelihood: LikelihoodSpec::isotropic(3, 1.0).unwrap(),
    };
    let grid = TimeGrid::regular(0.0, 0.01, steps).unwrap();
    let sequences = (0..2)
        .map(|i| {
            let h0 = repeat_rows(&[vec![1.0 + i as f64, -1.0, 20.0]], 1).unwrap();
            let path = model
                .sde
                .rollout(&h0, &grid, derive_seed(seed, &[i as u64]))
                .unwrap();
            let values = path.reshape(vec![steps + 1, 3]).unwrap();
            ObservationSequence::new(i, grid.clone(), values).unwrap()
        })
        .collect();
    (model, Dataset::new(Role::Test, sequences).unwrap())
}

#[test]
fn perfect_forecast_has_zero_mse_and_mode_density_nll() {
    let (model, test) = self_consistent_problem(100, 8);
    let m = evaluate(&model, &test, 1, None, 8).unwrap();
    assert_eq!(m.horizon, 100);
    assert_eq!(m.mse, 0.0);
    assert_eq!(m.mse_per_sample, 0.0);
    assert!(
        (m.nll - 100.0 * 3.0 * HALF_LOG_2PI).abs() < 1e-9,
        "{}",
        m.nll
    );
    assert!((m.nll - 275.68).abs() < 0.01);
}

#[test]
fn more_evaluation_samples_do_not_raise_mse_on_average() {
    let cfg = ExperimentConfig::lotka_volterra_default(Variant::EPacBayes);
    let data = cfg.dataset.generate(cfg.seeds.data).unwrap();
    let model = Model::build(
        &cfg,
        pacsde_core::bnn::init_posterior(&cfg.arch, 3).unwrap(),
    )
    .unwrap();
    let (mut small, mut large) = (0.0, 0.0);
    for seed in 0..10 {
        small += evaluate(&model, &data.test, 4, Some(20), seed).unwrap().mse;
        large += evaluate(&model, &data.test, 8, Some(20), seed).unwrap().mse;
    }
    assert!(
        large <= small,
        "S=8 mean {} vs S=4 mean {}",
        large / 10.0,
        small / 10.0
    );
}

#[test]
fn evaluation_rejects_dimension_mismatch() {
    let (model, _) = self_consistent_problem(5, 0);
    let lv = ExperimentConfig::lotka_volterra_default(Variant::EBayes)
        .dataset
        .generate(0)
        .unwrap();
    assert!(evaluate(&model, &lv.test, 2, Some(3), 0).is_err());
}

#[test]
fn metrics_csv_schema_is_stable() {
    assert_eq!(
        MetricsRow::HEADER,
        "step,epoch,mll,kl_path,kl_weights,complexity,total,pac_bound_linear,risk_empirical,nll_per_step"
    );
    let cfg = small_lv_config(Variant::EPacBayesHybrid);
    let data = cfg.dataset.generate(cfg.seeds.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path());
    let outcome = run_training(&cfg, &data.train, Some(&paths)).unwrap();
    let mut reader = csv::Reader::from_path(paths.metrics()).unwrap();
    assert_eq!(
        reader
            .headers()
            .unwrap()
            .iter()
            .collect::<Vec<_>>()
            .join(","),
        MetricsRow::HEADER
    );
    let mut last_epoch = 0;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.unwrap();
        assert_eq!(record.len(), 10);
        let values: Vec<f64> = record.iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(values[0] as usize, i + 1);
        assert!(values[1] as usize >= last_epoch);
        last_epoch = values[1] as usize;
        assert_eq!(values[2], outcome.metrics[i].mll);
        assert_eq!(values[6], outcome.metrics[i].total);
        rows += 1;
    }
    assert_eq!(rows, cfg.epochs * data.train.len().div_ceil(cfg.minibatch));
    let timing = std::fs::read_to_string(paths.timing()).unwrap();
    assert!(timing.starts_with("epoch,seconds\n"));
    assert_eq!(timing.lines().count(), 1 + cfg.epochs);
}

#[test]
fn e_bayes_metrics_have_zero_complexity() {
    let cfg = small_lv_config(Variant::EBayes);
    let data = cfg.dataset.generate(cfg.seeds.data).unwrap();
    let outcome = run_training(&cfg, &data.train, None).unwrap();
    assert!(!outcome.metrics.is_empty());
    for row in &outcome.metrics {
        assert_eq!(row.complexity, 0.0);
        assert_eq!(row.total, -row.mll);
    }
}

#[test]
fn variants_switch_exactly_the_expected_loss_terms() {
    let data = small_lv_config(Variant::EBayes)
        .dataset
        .generate(0)
        .unwrap();
    let batch: Vec<&ObservationSequence> = data.train.sequences[..2].iter().collect();
    for variant in Variant::ALL {
        let cfg = small_lv_config(variant);
        let model = Model::build(
            &cfg,
            pacsde_core::bnn::init_posterior(&cfg.arch, 1).unwrap(),
        )
        .unwrap();
        let prior_active = model
            .sde
            .prior
            .as_ref()
            .is_some_and(|p| p.kind() != PriorKind::Zero)
            && !model.sde.gamma.is_zero();
        assert_eq!(prior_active, variant.is_hybrid(), "{}", variant.name());
        let pac = PacConfig::new(cfg.delta, data.train.len(), cfg.samples, 0).unwrap();
        let (b, _) = loss_and_gradients(
            &model,
            &batch,
            cfg.samples,
            &pac,
            variant.uses_complexity(),
            4,
        )
        .unwrap();
        assert_eq!(
            b.complexity > 0.0,
            variant.uses_complexity(),
            "{}",
            variant.name()
        );
        assert!(b.kl_path > 0.0 && b.kl_weights > 0.0);
        let expected_total = -b.mll + b.complexity;
        assert!((b.total - expected_total).abs() <= 1e-9 * b.total.abs());
    }
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let (model, test) = self_consistent_problem(20, 3);
    let cfg = ExperimentConfig::lorenz_default(Variant::EPacBayesHybrid);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint(&cfg, None, 0, 0).save(&path).unwrap();
    let loaded = Model::from_checkpoint(&Checkpoint::load(&path).unwrap())
        .unwrap()
        .model;
    assert_eq!(loaded, model);
    assert_eq!(
        evaluate(&model, &test, 6, None, 12).unwrap(),
        evaluate(&loaded, &test, 6, None, 12).unwrap()
    );
}

fn table_strategy() -> impl Strategy<Value = (Vec<f64>, usize, usize)> {
    (1usize..4, 1usize..6).prop_flat_map(|(n, s)| {
        (
            prop::collection::vec(-60.0f64..-1.0, n * s),
            Just(n),
            Just(s),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jensen_dominates_marginal_and_risk_is_bounded((values, n, s) in table_strategy(), k in 1usize..5) {
        let spec = LikelihoodSpec::isotropic(1, 1.0).unwrap();
        let log_bound = pacsde_core::pacloss::log_uniform_bound(&spec, k);
        let shifted: Vec<f64> = values.iter().map(|v| v.min(log_bound)).collect();
        let table = LogLikTable::new(shifted, n, s, k).unwrap();
        let mc = mc_marginal_nll(&table).unwrap();
        prop_assert!(jensen_nll(&table) >= mc - 1e-12);
        let risk = empirical_risk(&table, log_bound);
        prop_assert!((0.0..=1.0).contains(&risk));
    }

    #[test]
    fn weight_kl_is_nonnegative_and_zero_only_at_prior(
        means in prop::collection::vec(-2.0f64..2.0, 6),
        log_vars in prop::collection::vec(-4.0f64..2.0, 6),
    ) {
        let arch = MlpArch::new(vec![2, 2], Activation::Softplus);
        let layer = |m: &[f64], l: &[f64]| BayesLayer {
            mean: Tensor::matrix(2, 2, m[..4].to_vec()).unwrap(),
            log_var: Tensor::matrix(2, 2, l[..4].to_vec()).unwrap(),
            bias_mean: Tensor::vector(m[4..].to_vec()),
            bias_log_var: Tensor::vector(l[4..].to_vec()),
        };
        let post = WeightPosterior::new(arch.clone(), vec![layer(&means, &log_vars)]).unwrap();
        let kl = weight_kl(&post, &WeightPrior::default());
        prop_assert!(kl >= 0.0);
        let at_prior = WeightPosterior::new(arch, vec![layer(&[0.0; 6], &[0.0; 6])]).unwrap();
        prop_assert_eq!(weight_kl(&at_prior, &WeightPrior::default()), 0.0);
        if means.iter().chain(&log_vars).any(|x| x.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn complexity_and_slack_are_monotone(kl in 0.0f64..500.0, extra in 0.1f64..50.0, n in 9usize..500, s in 1usize..200, delta in 0.01f64..1.0) {
        prop_assert!(complexity(kl + extra, n, delta).unwrap() > complexity(kl, n, delta).unwrap());
        prop_assert!(complexity(kl, n * 100, delta).unwrap() < complexity(kl, n, delta).unwrap());
        let pac = PacConfig::new(delta, n, s, 1).unwrap();
        let more_samples = PacConfig::new(delta, n, s + 1, 1).unwrap();
        let more_data = PacConfig::new(delta, n + 1, s, 1).unwrap();
        prop_assert!(hoeffding_slack(&more_samples) < hoeffding_slack(&pac));
        prop_assert!(hoeffding_slack(&more_data) > hoeffding_slack(&pac));
    }

    #[test]
    fn mask_selects_components(r in prop::collection::vec(-10.0f64..10.0, 3), bits in prop::collection::vec(any::<bool>(), 3)) {
        let gamma = GammaMask::new(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let masked = apply_mask(&r, &gamma).unwrap();
        for i in 0..3 {
            prop_assert_eq!(masked[i], if bits[i] { r[i] } else { 0.0 });
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(data in prop::collection::vec(-1e6f64..1e6, 1..40), step in 0usize..1000) {
        let t = Tensor::vector(data);
        let ck = Checkpoint::new(vec![("w".into(), t.clone())], serde_json::json!({ "step": step }));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.get("w").unwrap(), &t);
        prop_assert_eq!(&back.meta, &ck.meta);
    }
}
