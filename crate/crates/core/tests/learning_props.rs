mod common;

use common::{close, ConstGamma};
use racbf::barrier::*;
use racbf::dynamics::*;
use racbf::filter::{pair_constraints, FilterMode};
use racbf::learning::*;
use racbf::mlp::Mlp;
use racbf::responsibility::*;
use racbf::sim::{RolloutConfig, ScenarioKind, ScenarioParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<TrainingPair> {
    (0..n)
        .map(|k| {
            let (si, sj) = common::random_pair(rng, 10.0, 2.5);
            TrainingPair {
                scenario_id: format!("r{}", k % 5),
                timestamp: k as f64,
                agents: (0, 1),
                states: (si, sj),
                inputs: (ControlInput::ZERO, ControlInput::ZERO),
                c: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            }
        })
        .collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { hidden: vec![16, 16], epochs: 15, batch_size: 16, learning_rate: 3e-3, ..TrainConfig::default() }
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let cfg = TrainConfig { lambda3: 0.05, ..TrainConfig::default() };
    for _ in 0..100 {
        let net = Mlp::random(&[FEATURE_DIM, 2, 1], &[0.1], 1.0, &mut rng);
        let batch = random_pairs(&mut rng, 4);
        let model = GammaModel::Mlp(net.clone());
        let g = regularized_loss(&batch, &model, &cfg).unwrap().grad;
        let p0 = net.params();
        let f = |p: &[f64]| {
            let mut n = net.clone();
            n.set_params(p);
            regularized_loss(&batch, &GammaModel::Mlp(n), &cfg).unwrap().value
        };
        for k in 0..p0.len() {
            let h = 1e-6;
            let (mut up, mut dn) = (p0.clone(), p0.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(close(g[k], fd, 1e-3, 1e-6), "param {k}: {} vs {fd}", g[k]);
        }
    }
}

#[test]
fn hinge_loss_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = TrainConfig::default();
    for _ in 0..50 {
        let model = GammaModel::random_mlp(&[8, 8], &DEFAULT_SLOPES, 2.0, &mut rng);
        let batch = random_pairs(&mut rng, 10);
        let l = hinge_loss(&batch, &model, &cfg).unwrap();
        assert!(l.value >= 0.0);
        assert!(l.breakdown.hinge >= 0.0 && l.breakdown.sum_penalty >= 0.0 && l.breakdown.norm >= 0.0);
    }
}

#[test]
fn training_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let pairs = random_pairs(&mut rng, 200);
    let a = train(&pairs, &small_cfg()).unwrap();
    let b = train(&pairs, &small_cfg()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.best_loss.to_bits(), b.best_loss.to_bits());
    assert_eq!(a.log, b.log);
    let c = train(&pairs, &TrainConfig { seed: 1, ..small_cfg() }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn returns_best_epoch_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let pairs = random_pairs(&mut rng, 200);
    let out = train(&pairs, &small_cfg()).unwrap();
    let min = out.log.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
    assert!(out.best_loss <= min);
    let kept = heading_filter(&pairs, small_cfg().theta_max);
    assert_eq!(kept.len(), out.pairs_used);
    let eval = regularized_loss(&kept, &out.model, &small_cfg()).unwrap();
    assert!(close(eval.value, out.best_loss, 1e-9, 1e-9), "{} vs {}", eval.value, out.best_loss);
}

#[test]
fn larger_entropy_weight_raises_mean_allocation() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut pairs = random_pairs(&mut rng, 300);
    for p in &mut pairs {
        p.c = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
    }
    let mean = |model: &GammaModel| {
        pairs.iter().map(|p| model.gamma(p.states.0, p.states.1) + model.gamma(p.states.1, p.states.0)).sum::<f64>() / (2 * pairs.len()) as f64
    };
    let cfg = TrainConfig { epochs: 40, ..small_cfg() };
    let lo = train(&pairs, &TrainConfig { lambda3: 0.0, ..cfg.clone() }).unwrap();
    let hi = train(&pairs, &TrainConfig { lambda3: 0.01, ..cfg }).unwrap();
    assert!(mean(&hi.model) >= mean(&lo.model), "{} < {}", mean(&hi.model), mean(&lo.model));
    assert!(mean(&hi.model) > 0.05);
}

#[test]
fn empty_after_heading_filter_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut pairs = random_pairs(&mut rng, 5);
    for p in &mut pairs {
        p.states.1.theta = wrap_angle(p.states.0.theta + std::f64::consts::PI);
    }
    assert!(train(&pairs, &small_cfg()).is_err());
}

#[test]
fn feasible_fraction_limits() {
    let cfg = BarrierConfig::default();
    let bounds = InputBounds::default();
    let grid = InputGrid::default_for(&bounds).unwrap();
    // Ego stationary, heading perpendicular to the stationary other agent:
    // the ego's inputs do not affect the barrier to first order.
    let scene = [AgentState::new(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2), AgentState::new(10.0, 0.0, 0.0, 0.0)];
    let c = pair_constraints(&scene, 0, FilterMode::EvenSplit, &cfg, &bounds).unwrap();
    assert!(c[0].lg[0].abs() < 1e-12 && c[0].lg[1].abs() < 1e-12);
    assert_eq!(feasible_input_fraction(&scene, 0, &GammaModel::Zero, &grid, &cfg, &bounds).unwrap(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..50 {
        let (si, sj) = common::random_pair(&mut rng, 10.0, 2.5);
        let scene = [si, sj];
        let c = pair_constraints(&scene, 0, FilterMode::EvenSplit, &cfg, &bounds).unwrap()[0];
        let c_max = grid.points().iter().map(|&u| c.margin(u)).fold(f64::NEG_INFINITY, f64::max);
        let f = feasible_input_fraction(&scene, 0, &ConstGamma(c_max + 1.0), &grid, &cfg, &bounds).unwrap();
        assert_eq!(f, 0.0);
    }
}

#[test]
fn hinge_rate_falls_during_training() {
    let rule = PositionalRule::new(0.3, -0.3).unwrap();
    let cfg = RolloutConfig::default();
    let suite = SuiteSpec {
        entries: vec![(ScenarioKind::CarFollow, 20)],
        params: ScenarioParams { gap: (4.0, 10.0), ..ScenarioParams::default() },
    };
    let ds = generate_synthetic_dataset(&suite, &rule, 3, &cfg).unwrap();
    let pairs = training_pairs(&ds.demonstrations, &cfg.barrier);
    let out = train(&pairs, &TrainConfig { epochs: 90, ..TrainConfig::default() }).unwrap();
    let window = |k: usize| out.log[k * 30..(k + 1) * 30].iter().map(|e| e.hinge_rate).sum::<f64>() / 30.0;
    let w: Vec<f64> = (0..3).map(window).collect();
    assert!(w.windows(2).all(|p| p[1] <= p[0] + 1e-12), "{w:?}");
    assert!(w[2] < w[0], "{w:?}");
}

fn tiny_suite() -> SuiteSpec {
    SuiteSpec {
        entries: vec![(ScenarioKind::CarFollow, 3), (ScenarioKind::Intersection, 2), (ScenarioKind::Merge, 2), (ScenarioKind::Random, 2)],
        params: ScenarioParams { horizon: 4.0, agents: 3, ..ScenarioParams::default() },
    }
}

#[test]
fn generated_demonstrations_satisfy_ground_truth() {
    let rule = PositionalRule::new(0.3, -0.3).unwrap();
    let cfg = RolloutConfig::default();
    let ds = generate_synthetic_dataset(&tiny_suite(), &rule, 5, &cfg).unwrap();
    assert_eq!(ds.demonstrations.len(), 9 * 41);
    assert!(ds.audit.iter().all(|a| a.margin >= -1e-9));
    for d in &ds.demonstrations {
        d.validate(&cfg.bounds).unwrap();
    }
    let pairs = training_pairs(&ds.demonstrations, &cfg.barrier);
    assert_eq!(validation_violation_rate(&pairs, FilterMode::Learned(&rule), &cfg.barrier, &cfg.bounds).unwrap(), 0.0);

    let again = generate_synthetic_dataset(&tiny_suite(), &rule, 5, &cfg).unwrap();
    assert_eq!(ds, again);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_dataset_csv(&ds.demonstrations, &mut a).unwrap();
    write_dataset_csv(&again.demonstrations, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(read_dataset_csv(a.as_slice()).unwrap(), ds.demonstrations);

    let empty = SuiteSpec { entries: vec![], params: ScenarioParams::default() };
    assert!(generate_synthetic_dataset(&empty, &rule, 5, &cfg).is_err());
}

#[test]
fn even_split_training_data_stays_near_zero() {
    let cfg = RolloutConfig::default();
    let suite = SuiteSpec { entries: vec![(ScenarioKind::CarFollow, 6)], params: ScenarioParams { gap: (25.0, 40.0), horizon: 5.0, ..ScenarioParams::default() } };
    let ds = generate_synthetic_dataset(&suite, &GammaModel::Zero, 2, &cfg).unwrap();
    let pairs = training_pairs(&ds.demonstrations, &cfg.barrier);
    let out = train(&pairs, &TrainConfig { epochs: 30, ..small_cfg() }).unwrap();
    let mean_gamma = out.log.last().unwrap().mean_gamma;
    assert!(mean_gamma > 0.0 && mean_gamma < 1.0, "{mean_gamma}");
}
