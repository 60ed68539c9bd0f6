//! End-to-end training behaviour on small problems.

use cliff_core::criterion::{total_loss, ConditioningPolicy};
use cliff_core::diffgraph::Graph;
use cliff_core::synthdata::{generate, Dataset, SynthConfig};
use cliff_core::trainer::{encode, train_with, zeta_rng, EncoderSpec, Params, TrainConfig};

fn small_problem() -> (Dataset, EncoderSpec, TrainConfig) {
    let ds = generate(
        &SynthConfig {
            n: 300,
            ..SynthConfig::default()
        },
        5,
    )
    .unwrap();
    let enc = EncoderSpec {
        layer_dims: vec![2, 16, 2],
        ..EncoderSpec::default()
    };
    let mut cfg = TrainConfig {
        batch_size: 300,
        learning_rate: 0.01,
        zeta_seed: 9,
        ..TrainConfig::default()
    };
    cfg.weights.m_conditioning = 20;
    (ds, enc, cfg)
}

fn recomputed_total(
    params: &Params,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let mut g = Graph::new();
    let vars = params.bind(&mut g).unwrap();
    let x = g.constant(ds.x.data.clone(), &[ds.x.rows, ds.x.cols]).unwrap();
    let z = encode(&mut g, params, &vars, x).unwrap();
    total_loss(&mut g, z, &cfg.weights, rng).unwrap().report.total
}

#[test]
fn zero_learning_rate_keeps_the_initial_parameters() {
    let (ds, enc, mut cfg) = small_problem();
    cfg.learning_rate = 0.0;
    cfg.epochs = 5;
    let initial = Params::init(&enc, 3).unwrap();
    let r = train_with(&ds.x, initial.clone(), &cfg, |_| {}).unwrap();
    assert_eq!(r.params, initial);
    assert_eq!(r.metrics.len(), 5);
}

#[test]
fn loss_goes_down() {
    let (ds, enc, mut cfg) = small_problem();
    // fixed conditioning rows make the objective deterministic
    cfg.weights.conditioning = ConditioningPolicy::FirstRows;
    cfg.learning_rate = 0.002;
    cfg.epochs = 40;
    let r = train_with(&ds.x, Params::init(&enc, 1).unwrap(), &cfg, |_| {}).unwrap();
    let before = recomputed_total(&r.initial, &ds, &cfg, &mut zeta_rng(0));
    let after = recomputed_total(&r.params, &ds, &cfg, &mut zeta_rng(0));
    assert!((before - r.metrics[0].total).abs() <= 1e-12 * before.abs());
    assert!(after < before - 0.3, "{before} → {after}");
}

#[test]
fn logged_losses_match_a_recomputation() {
    let (ds, enc, mut cfg) = small_problem();
    let initial = Params::init(&enc, 2).unwrap();
    cfg.epochs = 4;
    let full = train_with(&ds.x, initial.clone(), &cfg, |_| {}).unwrap();

    let mut rng = zeta_rng(cfg.zeta_seed);
    let first = recomputed_total(&initial, &ds, &cfg, &mut rng);
    assert!((first - full.metrics[0].total).abs() <= 1e-12 * first.abs().max(1.0));

    // parameters entering epoch 3, with the stream advanced past three draws
    cfg.epochs = 3;
    let prefix = train_with(&ds.x, initial.clone(), &cfg, |_| {}).unwrap();
    let mut rng = zeta_rng(cfg.zeta_seed);
    for _ in 0..3 {
        recomputed_total(&initial, &ds, &cfg, &mut rng);
    }
    let later = recomputed_total(&prefix.params, &ds, &cfg, &mut rng);
    assert!((later - full.metrics[3].total).abs() <= 1e-12 * later.abs().max(1.0));
}
