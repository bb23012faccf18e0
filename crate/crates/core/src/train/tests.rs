use super::*;
use crate::data::{make_cmnist_train, synthetic_digits, GeneratorConfig, Role};
use crate::nets::Member;
use crate::rng::Rng;
use crate::tcest::grouped_estimate;

fn toy_train(n: usize) -> ColoredDataset {
    make_cmnist_train(&synthetic_digits(n, 11), &GeneratorConfig::default()).unwrap()
}

fn toy_adapt(ds: &ColoredDataset) -> (ColoredDataset, ColoredDataset) {
    let rows: Vec<usize> = (0..ds.len()).collect();
    let half = ds.len() / 2;
    (
        ds.subset(&rows[..half], Role::AdaptTrain).unwrap(),
        ds.subset(&rows[half..], Role::AdaptVal).unwrap(),
    )
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        n_models: 2,
        batch_size: 32,
        m: 8,
        epochs: 2,
        lr: 1e-3,
        rng_seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn critic_step_leaves_theta_alone() {
    let ds = toy_train(96);
    let mut st = TrainState::new(&small_cfg(), ds.input_dim()).unwrap();
    let (theta, phi) = (st.theta_digest(), st.phi_digest());
    let rows: Vec<usize> = (0..32).collect();
    assert!(st.critic_step(&ds, &rows).unwrap().is_some());
    assert_eq!(st.theta_digest(), theta);
    assert_ne!(st.phi_digest(), phi);
}

#[test]
fn model_step_leaves_phi_alone() {
    let ds = toy_train(96);
    let mut st = TrainState::new(&small_cfg(), ds.input_dim()).unwrap();
    let (theta, phi) = (st.theta_digest(), st.phi_digest());
    let rows: Vec<usize> = (0..32).collect();
    st.model_step(&ds, &rows).unwrap();
    assert_eq!(st.phi_digest(), phi);
    assert_ne!(st.theta_digest(), theta);
}

fn objective_value(st: &TrainState, ds: &ColoredDataset, rows: &[usize], plans: &Rng) -> f64 {
    let (x, y) = ds.batch(rows).unwrap();
    let mut tape = Tape::new();
    let obj = model_objective(&mut tape, &st.collection, st.critic.as_ref(), &st.cfg, x, &y, &mut plans.clone()).unwrap();
    tape.value(obj.loss).item()
}

fn estimate_value(st: &TrainState, ds: &ColoredDataset, rows: &[usize], plans: &Rng) -> f64 {
    let (x, y) = ds.batch(rows).unwrap();
    let reps = st.collection.members.iter().map(|m| m.rep.mlp.infer(&x).unwrap()).collect();
    let batch = EstimatorBatch { reps, labels: y };
    grouped_estimate(st.critic.as_ref().unwrap(), &batch, st.cfg.grouping(), st.cfg.m, &mut plans.clone()).unwrap()
}

#[test]
fn tiny_critic_step_does_not_lower_the_estimate() {
    let ds = toy_train(128);
    let cfg = TrainConfig { lr: 1e-7, ..small_cfg() };
    let rows: Vec<usize> = (0..64).collect();
    for seed in 0..5 {
        let mut st = TrainState::new(&TrainConfig { rng_seed: seed, ..cfg.clone() }, ds.input_dim()).unwrap();
        let plans = rng::stream(seed, 77);
        let before = estimate_value(&st, &ds, &rows, &plans);
        st.critic_plans = plans.clone();
        st.critic_step(&ds, &rows).unwrap();
        assert!(estimate_value(&st, &ds, &rows, &plans) >= before);
    }
}

#[test]
fn tiny_model_step_does_not_raise_the_objective() {
    let ds = toy_train(128);
    let cfg = TrainConfig { lr: 1e-7, ..small_cfg() };
    let rows: Vec<usize> = (0..64).collect();
    for seed in 0..5 {
        let mut st = TrainState::new(&TrainConfig { rng_seed: seed, ..cfg.clone() }, ds.input_dim()).unwrap();
        let plans = rng::stream(seed, 78);
        let before = objective_value(&st, &ds, &rows, &plans);
        st.model_plans = plans.clone();
        st.model_step(&ds, &rows).unwrap();
        assert!(objective_value(&st, &ds, &rows, &plans) <= before);
    }
}

#[test]
fn critic_update_ignores_beta() {
    let ds = toy_train(96);
    let rows: Vec<usize> = (0..32).collect();
    let digests: Vec<_> = [0.0, 10.0]
        .iter()
        .map(|&beta| {
            let mut st = TrainState::new(&TrainConfig { beta, ..small_cfg() }, ds.input_dim()).unwrap();
            st.critic_step(&ds, &rows).unwrap();
            st.phi_digest()
        })
        .collect();
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn zero_beta_matches_independent_erm() {
    let ds = toy_train(96);
    let (at, av) = toy_adapt(&ds);
    let targets = [ValidationTarget {
        condition: "toy",
        adapt_train: &at,
        adapt_val: &av,
    }];
    let cfg = TrainConfig { beta: 0.0, ..small_cfg() };
    let joint = train_collection(&ds, &targets, &cfg, |_| {}).unwrap();

    let first: Member = ModelCollection::init(2, ds.input_dim(), cfg.rng_seed).members[0].clone();
    let solo = TrainState::from_collection(&cfg, ModelCollection { members: vec![first] }).unwrap();
    assert!(solo.critic.is_none());
    let solo = train_from(solo, &ds, &targets, |_| {}).unwrap();
    assert_eq!(solo.collection.members[0], joint.collection.members[0]);
}

#[test]
fn runs_are_deterministic() {
    let ds = toy_train(96);
    let (at, av) = toy_adapt(&ds);
    let targets = [ValidationTarget {
        condition: "toy",
        adapt_train: &at,
        adapt_val: &av,
    }];
    let a = train_collection(&ds, &targets, &small_cfg(), |_| {}).unwrap();
    let b = train_collection(&ds, &targets, &small_cfg(), |_| {}).unwrap();
    assert_eq!(a.theta_digest(), b.theta_digest());
    assert_eq!(a.phi_digest(), b.phi_digest());
    assert_eq!(a.records, b.records);
    assert_eq!(a.records.len(), 2);
    assert!(a.records.iter().all(|r| r.tc_hat.is_some() && r.train_loss.len() == 2));
}

#[test]
fn zero_epochs_keeps_the_initial_collection() {
    let ds = toy_train(64);
    let (at, av) = toy_adapt(&ds);
    let targets = [ValidationTarget {
        condition: "toy",
        adapt_train: &at,
        adapt_val: &av,
    }];
    let cfg = TrainConfig { epochs: 0, ..small_cfg() };
    let mut seen = 0;
    let st = train_collection(&ds, &targets, &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 1);
    let best = st.best_for("toy").unwrap();
    assert_eq!(best.epoch, 0);
    assert_eq!(best.collection, ModelCollection::init(2, ds.input_dim(), cfg.rng_seed));
}

#[test]
fn erm_baseline_has_no_critic() {
    let ds = toy_train(64);
    let st = train_erm_baseline(&ds, &[], &small_cfg(), |_| {}).unwrap();
    assert_eq!(st.collection.n(), 1);
    assert!(st.critic.is_none());
    assert!(st.records.iter().all(|r| r.tc_hat.is_none()));
}

#[test]
fn checkpoint_selection_prefers_earliest_tie() {
    assert_eq!(checkpoint_select(&[0.6, 0.7, 0.7]), Some(1));
    assert_eq!(checkpoint_select(&[0.5, 0.6, 0.8]), Some(2));
    assert_eq!(checkpoint_select(&[0.9]), Some(0));
    assert_eq!(checkpoint_select(&[]), None);
}

#[test]
fn loader_covers_each_row_once_per_pass() {
    let mut l = Loader::new(10, 3, rng::stream(0, 1));
    assert_eq!(l.batches_per_epoch(), 3);
    let mut seen: Vec<usize> = (0..3).flat_map(|_| l.next_batch()).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 9);
}

#[test]
fn rejects_bad_configs() {
    for cfg in [
        TrainConfig { n_models: 0, ..small_cfg() },
        TrainConfig { beta: -1.0, ..small_cfg() },
        TrainConfig { batch_size: 1, ..small_cfg() },
        TrainConfig { lr: 0.0, ..small_cfg() },
        TrainConfig { critic_steps_per_model_step: 0, ..small_cfg() },
    ] {
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }
    assert_ne!(small_cfg().config_hash(), TrainConfig::default().config_hash());
}
