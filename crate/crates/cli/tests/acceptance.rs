//! Acceptance report. Prints one PASS / FAIL / SKIP line per criterion.
//!
//! MNIST is looked up in `DIVTC_MNIST_DIR`, then `<workspace>/data/mnist`.
//! The full replication and ablation criteria take hours on a CPU and run
//! only with `DIVTC_SLOW=1`. Set `DIVTC_ONLY=2,4` to run a subset.
//!
//! A failing correctness criterion fails the binary. The replication
//! criteria 4 to 6 depend on training outcomes; their FAIL lines are printed
//! but only fail the binary under `DIVTC_STRICT=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use divtc::{run_experiment, ExperimentConfig, RunOutcome};
use divtc_core::data::{
    dataset_stats, load_mnist, make_cmnist_train, make_tcmnist_train, parse_idx, GeneratorConfig, MnistSplit,
    Role, IMAGES_MAGIC,
};
use divtc_core::diffengine::{grad_check, EngineError, NodeId, OpKind, Tape, Tensor};
use divtc_core::eval::{evaluate_protocols, Protocol};
use divtc_core::nets::{Critic, ModelCollection, Params};
use divtc_core::rng::{self, Rng};
use divtc_core::tcest::synthetic::{binary_systems, gaussian_infonce, median, median_trained_estimate, ProbeSettings};
use divtc_core::tcest::{gaussian_mi_oracle, Grouping};
use divtc_core::train::{
    checkpoint_select, objective_gradients, objective_value, train_collection, train_from, TrainConfig, TrainState,
    ValidationTarget,
};
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Verdict {
    status: Status,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Verdict {
    Verdict {
        status: Status::Pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Verdict {
    Verdict {
        status: Status::Fail,
        detail: detail.into(),
    }
}

fn skip(detail: impl Into<String>) -> Verdict {
    Verdict {
        status: Status::Skip,
        detail: detail.into(),
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("DIVTC_MNIST_DIR").map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join("train-images-idx3-ubyte").is_file() || d.join("train-images-idx3-ubyte.gz").is_file())
}

fn main() -> ExitCode {
    let only: Option<Vec<u8>> = std::env::var("DIVTC_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let slow = std::env::var("DIVTC_SLOW").is_ok_and(|v| v == "1");
    let strict = std::env::var("DIVTC_STRICT").is_ok_and(|v| v == "1");
    let mnist = mnist_dir();
    let criteria: [(u8, &str, Box<dyn Fn() -> Verdict>); 8] = [
        (1, "gradient correctness", Box::new(gradient_correctness)),
        (2, "estimator-oracle agreement", Box::new(estimator_oracle_agreement)),
        (3, "dataset arithmetic", Box::new(|| with_mnist(&mnist, dataset_arithmetic))),
        (4, "desk-scale trend replication", Box::new(|| with_mnist(&mnist, desk_scale_trend))),
        (
            5,
            "full replication",
            Box::new(|| if slow { with_mnist(&mnist, full_replication) } else { skip("slow suite; set DIVTC_SLOW=1") }),
        ),
        (
            6,
            "ablation ordering",
            Box::new(|| if slow { with_mnist(&mnist, ablation_ordering) } else { skip("slow suite; set DIVTC_SLOW=1") }),
        ),
        (7, "determinism", Box::new(|| with_mnist(&mnist, determinism))),
        (8, "contract suite", Box::new(contract_suite)),
    ];
    let mut failed = 0;
    for (id, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let tag = match v.status {
            Status::Pass => "PASS",
            Status::Fail => {
                if strict || !(4..=6).contains(id) {
                    failed += 1;
                }
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!(
            "criterion {id} {name}: {tag} ({}; {:.1}s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} blocking criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn with_mnist(dir: &Option<PathBuf>, f: impl Fn(&Path) -> Verdict) -> Verdict {
    match dir {
        Some(d) => f(d),
        None => fail("MNIST not found; set DIVTC_MNIST_DIR or link data/mnist"),
    }
}

// ---------------------------------------------------------------- criterion 1

const STEP: f64 = 1e-5;
const TRIALS: usize = 100;

fn random_vec(r: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

/// Values at least 0.05 from zero, so relu kinks stay outside the step.
fn signed_away_from_zero(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.gen_range(0.05..2.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn project(tape: &mut Tape, y: NodeId, weights: &[f64]) -> Result<NodeId, EngineError> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len();
    let w = tape.constant(Tensor::new(shape, weights[..n].to_vec())?);
    let p = tape.mul(y, w)?;
    tape.mean_all(p)
}

/// Worst relative error of `kind` over inputs `args`, checked against each input in turn.
fn op_error(kind: &OpKind, args: &[Tensor], weights: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for which in 0..args.len() {
        let err = grad_check(
            |t, leaf| {
                let inputs: Vec<NodeId> = args
                    .iter()
                    .enumerate()
                    .map(|(i, a)| if i == which { leaf } else { t.constant(a.clone()) })
                    .collect();
                let y = t.apply(kind.clone(), &inputs)?;
                project(t, y, weights)
            },
            &args[which],
            STEP,
        )
        .expect("finite op");
        worst = worst.max(err);
    }
    worst
}

fn op_trial(op: usize, r: &mut Rng) -> (&'static str, f64) {
    let (rows, cols, inner) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let w = random_vec(r, 64, -2.0, 2.0);
    let m = |r: &mut Rng, a: usize, b: usize| Tensor::matrix(a, b, random_vec(r, a * b, -2.0, 2.0)).unwrap();
    match op {
        0 => ("matmul", op_error(&OpKind::MatMul, &[m(r, rows, inner), m(r, inner, cols)], &w)),
        1 => {
            let b = Tensor::vector(random_vec(r, cols, -2.0, 2.0));
            ("add_bias", op_error(&OpKind::AddBias, &[m(r, rows, cols), b], &w))
        }
        2 => ("add", op_error(&OpKind::Add, &[m(r, rows, cols), m(r, rows, cols)], &w)),
        3 => ("sub", op_error(&OpKind::Sub, &[m(r, rows, cols), m(r, rows, cols)], &w)),
        4 => ("mul", op_error(&OpKind::Mul, &[m(r, rows, cols), m(r, rows, cols)], &w)),
        5 => ("scale", op_error(&OpKind::Scale(r.gen_range(-3.0..3.0)), &[m(r, rows, cols)], &w)),
        6 => {
            let x = Tensor::matrix(rows, cols, signed_away_from_zero(r, rows * cols)).unwrap();
            ("relu", op_error(&OpKind::Relu, &[x], &w))
        }
        7 => {
            let x = Tensor::matrix(rows, cols, signed_away_from_zero(r, rows * cols)).unwrap();
            ("leaky_relu", op_error(&OpKind::LeakyRelu(r.gen_range(0.0..0.5)), &[x], &w))
        }
        8 => {
            let x = Tensor::matrix(rows, cols, signed_away_from_zero(r, rows * cols)).unwrap();
            ("l2_normalize_rows", op_error(&OpKind::L2NormalizeRows { eps: 1e-12 }, &[x], &w))
        }
        9 => ("concat_cols", op_error(&OpKind::ConcatCols, &[m(r, rows, cols), m(r, rows, inner)], &w)),
        10 => {
            let idx: Vec<usize> = (0..r.gen_range(1..8)).map(|_| r.gen_range(0..rows)).collect();
            ("gather_rows", op_error(&OpKind::GatherRows(idx), &[m(r, rows, cols)], &w))
        }
        11 => {
            let axis = r.gen_range(0..2);
            ("logsumexp", op_error(&OpKind::LogSumExp { axis }, &[m(r, rows, cols)], &w))
        }
        12 => {
            let axis = r.gen_range(0..2);
            ("mean", op_error(&OpKind::Mean { axis }, &[m(r, rows, cols)], &w))
        }
        13 => ("reshape", op_error(&OpKind::Reshape(vec![cols * rows]), &[m(r, rows, cols)], &w)),
        14 => {
            let x = m(r, rows, cols);
            let err = grad_check(|t, leaf| t.mean_all(leaf), &x, STEP).unwrap();
            ("mean_all", err)
        }
        15 => {
            let x = m(r, rows, cols);
            let err = grad_check(|t, leaf| t.logsumexp_all(leaf), &x, STEP).unwrap();
            ("logsumexp_all", err)
        }
        _ => {
            let x = Tensor::matrix(rows, 2, random_vec(r, rows * 2, -4.0, 4.0)).unwrap();
            let targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..2)).collect();
            ("softmax_cross_entropy", op_error(&OpKind::SoftmaxCrossEntropy(targets), &[x], &[1.0]))
        }
    }
}

/// Random tiny collection, critic and labelled batch for the full objective.
fn objective_fixture(seed: u64) -> (ModelCollection, Critic, TrainConfig, Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, 900);
    let (k, d) = (12, 10);
    let collection = ModelCollection::init(2, d, seed);
    let critic = Critic::for_collection(2, seed);
    let cfg = TrainConfig {
        n_models: 2,
        m: 6,
        rng_seed: seed,
        ..TrainConfig::default()
    };
    let x = Tensor::matrix(k, d, random_vec(&mut r, k * d, -1.0, 1.0)).unwrap();
    let y: Vec<usize> = (0..k).map(|i| if i < 4 { i % 2 } else { r.gen_range(0..2) }).collect();
    (collection, critic, cfg, x, y)
}

/// Finite differences of the whole training objective at randomly chosen θ
/// and φ coordinates, with the permutations held fixed.
fn objective_trial(seed: u64) -> (f64, f64) {
    let (collection, critic, cfg, x, y) = objective_fixture(seed);
    let plans = rng::stream(seed, 901);
    let g = objective_gradients(&collection, Some(&critic), &cfg, x.clone(), &y, &mut plans.clone()).unwrap();
    let value = |c: &ModelCollection, f: &Critic| objective_value(c, Some(f), &cfg, x.clone(), &y, &mut plans.clone()).unwrap();
    let rel = |a: f64, n: f64| (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
    let mut r = rng::stream(seed, 902);
    let (mut theta_err, mut phi_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..3 {
        let ti = r.gen_range(0..g.theta.len());
        let ci = r.gen_range(0..g.theta[ti].len());
        let fd = {
            let mut plus = collection.clone();
            plus.tensors_mut()[ti].data_mut()[ci] += STEP;
            let mut minus = collection.clone();
            minus.tensors_mut()[ti].data_mut()[ci] -= STEP;
            (value(&plus, &critic) - value(&minus, &critic)) / (2.0 * STEP)
        };
        theta_err = theta_err.max(rel(g.theta[ti].data()[ci], fd));

        let pi = r.gen_range(0..g.phi.len());
        let cj = r.gen_range(0..g.phi[pi].len());
        let fd = {
            let mut plus = critic.clone();
            plus.tensors_mut()[pi].data_mut()[cj] += STEP;
            let mut minus = critic.clone();
            minus.tensors_mut()[pi].data_mut()[cj] -= STEP;
            (value(&collection, &plus) - value(&collection, &minus)) / (2.0 * STEP)
        };
        phi_err = phi_err.max(rel(g.phi[pi].data()[cj], fd));
    }
    (theta_err, phi_err)
}

fn gradient_correctness() -> Verdict {
    const TOL: f64 = 1e-4;
    let mut r = rng::stream(2024, 0);
    let mut worst_op = ("none", 0.0f64);
    for op in 0..17 {
        for _ in 0..TRIALS {
            let (name, err) = op_trial(op, &mut r);
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
    }
    let (mut theta, mut phi) = (0.0f64, 0.0f64);
    for seed in 0..TRIALS as u64 {
        let (t, p) = objective_trial(seed);
        theta = theta.max(t);
        phi = phi.max(p);
    }
    verdict(
        worst_op.1 < TOL && theta < TOL && phi < TOL,
        format!(
            "17 ops x {TRIALS} trials, worst {} {:.1e}; objective x {TRIALS} trials, theta {:.1e}, phi {:.1e}; tol {TOL:.0e}",
            worst_op.0, worst_op.1, theta, phi
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn estimator_oracle_agreement() -> Verdict {
    let settings = ProbeSettings::default();
    let seeds = [0, 1, 2, 3, 4];
    let mut worst = (String::new(), 0.0f64);
    for sys in binary_systems() {
        for grouping in [Grouping::Conditional, Grouping::Unconditional] {
            let oracle = sys.oracle(grouping);
            let est = median_trained_estimate(&sys, grouping, &seeds, &settings).expect("estimator runs");
            let gap = (est - oracle).abs();
            if gap >= worst.1 {
                worst = (format!("{} {grouping:?}", sys.name), gap);
            }
        }
    }
    let truth = gaussian_mi_oracle(0.8).unwrap();
    let mut g: Vec<f64> = (0..3).map(|s| gaussian_infonce(0.8, s, 1500, 64).unwrap()).collect();
    let gauss = median(&mut g);
    verdict(
        worst.1 <= 0.05 && (0.35..=0.511).contains(&gauss),
        format!(
            "worst |TC-hat - oracle| {:.3} nats ({}); Gaussian rho=0.8 InfoNCE {gauss:.3} vs {truth:.4}",
            worst.1, worst.0
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn dataset_arithmetic(dir: &Path) -> Verdict {
    let raw = load_mnist(dir, MnistSplit::Train).unwrap().take(50_000);
    let cfg = GeneratorConfig::default();
    let c = dataset_stats(&make_cmnist_train(&raw, &cfg).unwrap());
    let t = dataset_stats(&make_tcmnist_train(&raw, &cfg).unwrap());
    let colour2 = t.colour2_agreement.unwrap_or(f64::NAN);
    let ok = (0.84..=0.86).contains(&c.colour_agreement)
        && (0.74..=0.76).contains(&c.digit_agreement)
        && (0.74..=0.76).contains(&colour2)
        && c.n == 50_000;
    verdict(
        ok,
        format!(
            "n {}, colour {:.4}, digit {:.4}, TC-MNIST colour2 {:.4}",
            c.n, c.colour_agreement, c.digit_agreement, colour2
        ),
    )
}

// ---------------------------------------------------------------- criteria 4-6

fn experiment(dir: &Path, out: &Path, pairs: &str) -> RunOutcome {
    let text = format!("{pairs}\nmnist_dir = {}\noutput_dir = {}\n", dir.display(), out.display());
    let cfg = ExperimentConfig::from_pairs(&divtc::config::parse_pairs(&text).unwrap()).unwrap();
    let outcome = run_experiment(&cfg, true).expect("experiment runs");
    assert!(outcome.succeeded(), "seed failures: {:?}", outcome.manifest.failures);
    outcome
}

fn acc(o: &RunOutcome, condition: &str, p: Protocol) -> f64 {
    100.0 * o.table.get(condition, p).map_or(f64::NAN, |r| r.mean)
}

fn desk_scale_trend(dir: &Path) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let common = "variant = cmnist\nepochs = 50\nseeds = 0,1,2";
    let tc = experiment(dir, &tmp.path().join("tc"), &format!("{common}\nmethod = conditional_tc\nn_models = 2"));
    let erm = experiment(dir, &tmp.path().join("erm"), &format!("{common}\nmethod = erm"));
    let (tl, el) = (acc(&tc, "digit_only", Protocol::Linear), acc(&erm, "digit_only", Protocol::Linear));
    let (tb, eb) = (acc(&tc, "digit_only", Protocol::Best), acc(&erm, "digit_only", Protocol::Best));
    verdict(
        tl - el >= 5.0 && tb >= 60.0 && eb <= 55.0,
        format!("Linear TC {tl:.1} vs ERM {el:.1}; Best TC {tb:.1}, ERM {eb:.1}"),
    )
}

fn within(v: f64, target: f64, tol: f64) -> bool {
    (v - target).abs() <= tol
}

fn full_replication(dir: &Path) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let c = experiment(dir, &tmp.path().join("c"), "variant = cmnist\nmethod = conditional_tc");
    let e = experiment(dir, &tmp.path().join("e"), "variant = cmnist\nmethod = erm");
    let r = experiment(dir, &tmp.path().join("r"), "variant = rcmnist\nmethod = conditional_tc");
    let t = experiment(dir, &tmp.path().join("t"), "variant = tcmnist\nmethod = conditional_tc\nn_models = 3");
    let cl = acc(&c, "digit_only", Protocol::Linear);
    let ce = acc(&c, "digit_only", Protocol::Ensemble);
    let cb = acc(&c, "digit_only", Protocol::Best);
    let eb = acc(&e, "digit_only", Protocol::Best);
    let rl = acc(&r, "digit_only", Protocol::Linear);
    let tl = acc(&t, "colour2_only", Protocol::Linear);
    let ok = [cl, ce, cb].iter().all(|&v| within(v, 69.8, 3.0))
        && within(eb, 50.3, 2.0)
        && within(rl, 71.3, 3.0)
        && tl >= 74.0;
    verdict(
        ok,
        format!("C-MNIST TC L/E/B {cl:.1}/{ce:.1}/{cb:.1}, ERM Best {eb:.1}, RC-MNIST TC Linear {rl:.1}, TC-MNIST colour2 Linear {tl:.1}"),
    )
}

fn ablation_ordering(dir: &Path) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let c = experiment(dir, &tmp.path().join("c"), "variant = cmnist\nmethod = conditional_tc");
    let u = experiment(dir, &tmp.path().join("u"), "variant = cmnist\nmethod = unconditional_tc");
    let (cl, ul) = (acc(&c, "digit_only", Protocol::Linear), acc(&u, "digit_only", Protocol::Linear));
    verdict(cl > ul, format!("Linear conditional {cl:.1} vs unconditional {ul:.1}"))
}

// ---------------------------------------------------------------- criterion 7

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with("manifest.json") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(dir: &Path) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = "variant = tcmnist\nmethod = conditional_tc\nn_models = 2\nepochs = 1\ntrain_size = 2000\n\
                 critic_steps_per_model_step = 2\nseeds = 7\nlr = 0.0001";
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        experiment(dir, &out, pairs);
        let text = format!("{pairs}\nmnist_dir = {}\noutput_dir = {}\n", dir.display(), out.display());
        let cfg = ExperimentConfig::from_pairs(&divtc::config::parse_pairs(&text).unwrap()).unwrap();
        let gen = divtc::generate_datasets(&cfg).unwrap();
        assert!(gen.iter().all(|r| r.result.is_ok()));
        trees.push(tree_bytes(&out));
    }
    let files = trees[0].len();
    let same = trees[0] == trees[1];
    let kinds = ["datasets/", "metrics.jsonl", "checkpoint_", "evaluation.json", "results.csv"];
    let covered = kinds
        .iter()
        .all(|k| trees[0].iter().any(|(p, _)| p.to_string_lossy().contains(k)));
    verdict(
        same && covered,
        format!("{files} artifacts (datasets, metrics, checkpoints, evaluations, results) identical across two runs: {same}"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn toy_dataset(n: usize) -> divtc_core::data::ColoredDataset {
    make_cmnist_train(&divtc_core::data::synthetic_digits(n, 5), &GeneratorConfig::default()).unwrap()
}

fn contract_suite() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |cond: bool, what: &str| {
        if !cond {
            ok = false;
            notes.push(what.to_string());
        }
    };

    let ds = toy_dataset(128);
    let rows: Vec<usize> = (0..32).collect();
    let cfg = TrainConfig {
        n_models: 2,
        batch_size: 32,
        m: 8,
        epochs: 2,
        lr: 1e-3,
        rng_seed: 3,
        ..TrainConfig::default()
    };

    // Alternation: each step touches only its own parameters.
    let mut st = TrainState::new(&cfg, ds.input_dim()).unwrap();
    let (theta, phi) = (st.theta_digest(), st.phi_digest());
    st.critic_step(&ds, &rows).unwrap();
    check(st.theta_digest() == theta && st.phi_digest() != phi, "critic step isolation");
    let phi = st.phi_digest();
    st.model_step(&ds, &rows).unwrap();
    check(st.phi_digest() == phi && st.theta_digest() != theta, "model step isolation");

    // beta = 0 is independent ERM, member by member.
    let half: Vec<usize> = (0..64).collect();
    let rest: Vec<usize> = (64..128).collect();
    let at = ds.subset(&half, Role::AdaptTrain).unwrap();
    let av = ds.subset(&rest, Role::AdaptVal).unwrap();
    let targets = [ValidationTarget {
        condition: "toy",
        adapt_train: &at,
        adapt_val: &av,
    }];
    let zero = TrainConfig { beta: 0.0, ..cfg.clone() };
    let joint = train_collection(&ds, &targets, &zero, |_| {}).unwrap();
    let init = ModelCollection::init(2, ds.input_dim(), zero.rng_seed);
    for (i, member) in init.members.iter().enumerate() {
        let solo_cfg = TrainConfig { rng_seed: zero.rng_seed, ..zero.clone() };
        let solo = TrainState::from_collection(&solo_cfg, ModelCollection { members: vec![member.clone()] }).unwrap();
        let solo = train_from(solo, &ds, &targets, |_| {}).unwrap();
        check(solo.collection.members[0] == joint.collection.members[i], "beta=0 equals ERM");
    }

    // Earliest epoch wins ties.
    check(checkpoint_select(&[0.6, 0.7, 0.7]) == Some(1), "checkpoint tie-break");
    check(checkpoint_select(&[0.5, 0.6, 0.8]) == Some(2), "checkpoint monotone");

    // Protocols read the collection without changing it, and agree on repeats.
    let shifted = divtc_core::data::ShiftedSplits {
        shift: divtc_core::data::Shift::DigitOnly,
        adapt_train: at.clone(),
        adapt_val: av.clone(),
        adapt_test: ds.subset(&rest, Role::AdaptTest).unwrap(),
    };
    let before = joint.collection.digest();
    let e1 = evaluate_protocols(&joint.collection, &shifted, 0, "toy").unwrap();
    let e2 = evaluate_protocols(&joint.collection, &shifted, 0, "toy").unwrap();
    check(joint.collection.digest() == before && e1 == e2, "protocol purity");

    // IDX error paths.
    let mut bad = 0x0000_0999u32.to_be_bytes().to_vec();
    bad.extend([0, 0, 0, 1]);
    check(parse_idx(&bad).is_err(), "idx bad magic");
    let mut short = IMAGES_MAGIC.to_be_bytes().to_vec();
    short.extend(2u32.to_be_bytes());
    short.extend(28u32.to_be_bytes());
    short.extend(28u32.to_be_bytes());
    short.extend([0u8; 100]);
    check(parse_idx(&short).is_err(), "idx truncated payload");
    check(parse_idx(&[0, 0]).is_err(), "idx truncated header");
    let missing = load_mnist(Path::new("/nonexistent-mnist"), MnistSplit::Test);
    check(
        missing.is_err_and(|e| e.to_string().contains("/nonexistent-mnist")),
        "idx missing file names path",
    );

    verdict(
        ok,
        if notes.is_empty() {
            "alternation, beta=0 equivalence, tie-break, protocol purity, IDX errors".into()
        } else {
            format!("broken: {}", notes.join(", "))
        },
    )
}
