use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{
    ColoredDataset, DataError, GeneratorConfig, Provenance, RawDigits, Role, Shift, Variant, PLANE,
    SIDE,
};
use crate::diffengine::Tensor;
use crate::rng;

pub const ADAPT_TRAIN_SIZE: usize = 500;
pub const ADAPT_VAL_SIZE: usize = 500;
pub const ADAPT_TEST_SIZE: usize = 9000;
pub const SHIFTED_POOL_SIZE: usize = ADAPT_TRAIN_SIZE + ADAPT_VAL_SIZE + ADAPT_TEST_SIZE;

/// 2×2 mean pooling of a 28×28 image.
pub fn pool_2x2(image: &[f64]) -> Vec<f64> {
    debug_assert_eq!(image.len(), 784);
    let mut out = vec![0.0; PLANE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let at = |dr: usize, dc: usize| image[(2 * r + dr) * 28 + 2 * c + dc];
            out[r * SIDE + c] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
        }
    }
    out
}

/// Quarter turn of a 14×14 plane: `out[r][c] = in[c][13 − r]`.
pub fn rotate90(plane: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; PLANE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            out[r * SIDE + c] = plane[c * SIDE + (SIDE - 1 - r)];
        }
    }
    out
}

/// An example before its input row is assembled.
struct Draft {
    plane: Vec<f64>,
    label: u8,
    prov: Provenance,
}

fn bit(b: bool) -> u8 {
    u8::from(b)
}

fn check_raw(raw: &RawDigits, cfg: &GeneratorConfig) -> Result<(), DataError> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(())
}

/// Label noise and environment-dependent colour, in raw order.
fn base_drafts(raw: &RawDigits, cfg: &GeneratorConfig, random_colour: bool) -> Vec<Draft> {
    let mut rng = rng::stream(cfg.rng_seed, rng::DATA_LABELS);
    let n = raw.len();
    let envs = cfg.colour_flip_probs_per_env.len();
    (0..n)
        .map(|i| {
            let digit_group = bit(raw.digit(i) >= 5);
            let label = digit_group ^ bit(rng.gen_bool(cfg.label_flip_prob));
            let env = i * envs / n;
            let colour_noise = rng.gen_bool(cfg.colour_flip_probs_per_env[env]);
            let coin = rng.gen_bool(0.5);
            let colour_bit = if random_colour {
                bit(coin)
            } else {
                label ^ bit(colour_noise)
            };
            Draft {
                plane: pool_2x2(raw.image(i)),
                label,
                prov: Provenance {
                    digit_group,
                    clean_label: digit_group,
                    colour_bit,
                    colour2_bit: None,
                    common_cause_bit: None,
                },
            }
        })
        .collect()
}

/// Common cause: rotate and, for training sets, flip the colour with some probability.
fn apply_common_cause(drafts: &mut [Draft], cfg: &GeneratorConfig, perturb_colour: bool) {
    let mut rng = rng::stream(cfg.rng_seed, rng::DATA_COMMON_CAUSE);
    for d in drafts.iter_mut() {
        let cause = rng.gen_bool(0.5);
        let flip = rng.gen_bool(cfg.rotation_flip_prob);
        d.prov.common_cause_bit = Some(bit(cause));
        if cause {
            d.plane = rotate90(&d.plane);
            if perturb_colour {
                d.prov.colour_bit ^= bit(flip);
            }
        }
    }
}

fn apply_colour2(drafts: &mut [Draft], cfg: &GeneratorConfig, informative: bool) {
    let mut rng = rng::stream(cfg.rng_seed, rng::DATA_COLOUR2);
    for d in drafts.iter_mut() {
        let noise = rng.gen_bool(cfg.colour2_flip_prob);
        let coin = rng.gen_bool(0.5);
        d.prov.colour2_bit = Some(if informative { d.label ^ bit(noise) } else { bit(coin) });
    }
}

/// Replaces every image by one drawn uniformly from the pool, decoupling digit from label.
fn randomize_images(drafts: &mut [Draft], raw: &RawDigits, cfg: &GeneratorConfig) {
    let mut rng = rng::stream(cfg.rng_seed, rng::DATA_IMAGE_SWAP);
    for d in drafts.iter_mut() {
        let j = rng.gen_range(0..raw.len());
        d.plane = pool_2x2(raw.image(j));
        d.prov.digit_group = bit(raw.digit(j) >= 5);
    }
}

fn assemble(
    mut drafts: Vec<Draft>,
    variant: Variant,
    role: Role,
    cfg: &GeneratorConfig,
) -> Result<ColoredDataset, DataError> {
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.shuffle(&mut rng::stream(cfg.rng_seed, rng::DATA_SHUFFLE));
    let channels = variant.channels();
    let width = channels * PLANE;
    let mut inputs = vec![0.0; drafts.len() * width];
    let mut labels = Vec::with_capacity(drafts.len());
    let mut provenance = Vec::with_capacity(drafts.len());
    for (row, &src) in order.iter().enumerate() {
        let d = &mut drafts[src];
        let out = &mut inputs[row * width..(row + 1) * width];
        let c = d.prov.colour_bit as usize;
        out[c * PLANE..(c + 1) * PLANE].copy_from_slice(&d.plane);
        if channels == 3 && d.prov.colour2_bit == Some(1) {
            out[2 * PLANE..].fill(1.0);
        }
        labels.push(d.label);
        provenance.push(d.prov);
        d.plane = Vec::new();
    }
    Ok(ColoredDataset {
        variant,
        role,
        rng_seed: cfg.rng_seed,
        inputs: Tensor::matrix(labels.len(), width, inputs)?,
        labels,
        provenance,
    })
}

fn require_unshifted(cfg: &GeneratorConfig) -> Result<(), DataError> {
    if cfg.shift != Shift::None {
        return Err(DataError::InvalidConfig(format!(
            "training sets take shift=none, got {}",
            cfg.shift
        )));
    }
    Ok(())
}

/// Colored MNIST with its two colour environments collapsed into one set.
pub fn make_cmnist_train(raw: &RawDigits, cfg: &GeneratorConfig) -> Result<ColoredDataset, DataError> {
    check_raw(raw, cfg)?;
    require_unshifted(cfg)?;
    assemble(base_drafts(raw, cfg, false), Variant::CMnist, Role::Train, cfg)
}

/// C-MNIST plus a common cause that rotates the digit and perturbs the colour.
pub fn make_rcmnist_train(raw: &RawDigits, cfg: &GeneratorConfig) -> Result<ColoredDataset, DataError> {
    check_raw(raw, cfg)?;
    require_unshifted(cfg)?;
    let mut drafts = base_drafts(raw, cfg, false);
    apply_common_cause(&mut drafts, cfg, true);
    assemble(drafts, Variant::RcMnist, Role::Train, cfg)
}

/// C-MNIST plus a second colour signal carried by a constant third channel.
pub fn make_tcmnist_train(raw: &RawDigits, cfg: &GeneratorConfig) -> Result<ColoredDataset, DataError> {
    check_raw(raw, cfg)?;
    require_unshifted(cfg)?;
    let mut drafts = base_drafts(raw, cfg, false);
    apply_colour2(&mut drafts, cfg, true);
    assemble(drafts, Variant::TcMnist, Role::Train, cfg)
}

pub fn make_train(
    variant: Variant,
    raw: &RawDigits,
    cfg: &GeneratorConfig,
) -> Result<ColoredDataset, DataError> {
    match variant {
        Variant::CMnist => make_cmnist_train(raw, cfg),
        Variant::RcMnist => make_rcmnist_train(raw, cfg),
        Variant::TcMnist => make_tcmnist_train(raw, cfg),
    }
}

/// The three adaptation splits of a shifted test distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedSplits {
    pub shift: Shift,
    pub adapt_train: ColoredDataset,
    pub adapt_val: ColoredDataset,
    pub adapt_test: ColoredDataset,
}

/// A test distribution in which exactly one training-time signal stays predictive.
///
/// `raw` should be held-out digits; the first 10000 shuffled examples are
/// split 500 / 500 / 9000.
pub fn make_shifted_testset(
    variant: Variant,
    raw: &RawDigits,
    cfg: &GeneratorConfig,
) -> Result<ShiftedSplits, DataError> {
    cfg.validate()?;
    if raw.len() < SHIFTED_POOL_SIZE {
        return Err(DataError::TooFewExamples {
            needed: SHIFTED_POOL_SIZE,
            available: raw.len(),
        });
    }
    let mut drafts = base_drafts(raw, cfg, true);
    match (cfg.shift, variant) {
        (Shift::None, _) => {
            return Err(DataError::InvalidConfig("shifted test sets need a shift".into()))
        }
        (Shift::Colour2Only, Variant::CMnist | Variant::RcMnist) => {
            return Err(DataError::InvalidConfig(format!(
                "{variant} has no second colour signal"
            )))
        }
        (Shift::DigitOnly, _) => {}
        (Shift::Colour2Only, Variant::TcMnist) => randomize_images(&mut drafts, raw, cfg),
    }
    if variant == Variant::RcMnist {
        apply_common_cause(&mut drafts, cfg, false);
    }
    if variant == Variant::TcMnist {
        apply_colour2(&mut drafts, cfg, cfg.shift == Shift::Colour2Only);
    }
    let full = assemble(drafts, variant, Role::AdaptTest, cfg)?;
    let rows: Vec<usize> = (0..SHIFTED_POOL_SIZE).collect();
    let (tr, rest) = rows.split_at(ADAPT_TRAIN_SIZE);
    let (va, te) = rest.split_at(ADAPT_VAL_SIZE);
    Ok(ShiftedSplits {
        shift: cfg.shift,
        adapt_train: full.subset(tr, Role::AdaptTrain)?,
        adapt_val: full.subset(va, Role::AdaptVal)?,
        adapt_test: full.subset(te, Role::AdaptTest)?,
    })
}

/// Empirical agreement of each provenance signal with the corrupted label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub n: usize,
    pub digit_agreement: f64,
    pub colour_agreement: f64,
    pub colour2_agreement: Option<f64>,
    /// Fraction of examples with label 1.
    pub class_balance: f64,
}

pub fn dataset_stats(ds: &ColoredDataset) -> DatasetStats {
    let n = ds.len().max(1) as f64;
    let rate = |f: &dyn Fn(&Provenance, u8) -> bool| {
        ds.provenance
            .iter()
            .zip(&ds.labels)
            .filter(|(p, &l)| f(p, l))
            .count() as f64
            / n
    };
    let has_colour2 = ds.provenance.iter().all(|p| p.colour2_bit.is_some()) && !ds.is_empty();
    DatasetStats {
        n: ds.len(),
        digit_agreement: rate(&|p, l| p.digit_group == l),
        colour_agreement: rate(&|p, l| p.colour_bit == l),
        colour2_agreement: has_colour2.then(|| rate(&|p, l| p.colour2_bit == Some(l))),
        class_balance: ds.labels.iter().filter(|&&l| l == 1).count() as f64 / n,
    }
}

/// Toy 28×28 digits for tests and smoke runs: digit `d` lights a distinct 4×4 block.
pub fn synthetic_digits(n: usize, seed: u64) -> RawDigits {
    let mut r = rng::stream(seed, 99);
    let mut data = vec![0.0; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let d: u8 = r.gen_range(0..10);
        labels.push(d);
        let (br, bc) = (2 + (d as usize / 5) * 12, 2 + (d as usize % 5) * 5);
        for dr in 0..4 {
            for dc in 0..4 {
                data[i * 784 + (br + dr) * 28 + bc + dc] = r.gen_range(0.5..1.0);
            }
        }
    }
    RawDigits::new(Tensor::new(vec![n, 28, 28], data).unwrap(), labels).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;


    fn noiseless() -> GeneratorConfig {
        GeneratorConfig {
            label_flip_prob: 0.0,
            colour_flip_probs_per_env: vec![0.0, 0.0],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn noiseless_limit_aligns_all_signals() {
        let ds = make_cmnist_train(&synthetic_digits(400, 1), &noiseless()).unwrap();
        for (p, &l) in ds.provenance.iter().zip(&ds.labels) {
            assert_eq!(l, p.clean_label);
            assert_eq!(l, p.colour_bit);
        }
    }

    #[test]
    fn digit_sits_in_the_colour_channel_only() {
        let ds = make_rcmnist_train(&synthetic_digits(300, 2), &GeneratorConfig::default()).unwrap();
        for i in 0..ds.len() {
            let row = ds.inputs.row(i);
            let c = ds.provenance[i].colour_bit as usize;
            assert!(row[c * PLANE..(c + 1) * PLANE].iter().any(|&v| v > 0.0));
            assert!(row[(1 - c) * PLANE..(2 - c) * PLANE].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rotation_has_order_four() {
        let plane: Vec<f64> = (0..PLANE).map(|v| v as f64).collect();
        let once = rotate90(&plane);
        assert_ne!(once, plane);
        let four = rotate90(&rotate90(&rotate90(&once)));
        assert_eq!(four, plane);
    }

    #[test]
    fn pooling_averages_blocks() {
        let mut img = vec![0.0; 784];
        img[0] = 1.0;
        img[1] = 0.5;
        img[28] = 0.5;
        let p = pool_2x2(&img);
        assert_eq!(p[0], 0.5);
        assert!(p[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let raw = synthetic_digits(200, 3);
        let cfg = GeneratorConfig {
            rng_seed: 11,
            ..GeneratorConfig::default()
        };
        assert_eq!(make_tcmnist_train(&raw, &cfg).unwrap(), make_tcmnist_train(&raw, &cfg).unwrap());
        let other = GeneratorConfig { rng_seed: 12, ..cfg.clone() };
        assert_ne!(make_tcmnist_train(&raw, &cfg).unwrap(), make_tcmnist_train(&raw, &other).unwrap());
    }

    #[test]
    fn unrotated_rcmnist_rows_match_cmnist() {
        let raw = synthetic_digits(300, 4);
        let cfg = GeneratorConfig::default();
        let c = make_cmnist_train(&raw, &cfg).unwrap();
        let rc = make_rcmnist_train(&raw, &cfg).unwrap();
        let mut rotated = 0;
        for i in 0..c.len() {
            if rc.provenance[i].common_cause_bit == Some(0) {
                assert_eq!(c.inputs.row(i), rc.inputs.row(i));
                assert_eq!(c.labels[i], rc.labels[i]);
            } else {
                rotated += 1;
            }
        }
        assert!(rotated > 100 && rotated < 200);
    }

    #[test]
    fn tcmnist_first_channels_match_cmnist() {
        let raw = synthetic_digits(200, 5);
        let cfg = GeneratorConfig::default();
        let c = make_cmnist_train(&raw, &cfg).unwrap();
        let tc = make_tcmnist_train(&raw, &cfg).unwrap();
        for i in 0..c.len() {
            assert_eq!(c.inputs.row(i), &tc.inputs.row(i)[..2 * PLANE]);
            let third = &tc.inputs.row(i)[2 * PLANE..];
            let expected = f64::from(tc.provenance[i].colour2_bit.unwrap());
            assert!(third.iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn shifted_splits_have_fixed_sizes() {
        let raw = synthetic_digits(SHIFTED_POOL_SIZE + 50, 6);
        let cfg = GeneratorConfig {
            shift: Shift::DigitOnly,
            ..GeneratorConfig::default()
        };
        let s = make_shifted_testset(Variant::CMnist, &raw, &cfg).unwrap();
        assert_eq!(
            (s.adapt_train.len(), s.adapt_val.len(), s.adapt_test.len()),
            (500, 500, 9000)
        );
        let all = [&s.adapt_train, &s.adapt_val, &s.adapt_test];
        let colour: f64 = all.iter().map(|d| dataset_stats(d).colour_agreement * d.len() as f64).sum::<f64>()
            / SHIFTED_POOL_SIZE as f64;
        assert!((colour - 0.5).abs() < 0.02, "colour agreement {colour}");
    }

    #[test]
    fn shifted_set_errors() {
        let cfg = GeneratorConfig {
            shift: Shift::DigitOnly,
            ..GeneratorConfig::default()
        };
        assert!(matches!(
            make_shifted_testset(Variant::CMnist, &synthetic_digits(100, 7), &cfg),
            Err(DataError::TooFewExamples { needed: 10000, available: 100 })
        ));
        let raw = synthetic_digits(SHIFTED_POOL_SIZE, 7);
        let c2 = GeneratorConfig {
            shift: Shift::Colour2Only,
            ..GeneratorConfig::default()
        };
        assert!(make_shifted_testset(Variant::CMnist, &raw, &c2).is_err());
        assert!(make_shifted_testset(Variant::TcMnist, &raw, &GeneratorConfig::default()).is_err());
        assert!(make_cmnist_train(&raw, &cfg).is_err());
    }

    #[test]
    fn colour2_only_decouples_digit() {
        let raw = synthetic_digits(SHIFTED_POOL_SIZE, 8);
        let cfg = GeneratorConfig {
            shift: Shift::Colour2Only,
            ..GeneratorConfig::default()
        };
        let s = make_shifted_testset(Variant::TcMnist, &raw, &cfg).unwrap();
        let st = dataset_stats(&s.adapt_test);
        assert!((st.digit_agreement - 0.5).abs() < 0.03, "{st:?}");
        assert!((st.colour_agreement - 0.5).abs() < 0.03, "{st:?}");
        assert!((st.colour2_agreement.unwrap() - 0.75).abs() < 0.03, "{st:?}");
    }

    #[test]
    fn colour2_without_signal() {
        let cfg = GeneratorConfig {
            colour2_flip_prob: 0.5,
            ..GeneratorConfig::default()
        };
        let ds = make_tcmnist_train(&synthetic_digits(8000, 9), &cfg).unwrap();
        let st = dataset_stats(&ds);
        assert!((st.colour2_agreement.unwrap() - 0.5).abs() < 2.0 / (8000f64).sqrt());
    }

    #[test]
    fn invalid_probability_fails() {
        let raw = synthetic_digits(1, 10);
        let cfg = GeneratorConfig {
            label_flip_prob: 1.5,
            ..GeneratorConfig::default()
        };
        assert!(matches!(make_cmnist_train(&raw, &cfg), Err(DataError::InvalidConfig(_))));
    }
}
