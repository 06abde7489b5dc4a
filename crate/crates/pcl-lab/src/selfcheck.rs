//! In-process verification suite behind `pcl-lab check`: a fast pass over
//! the gradient checks, the direct-summation oracles, the probability
//! inner-product bound, and the closed forms.

use pcl_core::losses::{
    bce_loss, compute_loss, pcl_loss, uniformity_regularizer, LossKind, VariantInputs,
};
use pcl_core::numerics::finite_diff_check_multi;
use pcl_core::training::cross_entropy;
use pcl_core::{LossConfig, ProjectionHead, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.to_string(), passed, detail }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    Tensor::randn(vec![n, c], rng).softmax_rows().unwrap()
}

fn variant_value(kind: LossKind, la: &Tensor, lb: &Tensor, head: &ProjectionHead) -> f64 {
    let cfg = LossConfig::new(kind);
    let tape = Tape::new();
    let fa = tape.constant(la);
    let fb = tape.constant(lb);
    let pa = tape.softmax_rows(fa).unwrap();
    let pb = tape.softmax_rows(fb).unwrap();
    let inputs = VariantInputs { features: (fa, fb), logits: (fa, fb), probs: (pa, pb) };
    let bound = head.bind(&tape);
    let loss = compute_loss(&tape, &cfg, &inputs, Some(&bound)).unwrap();
    tape.value(loss).item().unwrap()
}

fn oracle_value(kind: LossKind, la: &Tensor, lb: &Tensor, head: &ProjectionHead, n: usize, d: usize) -> f64 {
    let pa = la.softmax_rows().unwrap();
    let pb = lb.softmax_rows().unwrap();
    match kind {
        LossKind::Fcl => pcl_oracles::fcl(la.data(), lb.data(), n, d, 7.0, true),
        LossKind::Lcl => pcl_oracles::fcl(la.data(), lb.data(), n, d, 7.0, true),
        LossKind::Sfcl => pcl_oracles::sfcl(la.data(), lb.data(), n, d, 7.0, 0.95, true),
        LossKind::Pcl => pcl_oracles::pcl(pa.data(), pb.data(), n, d, 7.0, true),
        LossKind::PclL2 => pcl_oracles::pcl_l2(pa.data(), pb.data(), n, d, 7.0, true),
        LossKind::PclMse => pcl_oracles::pcl_mse(pa.data(), pb.data(), n, d, 7.0, true),
        LossKind::Bce => pcl_oracles::bce(pa.data(), pb.data(), n, d, 0.95),
        LossKind::Ntcl => {
            let tape = Tape::new();
            let bound = head.bind(&tape);
            let ha = tape.value(bound.apply(&tape, tape.constant(la)).unwrap());
            let hb = tape.value(bound.apply(&tape, tape.constant(lb)).unwrap());
            pcl_oracles::fcl(ha.data(), hb.data(), n, d, 7.0, true)
        }
    }
}

fn gradient_checks() -> CheckOutcome {
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in LossKind::ALL {
        for _ in 0..3 {
            let n = rng.gen_range(2..=4);
            let d = rng.gen_range(2..=5);
            let la = Tensor::randn(vec![n, d], &mut rng);
            let lb = Tensor::randn(vec![n, d], &mut rng);
            let head = ProjectionHead::init(d, &mut rng);
            let err = finite_diff_check_multi(
                |tape, vars| {
                    let cfg = LossConfig::new(kind);
                    let pa = tape.softmax_rows(vars[0])?;
                    let pb = tape.softmax_rows(vars[1])?;
                    let inputs = VariantInputs {
                        features: (vars[0], vars[1]),
                        logits: (vars[0], vars[1]),
                        probs: (pa, pb),
                    };
                    let bound = head.bind(tape);
                    compute_loss(tape, &cfg, &inputs, Some(&bound))
                        .map_err(|e| pcl_core::NumericsError::Contract(e.to_string()))
                },
                &[la, lb],
                1e-5,
            )
            .unwrap();
            if err > worst {
                worst = err;
                worst_name = kind.name().to_string();
            }
        }
    }
    // Supervised terms.
    let logits = Tensor::randn(vec![3, 4], &mut rng);
    let labels = [0usize, 2, 1];
    let err = finite_diff_check_multi(
        |tape, vars| {
            let probs = tape.softmax_rows(vars[0])?;
            cross_entropy(tape, probs, &labels)
                .map_err(|e| pcl_core::NumericsError::Contract(e.to_string()))
        },
        &[logits.clone()],
        1e-5,
    )
    .unwrap();
    if err > worst {
        worst = err;
        worst_name = "cross_entropy".into();
    }
    let err = finite_diff_check_multi(
        |tape, vars| {
            let probs = tape.softmax_rows(vars[0])?;
            uniformity_regularizer(tape, probs)
                .map_err(|e| pcl_core::NumericsError::Contract(e.to_string()))
        },
        &[logits],
        1e-5,
    )
    .unwrap();
    if err > worst {
        worst = err;
        worst_name = "uniformity".into();
    }
    outcome(
        "gradient checks (8 variants + CE + regularizer)",
        worst < 1e-4,
        format!("worst relative error {worst:.2e} ({worst_name})"),
    )
}

fn oracle_checks() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for kind in LossKind::ALL {
        for _ in 0..10 {
            let n = rng.gen_range(1..=4);
            let d = rng.gen_range(2..=5);
            let la = Tensor::randn(vec![n, d], &mut rng);
            let lb = Tensor::randn(vec![n, d], &mut rng);
            let head = ProjectionHead::init(d, &mut rng);
            let got = variant_value(kind, &la, &lb, &head);
            let want = oracle_value(kind, &la, &lb, &head, n, d);
            let diff = (got - want).abs();
            if diff > worst {
                worst = diff;
                worst_name = kind.name().to_string();
            }
        }
    }
    outcome(
        "direct-summation oracles (8 variants, 10 batches each)",
        worst < 1e-9,
        format!("worst absolute difference {worst:.2e} ({worst_name})"),
    )
}

fn bound_check() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let c = rng.gen_range(2..=6);
        let p = random_probs(&mut rng, 1, c);
        let q = random_probs(&mut rng, 1, c);
        let dot: f64 = p.data().iter().zip(q.data()).map(|(a, b)| a * b).sum();
        worst = worst.max(dot);
    }
    outcome(
        "probability inner-product bound (2000 pairs)",
        worst <= 1.0,
        format!("max inner product {worst:.12}"),
    )
}

fn closed_forms() -> CheckOutcome {
    let tape = Tape::new();
    let n = 3;
    let uniform = tape.constant(&Tensor::matrix(n, 4, vec![0.25; n * 4]).unwrap());
    let pcl = pcl_loss(&tape, uniform, uniform, &LossConfig::new(LossKind::Pcl)).unwrap();
    let pcl_err = (tape.value(pcl).item().unwrap() - (2.0 * n as f64 - 1.0).ln()).abs();

    let one_row = tape.constant(&Tensor::matrix(1, 4, vec![0.25; 4]).unwrap());
    let reg = uniformity_regularizer(&tape, one_row).unwrap();
    let reg_err = (tape.value(reg).item().unwrap() - 4f64.ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p1 = random_probs(&mut rng, 1, 4);
    let q1 = random_probs(&mut rng, 1, 4);
    let single = pcl_loss(
        &tape,
        tape.constant(&p1),
        tape.constant(&q1),
        &LossConfig::new(LossKind::Pcl),
    )
    .unwrap();
    let single_value = tape.value(single).item().unwrap();

    let passed = pcl_err < 1e-10 && reg_err < 1e-12 && single_value == 0.0;
    outcome(
        "closed forms (uniform batch, uniform row, single pair)",
        passed,
        format!("log(2N-1) err {pcl_err:.2e}, log C err {reg_err:.2e}, N=1 value {single_value}"),
    )
}

fn bce_saturation_check() -> CheckOutcome {
    let tape = Tape::new();
    let one_hot = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let a = tape.constant(&one_hot);
    let loss = bce_loss(&tape, a, a, &LossConfig::new(LossKind::Bce)).unwrap();
    let value = tape.value(loss).item().unwrap();
    outcome("pairwise BCE saturation (orthogonal one-hot views)", value == 0.0, format!("value {value}"))
}

/// Runs the whole battery and returns one line per check.
pub fn self_check() -> Vec<CheckOutcome> {
    vec![gradient_checks(), oracle_checks(), bound_check(), closed_forms(), bce_saturation_check()]
}
