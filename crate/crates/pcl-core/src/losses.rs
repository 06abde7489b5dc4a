//! The contrastive-loss family: feature-based InfoNCE, probabilistic
//! contrastive learning on raw softmax outputs, and the ablation variants
//! (logits, projection head, re-normalized probabilities, squared-distance
//! similarity, pairwise binary cross-entropy, false-negative filtering),
//! plus the uniformity regularizer used by the pseudo-label auxiliary.
//!
//! Every loss is a pure function from tape variables to a scalar tape
//! variable; each has an independent direct-summation oracle in the test
//! suite.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};

/// Arguments of `log` in the saturating losses are clamped to
/// `[LOG_CLAMP_FLOOR, 1]`; pairwise probability products hit exactly 0 and
/// 1 at one-hot saturation.
pub const LOG_CLAMP_FLOOR: f64 = 1e-12;

/// A probability row must sum to 1 within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Inverse-temperature default for classification-style tasks.
pub const SCALE_CLASSIFICATION: f64 = 7.0;

/// Documented alternative used for dense-prediction tasks.
pub const SCALE_DENSE: f64 = 20.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("view mismatch: {0}")]
    ViewMismatch(String),
    #[error("not a probability row: {0}")]
    NotProbability(String),
    #[error("loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which loss of the family to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Fcl,
    Pcl,
    Lcl,
    Ntcl,
    PclL2,
    PclMse,
    Bce,
    Sfcl,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Fcl,
        LossKind::Pcl,
        LossKind::Lcl,
        LossKind::Ntcl,
        LossKind::PclL2,
        LossKind::PclMse,
        LossKind::Bce,
        LossKind::Sfcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Fcl => "FCL",
            LossKind::Pcl => "PCL",
            LossKind::Lcl => "LCL",
            LossKind::Ntcl => "NTCL",
            LossKind::PclL2 => "PCL_L2",
            LossKind::PclMse => "PCL_MSE",
            LossKind::Bce => "BCE",
            LossKind::Sfcl => "SFCL",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss-variant selector plus the knobs shared across the family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig<F> {
    pub kind: LossKind,
    /// Inverse-temperature factor inside the exponents.
    pub scale: F,
    /// Pairwise-product threshold for the BCE positive indicator.
    pub bce_threshold: F,
    /// Similarity threshold above which negatives are treated as false
    /// negatives and removed.
    pub sfcl_threshold: F,
    /// Average the loss over both query directions. The one-directional
    /// form is available for strict fidelity to the single-query
    /// formulation.
    pub symmetrize: bool,
}

impl<F: Scalar> LossConfig<F> {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            scale: F::lit(SCALE_CLASSIFICATION),
            bce_threshold: F::lit(0.95),
            sfcl_threshold: F::lit(0.95),
            symmetrize: true,
        }
    }

    pub fn with_scale(mut self, scale: F) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > F::zero()) {
            return Err(LossError::Config(format!("scale {} must be positive", self.scale)));
        }
        for (name, t) in [("bce_threshold", self.bce_threshold), ("sfcl_threshold", self.sfcl_threshold)]
        {
            if !(t > F::zero() && t <= F::one()) {
                return Err(LossError::Config(format!("{name} {t} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Model quantities for the two augmented views, in the representation each
/// variant consumes.
#[derive(Clone, Copy)]
pub struct VariantInputs {
    pub features: (Var, Var),
    pub logits: (Var, Var),
    pub probs: (Var, Var),
}

/// Validates that `a` and `b` are equally-shaped matrices holding at least
/// one row, and returns `(rows, cols)`.
fn check_pair<F: Scalar>(tape: &Tape<F>, a: Var, b: Var) -> Result<(usize, usize)> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(LossError::ViewMismatch(format!("{sa:?} vs {sb:?}")));
    }
    if sa[0] == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok((sa[0], sa[1]))
}

fn check_probability_rows<F: Scalar>(tape: &Tape<F>, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    let tol = F::lit(PROB_SUM_TOL);
    for i in 0..t.rows() {
        let row = t.row(i);
        if row.iter().any(|&p| p < F::zero()) {
            return Err(LossError::NotProbability(format!("{what} row {i} has a negative entry")));
        }
        let sum = row.iter().fold(F::zero(), |s, &p| s + p);
        if (sum - F::one()).abs() > tol {
            return Err(LossError::NotProbability(format!("{what} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Optional denominator filtering, indexed `[i * n + j]` for query `i`.
struct DropMasks {
    same: Option<Vec<bool>>,
    cross: Option<Vec<bool>>,
}

impl DropMasks {
    fn none() -> Self {
        Self { same: None, cross: None }
    }
}

/// One query direction of the InfoNCE objective given precomputed
/// similarity matrices: the denominator sums same-view similarities over
/// `j != i` and cross-view similarities over all `k` (the positive `k == i`
/// is always kept), stabilized through a masked log-sum-exp.
fn nce_direction_from_sims<F: Scalar>(
    tape: &Tape<F>,
    n: usize,
    sim_same: Var,
    sim_cross: Var,
    drop: &DropMasks,
    scale: F,
) -> Result<Var> {
    let logits = tape.hcat(tape.mul_scalar(sim_same, scale), tape.mul_scalar(sim_cross, scale))?;
    let width = 2 * n;
    let mut mask = vec![false; n * width];
    for i in 0..n {
        for j in 0..n {
            let dropped_same = drop.same.as_ref().is_some_and(|m| m[i * n + j]);
            mask[i * width + j] = j != i && !dropped_same;
            let dropped_cross = drop.cross.as_ref().is_some_and(|m| m[i * n + j]);
            mask[i * width + n + j] = j == i || !dropped_cross;
        }
    }
    let lse = tape.masked_logsumexp_rows(logits, &mask)?;
    let pos = tape.mul_scalar(tape.take_diag(sim_cross)?, scale);
    let per_query = tape.sub(lse, pos)?;
    Ok(tape.mean(per_query)?)
}

/// Inner-product similarity matrices for queries from `q` against `q`
/// itself and against `other`.
fn inner_product_sims<F: Scalar>(tape: &Tape<F>, q: Var, other: Var) -> Result<(Var, Var)> {
    let qt = tape.transpose(q)?;
    let ot = tape.transpose(other)?;
    Ok((tape.matmul(q, qt)?, tape.matmul(q, ot)?))
}

fn inner_direction<F: Scalar>(tape: &Tape<F>, q: Var, other: Var, scale: F) -> Result<Var> {
    let n = tape.shape(q)[0];
    let (same, cross) = inner_product_sims(tape, q, other)?;
    nce_direction_from_sims(tape, n, same, cross, &DropMasks::none(), scale)
}

fn symmetrized<F: Scalar>(
    tape: &Tape<F>,
    a: Var,
    b: Var,
    symmetrize: bool,
    direction: impl Fn(&Tape<F>, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let fwd = direction(tape, a, b)?;
    if !symmetrize {
        return Ok(fwd);
    }
    let rev = direction(tape, b, a)?;
    let sum = tape.add(fwd, rev)?;
    Ok(tape.mul_scalar(sum, F::lit(0.5)))
}

/// InfoNCE on already-prepared inputs (mean over queries; both directions
/// when `symmetrize` is set). For a single pair the denominator reduces to
/// the positive term and the loss is exactly zero.
pub fn info_nce_core<F: Scalar>(
    tape: &Tape<F>,
    view_a: Var,
    view_b: Var,
    scale: F,
    symmetrize: bool,
) -> Result<Var> {
    check_pair(tape, view_a, view_b)?;
    symmetrized(tape, view_a, view_b, symmetrize, |t, q, o| inner_direction(t, q, o, scale))
}

/// Standard contrastive loss on unit-normalized features.
pub fn fcl_loss<F: Scalar>(tape: &Tape<F>, view_a: Var, view_b: Var, cfg: &LossConfig<F>) -> Result<Var> {
    check_pair(tape, view_a, view_b)?;
    let na = tape.l2_normalize_rows(view_a)?;
    let nb = tape.l2_normalize_rows(view_b)?;
    info_nce_core(tape, na, nb, cfg.scale, cfg.symmetrize)
}

/// Contrastive loss on raw probability rows; deliberately no unit
/// normalization, so the positive inner product is maximized only by
/// matching one-hot rows.
pub fn pcl_loss<F: Scalar>(tape: &Tape<F>, view_a: Var, view_b: Var, cfg: &LossConfig<F>) -> Result<Var> {
    check_pair(tape, view_a, view_b)?;
    check_probability_rows(tape, view_a, "view_a")?;
    check_probability_rows(tape, view_b, "view_b")?;
    info_nce_core(tape, view_a, view_b, cfg.scale, cfg.symmetrize)
}

/// Contrastive loss on unit-normalized classifier outputs.
pub fn lcl_loss<F: Scalar>(tape: &Tape<F>, logits_a: Var, logits_b: Var, cfg: &LossConfig<F>) -> Result<Var> {
    fcl_loss(tape, logits_a, logits_b, cfg)
}

/// Probability contrastive loss with an extra unit normalization, which
/// restores the standard feature+normalization paradigm on probability
/// inputs.
pub fn pcl_l2_loss<F: Scalar>(tape: &Tape<F>, view_a: Var, view_b: Var, cfg: &LossConfig<F>) -> Result<Var> {
    check_pair(tape, view_a, view_b)?;
    check_probability_rows(tape, view_a, "view_a")?;
    check_probability_rows(tape, view_b, "view_b")?;
    let na = tape.l2_normalize_rows(view_a)?;
    let nb = tape.l2_normalize_rows(view_b)?;
    info_nce_core(tape, na, nb, cfg.scale, cfg.symmetrize)
}

/// Negated squared-distance similarity matrices for queries from `q`:
/// `-‖q_i - x_j‖² = 2 q_i·x_j - ‖q_i‖² - ‖x_j‖²`.
fn neg_sqdist_sims<F: Scalar>(tape: &Tape<F>, q: Var, other: Var) -> Result<(Var, Var)> {
    let two = F::lit(2.0);
    let sq_q = tape.sum_rows(tape.mul(q, q)?)?;
    let sq_o = tape.sum_rows(tape.mul(other, other)?)?;
    let neg_sq_q = tape.neg(sq_q);
    let neg_sq_o = tape.neg(sq_o);

    let same = tape.mul_scalar(tape.matmul(q, tape.transpose(q)?)?, two);
    let same = tape.add_col_vec(same, neg_sq_q)?;
    let same = tape.add_row_vec(same, neg_sq_q)?;

    let cross = tape.mul_scalar(tape.matmul(q, tape.transpose(other)?)?, two);
    let cross = tape.add_col_vec(cross, neg_sq_q)?;
    let cross = tape.add_row_vec(cross, neg_sq_o)?;
    Ok((same, cross))
}

/// Probability contrastive loss with the inner product replaced by the
/// negated squared Euclidean distance (larger still means more alike).
pub fn pcl_mse_loss<F: Scalar>(tape: &Tape<F>, view_a: Var, view_b: Var, cfg: &LossConfig<F>) -> Result<Var> {
    let (n, _) = check_pair(tape, view_a, view_b)?;
    check_probability_rows(tape, view_a, "view_a")?;
    check_probability_rows(tape, view_b, "view_b")?;
    symmetrized(tape, view_a, view_b, cfg.symmetrize, |t, q, o| {
        let (same, cross) = neg_sqdist_sims(t, q, o)?;
        nce_direction_from_sims(t, n, same, cross, &DropMasks::none(), cfg.scale)
    })
}

/// Feature contrastive loss with false-negative removal: negatives whose
/// normalized similarity to the query exceeds the threshold are dropped
/// from the denominator. The removal mask is computed from detached
/// similarities; the indicator is discontinuous so it carries no gradient.
pub fn sfcl_loss<F: Scalar>(tape: &Tape<F>, view_a: Var, view_b: Var, cfg: &LossConfig<F>) -> Result<Var> {
    let (n, _) = check_pair(tape, view_a, view_b)?;
    let na = tape.l2_normalize_rows(view_a)?;
    let nb = tape.l2_normalize_rows(view_b)?;
    let threshold = cfg.sfcl_threshold;
    symmetrized(tape, na, nb, cfg.symmetrize, |t, q, o| {
        let (same, cross) = inner_product_sims(t, q, o)?;
        let drop = DropMasks {
            same: Some(exceeds(&t.value(same), threshold)),
            cross: Some(exceeds(&t.value(cross), threshold)),
        };
        nce_direction_from_sims(t, n, same, cross, &drop, cfg.scale)
    })
}

fn exceeds<F: Scalar>(sims: &Tensor<F>, threshold: F) -> Vec<bool> {
    sims.data().iter().map(|&s| s > threshold).collect()
}

/// Pairwise binary cross-entropy over all inner products of probability
/// rows across both views. Pairs are positives when the product already
/// exceeds the threshold or the samples coincide; the indicator is
/// computed from detached products.
pub fn bce_loss<F: Scalar>(
    tape: &Tape<F>,
    probs_view0: Var,
    probs_view1: Var,
    cfg: &LossConfig<F>,
) -> Result<Var> {
    let (n, _) = check_pair(tape, probs_view0, probs_view1)?;
    check_probability_rows(tape, probs_view0, "view 0")?;
    check_probability_rows(tape, probs_view1, "view 1")?;

    let floor = F::lit(LOG_CLAMP_FLOOR);
    let views = [probs_view0, probs_view1];
    let mut total: Option<Var> = None;
    for pn in views {
        for pm in views {
            let products = tape.matmul(pn, tape.transpose(pm)?)?;
            let detached = tape.value(products);
            let mut positive = vec![F::zero(); n * n];
            let mut negative = vec![F::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    if detached.at(i, j) >= cfg.bce_threshold || i == j {
                        positive[i * n + j] = F::one();
                    } else {
                        negative[i * n + j] = F::one();
                    }
                }
            }
            let pos_mask = tape.constant(&Tensor::matrix(n, n, positive)?);
            let neg_mask = tape.constant(&Tensor::matrix(n, n, negative)?);

            let log_p = tape.log(tape.clamp(products, floor, F::one())?)?;
            let one_minus = tape.add_scalar(tape.neg(products), F::one());
            let log_q = tape.log(tape.clamp(one_minus, floor, F::one())?)?;

            let term = tape.add(tape.mul(pos_mask, log_p)?, tape.mul(neg_mask, log_q)?)?;
            let summed = tape.sum(term);
            total = Some(match total {
                None => summed,
                Some(t) => tape.add(t, summed)?,
            });
        }
    }
    Ok(tape.neg(total.expect("four view pairings")))
}

/// Spreads high-confidence predictions evenly over classes:
/// `-Σ_i Σ_j (1/C) log p_{i,j}`. An empty selection contributes zero.
pub fn uniformity_regularizer<F: Scalar>(tape: &Tape<F>, probs: Var) -> Result<Var> {
    let shape = tape.shape(probs);
    if shape.len() != 2 {
        return Err(LossError::ViewMismatch(format!("expected matrix, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Ok(tape.scalar_const(F::zero()));
    }
    check_probability_rows(tape, probs, "probs")?;
    let classes = shape[1];
    let floor = F::lit(LOG_CLAMP_FLOOR);
    let logs = tape.log(tape.clamp(probs, floor, F::one())?)?;
    let total = tape.sum(logs);
    Ok(tape.mul_scalar(total, -F::one() / F::lit(classes as f64)))
}

/// Two-layer projection head (`linear -> relu -> linear`, equal widths)
/// used by the NTCL variant.
#[derive(Clone, Debug)]
pub struct ProjectionHead<F> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Scalar> ProjectionHead<F> {
    /// Uniform init in `(-1/sqrt(dim), 1/sqrt(dim))`.
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            w1: Tensor::rand_uniform(vec![dim, dim], -bound, bound, rng),
            b1: Tensor::rand_uniform(vec![dim], -bound, bound, rng),
            w2: Tensor::rand_uniform(vec![dim, dim], -bound, bound, rng),
            b2: Tensor::rand_uniform(vec![dim], -bound, bound, rng),
        }
    }

    pub fn parameters(&self) -> [&Tensor<F>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Records the head parameters on a tape once, so gradients from both
    /// views accumulate into the same variables.
    pub fn bind(&self, tape: &Tape<F>) -> BoundHead {
        BoundHead {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
        }
    }
}

/// Tape-bound projection head parameters.
#[derive(Clone, Copy)]
pub struct BoundHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundHead {
    pub fn apply<F: Scalar>(&self, tape: &Tape<F>, x: Var) -> Result<Var> {
        let h = tape.add_row_vec(tape.matmul(x, tape.transpose(self.w1)?)?, self.b1)?;
        let h = tape.relu(h);
        Ok(tape.add_row_vec(tape.matmul(h, tape.transpose(self.w2)?)?, self.b2)?)
    }

    pub fn params(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Feature contrastive loss behind a nonlinear projection head.
pub fn ntcl_loss<F: Scalar>(
    tape: &Tape<F>,
    view_a: Var,
    view_b: Var,
    head: &BoundHead,
    cfg: &LossConfig<F>,
) -> Result<Var> {
    check_pair(tape, view_a, view_b)?;
    let ha = head.apply(tape, view_a)?;
    let hb = head.apply(tape, view_b)?;
    fcl_loss(tape, ha, hb, cfg)
}

/// Routes a configured variant to the representation it consumes: features
/// for FCL/NTCL/SFCL, logits for LCL, probabilities for the rest.
pub fn compute_loss<F: Scalar>(
    tape: &Tape<F>,
    cfg: &LossConfig<F>,
    inputs: &VariantInputs,
    head: Option<&BoundHead>,
) -> Result<Var> {
    cfg.validate()?;
    let (fa, fb) = inputs.features;
    let (la, lb) = inputs.logits;
    let (pa, pb) = inputs.probs;
    match cfg.kind {
        LossKind::Fcl => fcl_loss(tape, fa, fb, cfg),
        LossKind::Sfcl => sfcl_loss(tape, fa, fb, cfg),
        LossKind::Ntcl => {
            let head = head.ok_or_else(|| {
                LossError::Config("NTCL requires a projection head".into())
            })?;
            ntcl_loss(tape, fa, fb, head, cfg)
        }
        LossKind::Lcl => lcl_loss(tape, la, lb, cfg),
        LossKind::Pcl => pcl_loss(tape, pa, pb, cfg),
        LossKind::PclL2 => pcl_l2_loss(tape, pa, pb, cfg),
        LossKind::PclMse => pcl_mse_loss(tape, pa, pb, cfg),
        LossKind::Bce => bce_loss(tape, pa, pb, cfg),
    }
}
