//! Direct-summation reference implementations of every loss in the family.
//!
//! These are deliberately written as plain loops over `f64` slices — no
//! gradient tape, no log-sum-exp stabilization, no shared code with the
//! differentiable implementations they cross-check. Matrices are row-major
//! with explicit dimensions.

/// Naive triple-loop matrix product: `a` is `m x k`, `b` is `k x n`.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Row-wise unit normalization.
pub fn l2_normalize_rows(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..d {
            out[i * d + j] = row[j] / norm;
        }
    }
    out
}

/// Row-wise softmax by the direct formula.
pub fn softmax_rows(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..c {
            out[i * c + j] = row[j].exp() / sum;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn neg_sqdist(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Similarity used inside the InfoNCE denominator.
#[derive(Clone, Copy, PartialEq)]
pub enum Similarity {
    InnerProduct,
    NegSquaredDistance,
}

impl Similarity {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::InnerProduct => dot(a, b),
            Similarity::NegSquaredDistance => neg_sqdist(a, b),
        }
    }
}

/// One query direction of the InfoNCE loss, by direct summation: queries
/// come from `qs`, the positive for query `i` is `others[i]`, same-view
/// negatives run over `j != i`, cross-view terms over all `k`. Negatives
/// whose similarity exceeds `drop_above` (if given) are removed; the
/// positive is always kept. Returns the mean over queries.
pub fn info_nce_direction(
    qs: &[f64],
    others: &[f64],
    n: usize,
    d: usize,
    scale: f64,
    similarity: Similarity,
    drop_above: Option<f64>,
) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let qi = &qs[i * d..(i + 1) * d];
        let pos = (scale * similarity.eval(qi, &others[i * d..(i + 1) * d])).exp();
        let mut den = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let sim = similarity.eval(qi, &qs[j * d..(j + 1) * d]);
            if drop_above.map_or(true, |t| sim <= t) {
                den += (scale * sim).exp();
            }
        }
        for k in 0..n {
            let sim = similarity.eval(qi, &others[k * d..(k + 1) * d]);
            if k == i || drop_above.map_or(true, |t| sim <= t) {
                den += (scale * sim).exp();
            }
        }
        total += -(pos / den).ln();
    }
    total / n as f64
}

fn maybe_symmetrized(
    a: &[f64],
    b: &[f64],
    n: usize,
    d: usize,
    scale: f64,
    similarity: Similarity,
    drop_above: Option<f64>,
    symmetrize: bool,
) -> f64 {
    let fwd = info_nce_direction(a, b, n, d, scale, similarity, drop_above);
    if !symmetrize {
        return fwd;
    }
    let rev = info_nce_direction(b, a, n, d, scale, similarity, drop_above);
    0.5 * (fwd + rev)
}

/// InfoNCE on raw inputs.
pub fn info_nce(a: &[f64], b: &[f64], n: usize, d: usize, scale: f64, symmetrize: bool) -> f64 {
    maybe_symmetrized(a, b, n, d, scale, Similarity::InnerProduct, None, symmetrize)
}

/// Feature contrastive loss: unit-normalize, then InfoNCE.
pub fn fcl(a: &[f64], b: &[f64], n: usize, d: usize, scale: f64, symmetrize: bool) -> f64 {
    let na = l2_normalize_rows(a, n, d);
    let nb = l2_normalize_rows(b, n, d);
    info_nce(&na, &nb, n, d, scale, symmetrize)
}

/// Probabilistic contrastive loss: InfoNCE directly on probability rows.
pub fn pcl(a: &[f64], b: &[f64], n: usize, c: usize, scale: f64, symmetrize: bool) -> f64 {
    info_nce(a, b, n, c, scale, symmetrize)
}

/// Probability rows with an extra unit normalization.
pub fn pcl_l2(a: &[f64], b: &[f64], n: usize, c: usize, scale: f64, symmetrize: bool) -> f64 {
    fcl(a, b, n, c, scale, symmetrize)
}

/// InfoNCE with negated squared-distance similarity on probability rows.
pub fn pcl_mse(a: &[f64], b: &[f64], n: usize, c: usize, scale: f64, symmetrize: bool) -> f64 {
    maybe_symmetrized(a, b, n, c, scale, Similarity::NegSquaredDistance, None, symmetrize)
}

/// Feature contrastive loss with negatives above the threshold removed from
/// the denominator (computed on normalized features).
pub fn sfcl(
    a: &[f64],
    b: &[f64],
    n: usize,
    d: usize,
    scale: f64,
    threshold: f64,
    symmetrize: bool,
) -> f64 {
    let na = l2_normalize_rows(a, n, d);
    let nb = l2_normalize_rows(b, n, d);
    maybe_symmetrized(&na, &nb, n, d, scale, Similarity::InnerProduct, Some(threshold), symmetrize)
}

fn clamp_log(x: f64) -> f64 {
    x.clamp(1e-12, 1.0).ln()
}

/// Pairwise binary cross-entropy over all inner products of probability
/// rows from both views (quadruple loop). A pair is positive when the
/// product reaches `threshold` or the samples coincide.
pub fn bce(p0: &[f64], p1: &[f64], n: usize, c: usize, threshold: f64) -> f64 {
    let views = [p0, p1];
    let mut total = 0.0;
    for pn in views {
        for pm in views {
            for i in 0..n {
                for j in 0..n {
                    let product = dot(&pn[i * c..(i + 1) * c], &pm[j * c..(j + 1) * c]);
                    let positive = product >= threshold || i == j;
                    total += if positive { clamp_log(product) } else { clamp_log(1.0 - product) };
                }
            }
        }
    }
    -total
}

/// Uniformity regularizer by double loop.
pub fn uniformity(probs: &[f64], n: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..c {
            total += clamp_log(probs[i * c + j]) / c as f64;
        }
    }
    -total
}

/// Mean cross-entropy of probability rows against integer labels.
pub fn cross_entropy(probs: &[f64], labels: &[usize], c: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        total += -clamp_log(probs[i * c + l]);
    }
    total / n as f64
}

/// Confidence-gated pseudo-label loss: (mean cross-entropy over retained
/// rows, retained count).
pub fn pseudo_label(
    weak: &[f64],
    strong: &[f64],
    n: usize,
    c: usize,
    confidence: f64,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let row = &weak[i * c..(i + 1) * c];
        let (mut best, mut best_p) = (0usize, row[0]);
        for j in 1..c {
            if row[j] > best_p {
                best = j;
                best_p = row[j];
            }
        }
        if best_p >= confidence {
            total += -clamp_log(strong[i * c + best]);
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (total / count as f64, count)
    }
}
