//! Seeded synthetic domain-adaptation problems: class blobs on a circle for
//! the source domain, a rigid transform plus fresh noise for the target
//! domain, few-shot labeled splits, and the stochastic two-view
//! augmentations feeding the contrastive losses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Scalar, Tensor};

/// Class centers sit on a circle of this radius; with the default noise
/// level the source blobs are comfortably separated.
pub const BLOB_RADIUS: f64 = 2.0;

/// Coordinate zeroing probability of the strong augmentation.
pub const STRONG_MASK_PROB: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// Rigid transform plus noise level standing in for domain shift: target
/// class centers are the rotated, scaled and translated source centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation: f64,
    pub translation: [f64; 2],
    pub scale: f64,
    pub noise_sigma: f64,
}

impl ShiftSpec {
    pub fn identity(noise_sigma: f64) -> Self {
        Self { rotation: 0.0, translation: [0.0, 0.0], scale: 1.0, noise_sigma }
    }

    /// The frozen benchmark shift: hard enough that a source-only model
    /// lands mid-range, leaving headroom for the contrastive variants.
    pub fn default_benchmark() -> Self {
        Self { rotation: 0.6, translation: [1.0, 0.5], scale: 1.0, noise_sigma: 0.35 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(SynthError::Spec(format!("scale {} must be positive", self.scale)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SynthError::Spec(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Planar labeled dataset. Labels are stored for every point but gated:
/// training code may only reach the few-shot subset, while evaluation and
/// the frozen-encoder probe use [`DomainDataset::eval_labels`].
#[derive(Clone, Debug)]
pub struct DomainDataset<F> {
    points: Tensor<F>,
    labels: Vec<usize>,
    pub domain: Domain,
    num_classes: usize,
}

impl<F: Scalar> DomainDataset<F> {
    pub fn points(&self) -> &Tensor<F> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Full ground-truth labels. Evaluation-only privilege: the training
    /// loop must not read these outside the few-shot subset.
    pub fn eval_labels(&self) -> &[usize] {
        &self.labels
    }

    /// Labels of a few-shot split, the one slice of target ground truth
    /// training is allowed to see.
    pub fn few_shot_labels(&self, split: &FewShotSplit) -> Result<Vec<usize>> {
        split
            .indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| SynthError::Spec(format!("split index {i} out of range")))
            })
            .collect()
    }

    pub fn rows_at(&self, indices: &[usize]) -> Tensor<F> {
        let cols = self.points.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.points.row(i));
        }
        Tensor::matrix(indices.len(), cols, data).expect("row gather preserves shape")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// CSV export with columns `x,y,label,domain`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "x,y,label,domain")?;
        for i in 0..self.len() {
            let row = self.points.row(i);
            writeln!(
                out,
                "{},{},{},{}",
                row[0].to_f64().unwrap(),
                row[1].to_f64().unwrap(),
                self.labels[i],
                self.domain
            )?;
        }
        Ok(())
    }
}

/// Indices of the labeled target samples: exactly `shots_per_class` per
/// class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub shots_per_class: usize,
    pub indices: Vec<usize>,
}

fn rotate(point: [f64; 2], angle: f64) -> [f64; 2] {
    let (sin, cos) = angle.sin_cos();
    [cos * point[0] - sin * point[1], sin * point[0] + cos * point[1]]
}

fn class_centers(classes: usize) -> Vec<[f64; 2]> {
    (0..classes)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            [BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin()]
        })
        .collect()
}

fn sample_blobs<F: Scalar, R: Rng>(
    centers: &[[f64; 2]],
    n_per_class: usize,
    sigma: f64,
    domain: Domain,
    rng: &mut R,
) -> DomainDataset<F> {
    let classes = centers.len();
    let mut rows: Vec<(usize, [f64; 2])> = Vec::with_capacity(classes * n_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            rows.push((label, [center[0] + sigma * nx, center[1] + sigma * ny]));
        }
    }
    rows.shuffle(rng);

    let mut data = Vec::with_capacity(rows.len() * 2);
    let mut labels = Vec::with_capacity(rows.len());
    for (label, p) in rows {
        data.push(F::lit(p[0]));
        data.push(F::lit(p[1]));
        labels.push(label);
    }
    DomainDataset {
        points: Tensor::matrix(labels.len(), 2, data).expect("consistent sizes"),
        labels,
        domain,
        num_classes: classes,
    }
}

/// Seeded source/target pair: source blobs on a circle, target blobs around
/// the shifted centers with fresh noise at the same level.
pub fn make_domain_pair<F: Scalar>(
    classes: usize,
    n_per_class: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(DomainDataset<F>, DomainDataset<F>)> {
    if classes < 2 {
        return Err(SynthError::Spec(format!("need at least 2 classes, got {classes}")));
    }
    if n_per_class < 1 {
        return Err(SynthError::Spec("need at least 1 point per class".into()));
    }
    shift.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = class_centers(classes);
    let source = sample_blobs(&centers, n_per_class, shift.noise_sigma, Domain::Source, &mut rng);

    let shifted: Vec<[f64; 2]> = centers
        .iter()
        .map(|&c| {
            let r = rotate(c, shift.rotation);
            [
                shift.scale * r[0] + shift.translation[0],
                shift.scale * r[1] + shift.translation[1],
            ]
        })
        .collect();
    let target = sample_blobs(&shifted, n_per_class, shift.noise_sigma, Domain::Target, &mut rng);
    Ok((source, target))
}

/// Picks exactly `shots_per_class` labeled target samples per class,
/// seeded.
pub fn few_shot_split<F: Scalar>(
    dataset: &DomainDataset<F>,
    shots_per_class: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut indices = Vec::with_capacity(shots_per_class * dataset.num_classes);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < shots_per_class {
            return Err(SynthError::Spec(format!(
                "class {class} has {} samples, needs {shots_per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        indices.extend_from_slice(&members[..shots_per_class]);
    }
    indices.sort_unstable();
    Ok(FewShotSplit { shots_per_class, indices })
}

fn jitter_and_rotate<F: Scalar, R: Rng>(row: &[F], strength: f64, rng: &mut R) -> [F; 2] {
    let angle = strength * rng.gen_range(-1.0..1.0);
    let x = row[0].to_f64().unwrap();
    let y = row[1].to_f64().unwrap();
    let r = rotate([x, y], angle);
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    [F::lit(r[0] + strength * nx), F::lit(r[1] + strength * ny)]
}

/// Two independent stochastic transforms per point: a small random rotation
/// (within `±strength` radians) plus Gaussian jitter with sigma `strength`.
/// Strength zero reproduces the input exactly.
pub fn augment_two_views<F: Scalar>(
    points: &Tensor<F>,
    strength: f64,
    seed: u64,
) -> (Tensor<F>, Tensor<F>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.rows();
    let mut a = Vec::with_capacity(n * 2);
    let mut b = Vec::with_capacity(n * 2);
    for i in 0..n {
        let row = points.row(i);
        let va = jitter_and_rotate(row, strength, &mut rng);
        let vb = jitter_and_rotate(row, strength, &mut rng);
        a.extend_from_slice(&va);
        b.extend_from_slice(&vb);
    }
    (
        Tensor::matrix(n, 2, a).expect("consistent sizes"),
        Tensor::matrix(n, 2, b).expect("consistent sizes"),
    )
}

/// Heavier transform for the pseudo-label auxiliary: triple jitter plus
/// per-coordinate zeroing with probability [`STRONG_MASK_PROB`].
pub fn strong_augment<F: Scalar>(points: &Tensor<F>, strength: f64, seed: u64) -> Tensor<F> {
    strong_augment_with(points, strength, STRONG_MASK_PROB, seed)
        .expect("default mask probability is valid")
}

pub fn strong_augment_with<F: Scalar>(
    points: &Tensor<F>,
    strength: f64,
    mask_prob: f64,
    seed: u64,
) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(SynthError::Spec(format!("mask_prob {mask_prob} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.rows();
    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        let view = jitter_and_rotate(points.row(i), 3.0 * strength, &mut rng);
        for v in view {
            let u: f64 = rng.gen();
            out.push(if u < mask_prob { F::zero() } else { v });
        }
    }
    Ok(Tensor::matrix(n, 2, out).expect("consistent sizes"))
}
