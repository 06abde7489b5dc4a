//! Training recipe: supervised cross-entropy on labeled data plus a
//! contrastive loss on two augmented views of the unlabeled target batch,
//! optionally a confidence-gated pseudo-label auxiliary with the uniformity
//! regularizer, with per-interval metrics and final diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    self, compute_loss, uniformity_regularizer, LossConfig, LossError, LossKind, ProjectionHead,
    VariantInputs, LOG_CLAMP_FLOOR,
};
use crate::model::{
    freeze_encoder_retrain_classifier, Model, ModelConfig, ModelError, SgdMomentum,
};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::synthdata::{augment_two_views, strong_augment, Domain, DomainDataset, FewShotSplit, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("diverged at step {step}: non-finite loss or parameters")]
    Diverged { step: usize, intervals: Vec<IntervalMetrics> },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean of `-log p[i, label_i]` with the log argument clamped.
pub fn cross_entropy<F: Scalar>(
    tape: &Tape<F>,
    probs: Var,
    labels: &[usize],
) -> losses::Result<Var> {
    let picked = tape.pick_per_row(probs, labels)?;
    let clamped = tape.clamp(picked, F::lit(LOG_CLAMP_FLOOR), F::one())?;
    let logs = tape.log(clamped)?;
    Ok(tape.mean(tape.neg(logs))?)
}

/// Rows whose max probability reaches the confidence threshold.
pub fn confident_rows<F: Scalar>(weak_probs: &Tensor<F>, confidence: F) -> Vec<usize> {
    weak_probs
        .max_rows()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= confidence)
        .map(|(i, _)| i)
        .collect()
}

/// Cross-entropy of the strong-view probabilities against the argmax of the
/// weak-view probabilities, restricted to rows whose weak confidence
/// reaches the threshold. The weak view is detached (host values); returns
/// the retained-row count.
pub fn pseudo_label_loss<F: Scalar>(
    tape: &Tape<F>,
    weak_probs: &Tensor<F>,
    strong_probs: Var,
    confidence: F,
) -> losses::Result<(Var, usize)> {
    let retained = confident_rows(weak_probs, confidence);
    if retained.is_empty() {
        return Ok((tape.scalar_const(F::zero()), 0));
    }
    let targets: Vec<usize> = retained
        .iter()
        .map(|&i| {
            let row = weak_probs.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let selected = tape.select_rows(strong_probs, &retained)?;
    let loss = cross_entropy(tape, selected, &targets)?;
    Ok((loss, retained.len()))
}

/// Mean over classes of the cosine distance between the class's target
/// feature centroid and the corresponding class-weight row. Classes without
/// samples are skipped; degenerate centroids count as maximally distant.
pub fn deviation_score<F: Scalar>(
    model: &Model<F>,
    points: &Tensor<F>,
    labels: &[usize],
) -> Result<f64> {
    if points.rows() != labels.len() {
        return Err(TrainError::Data(format!(
            "{} points vs {} labels",
            points.rows(),
            labels.len()
        )));
    }
    let features = {
        let tape: Tape<F> = Tape::new();
        let binding = model.bind(&tape);
        let out = binding.forward(&tape, points)?;
        tape.value(out.features)
    };
    let classes = model.config.num_classes;
    let dim = model.config.feature_dim;

    let mut sums = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TrainError::Data(format!("label {label} out of range {classes}")));
        }
        for j in 0..dim {
            sums[label][j] += features.at(i, j).to_f64().unwrap();
        }
        counts[label] += 1;
    }

    let mut total = 0.0;
    let mut seen = 0usize;
    for c in 0..classes {
        if counts[c] == 0 {
            continue;
        }
        let centroid: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        let weight: Vec<f64> = model.classifier.row(c).iter().map(|w| w.to_f64().unwrap()).collect();
        total += 1.0 - cosine(&centroid, &weight);
        seen += 1;
    }
    if seen == 0 {
        return Err(TrainError::Data("no class has samples".into()));
    }
    Ok(total / seen as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0; // treated as maximally deviated
    }
    dot / (na * nb)
}

/// Pseudo-label auxiliary settings (disabled by default).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    pub enabled: bool,
    pub confidence: f64,
    pub lambda_reg: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { enabled: false, confidence: 0.95, lambda_reg: 0.1 }
    }
}

/// Frozen-encoder probe settings, calibrated so the probe converges on the
/// planar benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Mixing weight of the contrastive term; zero disables it entirely
    /// (the supervised baseline).
    pub lambda_contrastive: f64,
    pub pseudo_label: PseudoLabelConfig,
    pub augment_strength: f64,
    pub eval_interval: usize,
    pub probe: ProbeConfig,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::new(LossKind::Pcl),
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            steps: 1500,
            batch_source: 32,
            batch_target: 16,
            lambda_contrastive: 0.35,
            pseudo_label: PseudoLabelConfig::default(),
            augment_strength: 0.1,
            eval_interval: 50,
            probe: ProbeConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.batch_source < 1 || self.batch_target < 1 {
            return Err(TrainError::Config("batch sizes must be >= 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(TrainError::Config("eval_interval must be >= 1".into()));
        }
        if !(self.lambda_contrastive >= 0.0) {
            return Err(TrainError::Config("lambda_contrastive must be >= 0".into()));
        }
        let conf = self.pseudo_label.confidence;
        if !(conf > 0.0 && conf <= 1.0) {
            return Err(TrainError::Config(format!("confidence {conf} must lie in (0, 1]")));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// A source/target pair plus the labeled target split.
#[derive(Clone, Debug)]
pub struct AdaptationTask {
    pub source: DomainDataset<f64>,
    pub target: DomainDataset<f64>,
    pub few_shot: FewShotSplit,
}

impl AdaptationTask {
    pub fn new(
        source: DomainDataset<f64>,
        target: DomainDataset<f64>,
        few_shot: FewShotSplit,
    ) -> Result<Self> {
        if source.num_classes() != target.num_classes() {
            return Err(TrainError::Data("source/target class counts differ".into()));
        }
        if source.is_empty() || target.is_empty() {
            return Err(TrainError::Data("empty domain".into()));
        }
        if few_shot.indices.iter().any(|&i| i >= target.len()) {
            return Err(TrainError::Data("few-shot index out of range".into()));
        }
        Ok(Self { source, target, few_shot })
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }
}

/// One metrics row, recorded every `eval_interval` steps and at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub step: usize,
    pub total_loss: f64,
    pub ce_loss: f64,
    pub contrastive_loss: f64,
    pub pseudo_loss: f64,
    pub reg_loss: f64,
    pub pseudo_count: usize,
    pub target_accuracy: f64,
    pub mean_max_prob: f64,
    pub deviation_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalDiagnostics {
    pub steps_run: usize,
    pub target_accuracy: f64,
    /// Accuracy of a fresh classifier retrained on the frozen encoder with
    /// ground-truth labels.
    pub oracle_accuracy: f64,
    pub oracle_gap: f64,
    pub deviation_score: f64,
    pub mean_max_prob: f64,
}

/// Final features for every point of both domains, plus the class-weight
/// rows, for offline scatter plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub feature_dim: usize,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
    pub features: Vec<Vec<f64>>,
    pub class_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub intervals: Vec<IntervalMetrics>,
    pub final_diagnostics: FinalDiagnostics,
    pub embeddings: EmbeddingExport,
}

impl RunRecord {
    pub fn all_finite(&self) -> bool {
        let iv = self.intervals.iter().all(|m| {
            [
                m.total_loss,
                m.ce_loss,
                m.contrastive_loss,
                m.pseudo_loss,
                m.reg_loss,
                m.target_accuracy,
                m.mean_max_prob,
                m.deviation_score,
            ]
            .iter()
            .all(|v| v.is_finite())
        });
        let fd = &self.final_diagnostics;
        iv && [
            fd.target_accuracy,
            fd.oracle_accuracy,
            fd.oracle_gap,
            fd.deviation_score,
            fd.mean_max_prob,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Everything a finished run hands back: the record, the trained model (and
/// projection head, when the variant uses one), and the final RNG state.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Model<f64>,
    pub head: Option<ProjectionHead<f64>>,
    pub rng: ChaCha8Rng,
}

/// Target-set evaluation snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_max_prob: f64,
    pub deviation_score: f64,
}

/// Transductive evaluation on the full unlabeled target pool.
pub fn evaluate(model: &Model<f64>, task: &AdaptationTask) -> Result<EvalMetrics> {
    let tape: Tape<f64> = Tape::new();
    let binding = model.bind(&tape);
    let out = binding.forward(&tape, task.target.points())?;
    let probs = tape.value(out.probs);
    let labels = task.target.eval_labels();

    let predictions = probs.argmax_rows();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / labels.len() as f64;
    let mean_max_prob =
        probs.max_rows().iter().sum::<f64>() / probs.rows() as f64;
    let deviation = deviation_score(model, task.target.points(), labels)?;
    Ok(EvalMetrics { accuracy, mean_max_prob, deviation_score: deviation })
}

fn sample_batch<R: Rng>(rng: &mut R, pool: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..pool)).collect()
}

fn gather_rows(points: &Tensor<f64>, indices: &[usize]) -> Tensor<f64> {
    let cols = points.cols();
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        data.extend_from_slice(points.row(i));
    }
    Tensor::matrix(indices.len(), cols, data).expect("row gather preserves shape")
}

/// Runs the full recipe and returns the record, trained model and final RNG
/// state. Aborts with the metrics collected so far if the loss goes
/// non-finite.
pub fn train(cfg: &TrainConfig, task: &AdaptationTask) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = task.num_classes();
    let model_cfg = ModelConfig { num_classes: classes, ..cfg.model };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model_seed = rng.gen::<u64>();
    let head_seed = rng.gen::<u64>();
    let probe_seed = rng.gen::<u64>();

    let mut model: Model<f64> = Model::new(model_cfg, model_seed);
    let mut head: Option<ProjectionHead<f64>> = (cfg.loss.kind == LossKind::Ntcl).then(|| {
        let mut head_rng = ChaCha8Rng::seed_from_u64(head_seed);
        ProjectionHead::init(model_cfg.feature_dim, &mut head_rng)
    });

    // Labeled data: the source pool is sampled per step; the few-shot
    // target rows (the only target labels training may touch) ride along
    // in every supervised batch as alignment anchors.
    let source_labels = task.source.eval_labels().to_vec();
    let few_shot_points = task.target.rows_at(&task.few_shot.indices);
    let few_shot_labels = task.target.few_shot_labels(&task.few_shot)?;

    let mut optimizer = SgdMomentum::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut intervals: Vec<IntervalMetrics> = Vec::new();

    for step in 1..=cfg.steps {
        let sup_idx = sample_batch(&mut rng, task.source.len(), cfg.batch_source);
        let tgt_idx = sample_batch(&mut rng, task.target.len(), cfg.batch_target);
        let aug_seed = rng.gen::<u64>();

        let mut sup_rows: Vec<Vec<f64>> = sup_idx
            .iter()
            .map(|&i| task.source.points().row(i).to_vec())
            .collect();
        let mut batch_labels: Vec<usize> = sup_idx.iter().map(|&i| source_labels[i]).collect();
        for (slot, _) in task.few_shot.indices.iter().enumerate() {
            sup_rows.push(few_shot_points.row(slot).to_vec());
            batch_labels.push(few_shot_labels[slot]);
        }
        let sup_batch =
            Tensor::from_rows(&sup_rows).map_err(|e| TrainError::Data(e.to_string()))?;
        let tgt_batch = gather_rows(task.target.points(), &tgt_idx);
        let (view_a, view_b) = augment_two_views(&tgt_batch, cfg.augment_strength, aug_seed);

        let tape: Tape<f64> = Tape::new();
        let binding = model.bind(&tape);
        let bound_head = head.as_ref().map(|h| h.bind(&tape));

        let sup_out = binding.forward(&tape, &sup_batch)?;
        let ce = cross_entropy(&tape, sup_out.probs, &batch_labels)?;
        let mut total = ce;

        let mut contrastive_value = 0.0;
        if cfg.lambda_contrastive > 0.0 {
            let out_a = binding.forward(&tape, &view_a)?;
            let out_b = binding.forward(&tape, &view_b)?;
            let inputs = VariantInputs {
                features: (out_a.features, out_b.features),
                logits: (out_a.logits, out_b.logits),
                probs: (out_a.probs, out_b.probs),
            };
            let contrastive = compute_loss(&tape, &cfg.loss, &inputs, bound_head.as_ref())?;
            contrastive_value = tape.value(contrastive).item()?;
            total = tape.add(total, tape.mul_scalar(contrastive, cfg.lambda_contrastive))?;
        }

        let mut pseudo_value = 0.0;
        let mut reg_value = 0.0;
        let mut pseudo_count = 0usize;
        if cfg.pseudo_label.enabled {
            let strong_seed = rng.gen::<u64>();
            let strong_batch = strong_augment(&tgt_batch, cfg.augment_strength, strong_seed);
            // The clean target batch serves as the weak view.
            let weak_out = binding.forward(&tape, &tgt_batch)?;
            let strong_out = binding.forward(&tape, &strong_batch)?;
            let weak_probs = tape.value(weak_out.probs);
            let confidence = cfg.pseudo_label.confidence;
            let (pl, count) = pseudo_label_loss(&tape, &weak_probs, strong_out.probs, confidence)?;
            pseudo_count = count;
            pseudo_value = tape.value(pl).item()?;
            total = tape.add(total, pl)?;
            if count > 0 && cfg.pseudo_label.lambda_reg > 0.0 {
                let retained = confident_rows(&weak_probs, confidence);
                let selected = tape.select_rows(strong_out.probs, &retained)?;
                let reg = uniformity_regularizer(&tape, selected)?;
                reg_value = tape.value(reg).item()?;
                total = tape.add(total, tape.mul_scalar(reg, cfg.pseudo_label.lambda_reg))?;
            }
        }

        let total_value = tape.value(total).item()?;
        let ce_value = tape.value(ce).item()?;
        if !total_value.is_finite() {
            return Err(TrainError::Diverged { step, intervals });
        }

        tape.backward(total)?;
        let mut param_vars = binding.params();
        if let Some(bh) = &bound_head {
            param_vars.extend(bh.params());
        }
        let grads: Vec<Tensor<f64>> = param_vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect();
        drop(tape);

        let mut params = model.parameters_mut();
        if let Some(h) = head.as_mut() {
            params.extend(h.parameters_mut());
        }
        optimizer.step(&mut params, &grads)?;
        drop(params);

        let head_finite =
            head.as_ref().is_none_or(|h| h.parameters().iter().all(|t| t.is_finite()));
        if !model.all_finite() || !head_finite {
            return Err(TrainError::Diverged { step, intervals });
        }

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let eval = evaluate(&model, task)?;
            intervals.push(IntervalMetrics {
                step,
                total_loss: total_value,
                ce_loss: ce_value,
                contrastive_loss: contrastive_value,
                pseudo_loss: pseudo_value,
                reg_loss: reg_value,
                pseudo_count,
                target_accuracy: eval.accuracy,
                mean_max_prob: eval.mean_max_prob,
                deviation_score: eval.deviation_score,
            });
        }
    }

    let eval = evaluate(&model, task)?;
    let oracle_accuracy = freeze_encoder_retrain_classifier(
        &model,
        task.target.points(),
        task.target.eval_labels(),
        cfg.probe.steps,
        cfg.probe.lr,
        probe_seed,
    )?;

    let final_diagnostics = FinalDiagnostics {
        steps_run: cfg.steps,
        target_accuracy: eval.accuracy,
        oracle_accuracy,
        oracle_gap: oracle_accuracy - eval.accuracy,
        deviation_score: eval.deviation_score,
        mean_max_prob: eval.mean_max_prob,
    };

    let embeddings = export_embeddings(&model, task)?;
    let record = RunRecord { config: cfg.clone(), intervals, final_diagnostics, embeddings };
    Ok(TrainOutcome { record, model, head, rng })
}

fn export_embeddings(model: &Model<f64>, task: &AdaptationTask) -> Result<EmbeddingExport> {
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    let mut features = Vec::new();
    for dataset in [&task.source, &task.target] {
        let tape: Tape<f64> = Tape::new();
        let binding = model.bind(&tape);
        let out = binding.forward(&tape, dataset.points())?;
        let feats = tape.value(out.features);
        for i in 0..dataset.len() {
            labels.push(dataset.eval_labels()[i]);
            domains.push(dataset.domain);
            features.push(feats.row(i).to_vec());
        }
    }
    let class_weights = (0..model.config.num_classes)
        .map(|c| model.classifier.row(c).to_vec())
        .collect();
    Ok(EmbeddingExport {
        feature_dim: model.config.feature_dim,
        labels,
        domains,
        features,
        class_weights,
    })
}
