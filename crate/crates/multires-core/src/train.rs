//! Training methods: the joint multi-resolution objective and four
//! baselines, plus λ cross-validation, evaluation, and run artifacts.
//!
//! The joint objective is
//!   Σ_k cross_entropy(T_l^k)  +  Σ_k λ_k · pair_consistency(k)
//! where k = 0 is the fine resolution, k ≥ 1 are coarse resolutions, and
//! the consistency penalty (MIL or attention) couples each coarse model's
//! predictions on unlabeled coarse instances to the fine model over the
//! corresponding instance groups. All methods run plain mini-batch
//! gradient descent (full batch by default) and are deterministic under
//! `(config, dataset)`.
//!
//! Randomness is drawn from independent streams derived from the run
//! seed, so adding or removing one component never shifts another's
//! draws (this is what makes λ = 0 reproduce fine-only training bit for
//! bit): fine model init = stream 0, coarse model k = stream k,
//! attention for pair k = 1000 + k, labeled-batch shuffling for
//! resolution k = 100 + k, consistency-batch shuffling for pair
//! k = 200 + k, manifold subsample = 300 (pair shuffling 301),
//! cross-validation folds = 400, augmentation round r = 1_000_000 + r.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::consistency::{
    pair_consistency, smax_value, AttentionCheckpointError, AttentionParams, ConsistencyError,
    ConsistencyMode, Reduce, SmaxConfig, TapedAttention, DEFAULT_ALIGN_DIM,
    DEFAULT_ATTENTION_INIT_SCALE,
};
use crate::data::{
    build_correspondence, split_folds, CorrespondenceMap, DataError, Instance, Label,
    MultiResDataset, ResolutionLayer,
};
use crate::io::format_f64;
use crate::model::{
    cross_entropy_loss, CheckpointError, Classifier, ModelError, ModelKind, ModelSpec,
    TapedModel, DEFAULT_INIT_SCALE,
};
use crate::rng::{derive_seed, stream_rng};
use crate::tape::{Tape, TensorError, TensorId};

pub const STREAM_FINE_INIT: u64 = 0;
pub const STREAM_LABELED_SHUFFLE: u64 = 100;
pub const STREAM_PAIR_SHUFFLE: u64 = 200;
pub const STREAM_MANIFOLD_SUBSAMPLE: u64 = 300;
pub const STREAM_MANIFOLD_SHUFFLE: u64 = 301;
pub const STREAM_CV_SPLIT: u64 = 400;
pub const STREAM_BUDGET_SUBSAMPLE: u64 = 500;
pub const STREAM_ATTENTION_INIT: u64 = 1000;
const STREAM_AUGMENT_ROUND: u64 = 1_000_000;

pub const DEFAULT_HIDDEN_DIM: usize = 8;
pub const DEFAULT_EPOCHS: usize = 150;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("resolution {0} has no labeled instances")]
    NoLabeledData(usize),
    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("evaluation instance {0} is unlabeled")]
    UnlabeledEvaluation(usize),
    #[error("manifold subsample ({requested}) exceeds the unlabeled pool ({available})")]
    SubsampleTooLarge { requested: usize, available: usize },
    #[error("label budget ({requested}) exceeds the fine labeled pool ({available})")]
    BudgetTooLarge { requested: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Non-finite numbers abort the epoch as divergence; everything else is a
/// programming or configuration error and propagates unchanged.
fn mark_divergence(epoch: usize, err: TrainError) -> TrainError {
    let tensor = match &err {
        TrainError::Tensor(t) => Some(t),
        TrainError::Model(ModelError::Tensor(t)) => Some(t),
        TrainError::Consistency(ConsistencyError::Tensor(t)) => Some(t),
        TrainError::Consistency(ConsistencyError::Model(ModelError::Tensor(t))) => Some(t),
        _ => None,
    };
    match tensor {
        Some(t @ (TensorError::NonFinite { .. } | TensorError::ExpSaturation { .. })) => {
            TrainError::Diverged {
                epoch,
                message: t.to_string(),
            }
        }
        _ => err,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    OnlyFine,
    SsrManifold,
    Propagate,
    Augment,
    MultiResMil,
    MultiResAttention,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::OnlyFine => "onlyfine",
            Method::SsrManifold => "ssr-manifold",
            Method::Propagate => "propagate",
            Method::Augment => "augment",
            Method::MultiResMil => "multires-mil",
            Method::MultiResAttention => "multires-attention",
        }
    }

    /// Whether the consistency weight λ enters this method's objective.
    pub fn uses_lambda(&self) -> bool {
        matches!(self, Method::MultiResMil | Method::MultiResAttention)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    /// One spec per resolution: index 0 is fine, k ≥ 1 the coarse layers.
    pub model_specs: Vec<ModelSpec>,
    /// Consistency weight per coarse resolution; a single value is
    /// broadcast to every pair.
    pub lambda: Vec<f64>,
    pub lr: f64,
    pub epochs: usize,
    /// 0 runs full-batch; otherwise instances (or coarse groups, for
    /// consistency terms) per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
    pub smax: SmaxConfig,
    pub consistency_reduce: Reduce,
    pub align_dim: usize,
    pub ssr_gamma: f64,
    pub ssr_subsample: usize,
    pub augment_threshold: f64,
    pub augment_max_iters: usize,
    pub propagate_confidence: f64,
}

/// One model spec per resolution with the layer's input dimension.
pub fn default_model_specs(
    dataset: &MultiResDataset,
    kind: ModelKind,
    hidden_dim: usize,
    init_scale: f64,
) -> Vec<ModelSpec> {
    std::iter::once(&dataset.fine)
        .chain(dataset.coarse.iter())
        .map(|layer| {
            let mut spec = match kind {
                ModelKind::LogReg => ModelSpec::logreg(layer.feature_dim),
                ModelKind::Mlp1 => ModelSpec::mlp1(layer.feature_dim, hidden_dim),
            };
            spec.init_scale = init_scale;
            spec
        })
        .collect()
}

impl TrainConfig {
    /// Defaults for the given dataset: logreg models, λ = 1, lr 0.1,
    /// 150 full-batch epochs, seed 0.
    pub fn for_dataset(method: Method, dataset: &MultiResDataset) -> TrainConfig {
        TrainConfig {
            method,
            model_specs: default_model_specs(
                dataset,
                ModelKind::LogReg,
                DEFAULT_HIDDEN_DIM,
                DEFAULT_INIT_SCALE,
            ),
            lambda: vec![1.0; dataset.num_coarse().max(1)],
            lr: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            batch_size: 0,
            seed: 0,
            smax: SmaxConfig::default(),
            consistency_reduce: Reduce::Mean,
            align_dim: DEFAULT_ALIGN_DIM,
            ssr_gamma: 0.01,
            ssr_subsample: 100,
            augment_threshold: 0.7,
            augment_max_iters: 5,
            propagate_confidence: 0.0,
        }
    }

    /// λ per coarse resolution, broadcasting a single value.
    fn lambda_per_pair(&self, num_coarse: usize) -> Result<Vec<f64>, TrainError> {
        let lambda = if self.lambda.len() == num_coarse {
            self.lambda.clone()
        } else if self.lambda.len() == 1 {
            vec![self.lambda[0]; num_coarse]
        } else {
            return Err(TrainError::BadConfig(format!(
                "{} lambda values for {} coarse resolutions",
                self.lambda.len(),
                num_coarse
            )));
        };
        if let Some(bad) = lambda.iter().find(|l| !(**l >= 0.0)) {
            return Err(TrainError::BadConfig(format!(
                "lambda must be nonnegative, got {bad}"
            )));
        }
        Ok(lambda)
    }

    fn validate(&self, dataset: &MultiResDataset) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        let expected = dataset.num_coarse() + 1;
        if self.model_specs.len() != expected {
            return Err(TrainError::BadConfig(format!(
                "{} model specs for {} resolutions",
                self.model_specs.len(),
                expected
            )));
        }
        for (r, (spec, layer)) in self
            .model_specs
            .iter()
            .zip(std::iter::once(&dataset.fine).chain(dataset.coarse.iter()))
            .enumerate()
        {
            if spec.input_dim != layer.feature_dim {
                return Err(TrainError::BadConfig(format!(
                    "model spec for resolution {r} expects input dim {}, layer has {}",
                    spec.input_dim, layer.feature_dim
                )));
            }
        }
        Ok(())
    }
}

/// Loss values recorded for one epoch: the labeled cross-entropy per
/// trained resolution, then each active consistency (or manifold) term.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub labeled: Vec<f64>,
    pub consistency: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub method: Method,
    pub seed: u64,
    pub lambda: Vec<f64>,
    pub epochs: usize,
    pub fine: Classifier,
    pub coarse: Vec<Classifier>,
    pub attention: Vec<AttentionParams>,
    /// Column names matching `EpochLoss` entries (labeled, then consistency).
    pub loss_columns: Vec<String>,
    pub loss_curve: Vec<EpochLoss>,
    pub fine_train_accuracy: f64,
    pub fine_test_accuracy: f64,
    /// Instances pseudo-labeled (Propagate) or moved to the labeled sets
    /// (Augment); None for the other methods.
    pub pseudo_labels: Option<usize>,
    pub warnings: Vec<String>,
    /// Excluded from the metrics file so outputs stay byte-reproducible.
    pub wall_time_secs: f64,
}

// ── Objective assembly ──────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq)]
enum PairKind {
    None,
    Mil,
    Attention,
}

impl PairKind {
    fn for_method(method: Method) -> PairKind {
        match method {
            Method::MultiResMil => PairKind::Mil,
            Method::MultiResAttention => PairKind::Attention,
            _ => PairKind::None,
        }
    }
}

/// Tape handles of one assembled objective.
pub struct ObjectiveParts {
    pub total: TensorId,
    pub fine_ce: TensorId,
    /// Per coarse layer; None when the layer has no labeled instances.
    pub coarse_ce: Vec<Option<TensorId>>,
    /// Unweighted consistency term per pair; None when λ_k = 0, the mode
    /// has no pair term, or the pair has no usable groups.
    pub consistency: Vec<Option<TensorId>>,
}

struct StepInputs<'a> {
    fine_batch: &'a [&'a Instance],
    coarse_batches: &'a [Vec<&'a Instance>],
    pair_batches: &'a [Vec<&'a Instance>],
    fine_unlabeled: &'a [&'a Instance],
    corrs: &'a [Option<CorrespondenceMap>],
    lambda: &'a [f64],
    kind: PairKind,
    smax: SmaxConfig,
    reduce: Reduce,
}

/// Build one training step's loss graph. Terms with empty batches are
/// omitted; the total is the λ-weighted sum of everything present.
fn build_objective_step(
    tape: &mut Tape,
    fine: &TapedModel,
    coarse: &[TapedModel],
    attention: &[Option<TapedAttention>],
    inputs: &StepInputs<'_>,
) -> Result<ObjectiveParts, TrainError> {
    let fine_ce = cross_entropy_loss(tape, fine, inputs.fine_batch)?;
    let mut total = fine_ce;

    let mut coarse_ce = Vec::with_capacity(coarse.len());
    for (model, batch) in coarse.iter().zip(inputs.coarse_batches) {
        if batch.is_empty() {
            coarse_ce.push(None);
            continue;
        }
        let ce = cross_entropy_loss(tape, model, batch)?;
        total = tape.add(total, ce)?;
        coarse_ce.push(Some(ce));
    }

    let mut consistency = Vec::with_capacity(coarse.len());
    for (k, batch) in inputs.pair_batches.iter().enumerate() {
        let lambda = inputs.lambda.get(k).copied().unwrap_or(0.0);
        if batch.is_empty() || lambda == 0.0 || inputs.kind == PairKind::None {
            consistency.push(None);
            continue;
        }
        let corr = inputs.corrs[k]
            .as_ref()
            .expect("correspondence built for every active pair");
        let mode = match inputs.kind {
            PairKind::Mil => ConsistencyMode::Mil(inputs.smax),
            PairKind::Attention => ConsistencyMode::Attention(
                attention[k]
                    .as_ref()
                    .expect("attention registered for every active pair"),
            ),
            PairKind::None => unreachable!(),
        };
        let term = pair_consistency(
            tape,
            batch,
            inputs.fine_unlabeled,
            corr,
            &mode,
            &coarse[k],
            fine,
            inputs.reduce,
        )?;
        if term.groups_used == 0 {
            consistency.push(None);
            continue;
        }
        let weighted = tape.scale(term.loss, lambda)?;
        total = tape.add(total, weighted)?;
        consistency.push(Some(term.loss));
    }

    Ok(ObjectiveParts {
        total,
        fine_ce,
        coarse_ce,
        consistency,
    })
}

/// Assemble the full-batch joint objective on the tape: the labeled
/// cross-entropy of every registered model plus λ-weighted consistency
/// terms over all unlabeled coarse instances. The pair mode follows
/// `cfg.method` (no pair terms for non-multires methods).
pub fn assemble_objective(
    tape: &mut Tape,
    dataset: &MultiResDataset,
    corrs: &[CorrespondenceMap],
    fine: &TapedModel,
    coarse: &[TapedModel],
    attention: &[Option<TapedAttention>],
    cfg: &TrainConfig,
) -> Result<ObjectiveParts, TrainError> {
    if dataset.fine.labeled.is_empty() {
        return Err(TrainError::NoLabeledData(0));
    }
    let kind = PairKind::for_method(cfg.method);
    let lambda = cfg.lambda_per_pair(coarse.len())?;
    if kind != PairKind::None && corrs.len() != coarse.len() {
        return Err(TrainError::BadConfig(format!(
            "{} correspondence maps for {} coarse resolutions",
            corrs.len(),
            coarse.len()
        )));
    }
    let fine_batch: Vec<&Instance> = dataset.fine.labeled.iter().collect();
    let coarse_batches: Vec<Vec<&Instance>> = coarse
        .iter()
        .enumerate()
        .map(|(k, _)| dataset.coarse[k].labeled.iter().collect())
        .collect();
    let pair_batches: Vec<Vec<&Instance>> = coarse
        .iter()
        .enumerate()
        .map(|(k, _)| dataset.coarse[k].unlabeled.iter().collect())
        .collect();
    let fine_unlabeled: Vec<&Instance> = dataset.fine.unlabeled.iter().collect();
    let corrs: Vec<Option<CorrespondenceMap>> = corrs.iter().map(|c| Some(c.clone())).collect();
    build_objective_step(
        tape,
        fine,
        coarse,
        attention,
        &StepInputs {
            fine_batch: &fine_batch,
            coarse_batches: &coarse_batches,
            pair_batches: &pair_batches,
            fine_unlabeled: &fine_unlabeled,
            corrs: &corrs,
            lambda: &lambda,
            kind,
            smax: cfg.smax,
            reduce: cfg.consistency_reduce,
        },
    )
}

// ── The joint gradient-descent loop ─────────────────────────────────────

/// Mini-batch index lists for one epoch. Full-batch (batch = 0 or ≥ n)
/// keeps the natural order and consumes no randomness.
fn make_chunks(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![];
    }
    let mut order: Vec<usize> = (0..n).collect();
    if batch == 0 || batch >= n {
        return vec![order];
    }
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// The step's slice of a population: chunk `step` (cycling) of the epoch's
/// chunk list, or nothing when the population is empty.
fn pick_batch<'a>(chunks: &[Vec<usize>], step: usize, pop: &[&'a Instance]) -> Vec<&'a Instance> {
    if chunks.is_empty() {
        return vec![];
    }
    chunks[step % chunks.len()].iter().map(|&i| pop[i]).collect()
}

struct JointOutcome {
    fine: Classifier,
    coarse: Vec<Classifier>,
    attention: Vec<AttentionParams>,
    columns: Vec<String>,
    curve: Vec<EpochLoss>,
}

/// Gradient descent on the joint objective. `kind` selects the pair
/// penalty (None trains supervised terms only); `train_coarse` controls
/// whether coarse models exist at all (fine-only methods pass false).
/// All randomness is derived from `seed`.
fn train_joint(
    dataset: &MultiResDataset,
    cfg: &TrainConfig,
    kind: PairKind,
    train_coarse: bool,
    seed: u64,
) -> Result<JointOutcome, TrainError> {
    if dataset.fine.labeled.is_empty() {
        return Err(TrainError::NoLabeledData(0));
    }
    let k_count = if train_coarse { dataset.num_coarse() } else { 0 };
    let lambda = cfg.lambda_per_pair(k_count)?;

    let mut fine_model = Classifier::init(
        cfg.model_specs[0].clone(),
        derive_seed(seed, STREAM_FINE_INIT),
    );
    let mut coarse_models: Vec<Classifier> = (0..k_count)
        .map(|k| {
            Classifier::init(
                cfg.model_specs[k + 1].clone(),
                derive_seed(seed, (k + 1) as u64),
            )
        })
        .collect();

    // pair k is active when its penalty can contribute gradients
    let pair_active: Vec<bool> = (0..k_count)
        .map(|k| {
            kind != PairKind::None && lambda[k] != 0.0 && !dataset.coarse[k].unlabeled.is_empty()
        })
        .collect();
    let mut attention: Vec<Option<AttentionParams>> = (0..k_count)
        .map(|k| {
            (kind == PairKind::Attention).then(|| {
                AttentionParams::init(
                    cfg.align_dim,
                    cfg.model_specs[0].hidden_len(),
                    cfg.model_specs[k + 1].hidden_len(),
                    DEFAULT_ATTENTION_INIT_SCALE,
                    derive_seed(seed, STREAM_ATTENTION_INIT + (k + 1) as u64),
                )
            })
        })
        .collect();
    let corrs: Vec<Option<CorrespondenceMap>> = (0..k_count)
        .map(|k| {
            pair_active[k]
                .then(|| build_correspondence(&dataset.coarse[k], &dataset.fine))
                .transpose()
        })
        .collect::<Result<_, _>>()?;

    let mut labeled_rngs: Vec<ChaCha8Rng> = (0..=k_count)
        .map(|r| stream_rng(seed, STREAM_LABELED_SHUFFLE + r as u64))
        .collect();
    let mut pair_rngs: Vec<ChaCha8Rng> = (0..k_count)
        .map(|k| stream_rng(seed, STREAM_PAIR_SHUFFLE + (k + 1) as u64))
        .collect();

    let fine_labeled: Vec<&Instance> = dataset.fine.labeled.iter().collect();
    let coarse_labeled: Vec<Vec<&Instance>> = (0..k_count)
        .map(|k| dataset.coarse[k].labeled.iter().collect())
        .collect();
    let fine_unlabeled: Vec<&Instance> = dataset.fine.unlabeled.iter().collect();
    let pair_pops: Vec<Vec<&Instance>> = (0..k_count)
        .map(|k| {
            if pair_active[k] {
                dataset.coarse[k].unlabeled.iter().collect()
            } else {
                vec![]
            }
        })
        .collect();

    let mut columns = vec!["ce_fine".to_string()];
    columns.extend((0..k_count).map(|k| format!("ce_coarse{}", k + 1)));
    columns.extend(
        (0..k_count)
            .filter(|k| pair_active[*k])
            .map(|k| format!("consistency{}", k + 1)),
    );

    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let fine_chunks = make_chunks(fine_labeled.len(), cfg.batch_size, &mut labeled_rngs[0]);
        let coarse_chunks: Vec<Vec<Vec<usize>>> = (0..k_count)
            .map(|k| {
                make_chunks(
                    coarse_labeled[k].len(),
                    cfg.batch_size,
                    &mut labeled_rngs[k + 1],
                )
            })
            .collect();
        let pair_chunks: Vec<Vec<Vec<usize>>> = (0..k_count)
            .map(|k| make_chunks(pair_pops[k].len(), cfg.batch_size, &mut pair_rngs[k]))
            .collect();
        let steps = fine_chunks
            .len()
            .max(coarse_chunks.iter().map(Vec::len).max().unwrap_or(0))
            .max(pair_chunks.iter().map(Vec::len).max().unwrap_or(0));

        let mut fine_sum = 0.0;
        let mut coarse_sums = vec![0.0; k_count];
        let mut pair_sums = vec![0.0; k_count];
        for step in 0..steps {
            let fine_batch = pick_batch(&fine_chunks, step, &fine_labeled);
            let coarse_batches: Vec<Vec<&Instance>> = (0..k_count)
                .map(|k| pick_batch(&coarse_chunks[k], step, &coarse_labeled[k]))
                .collect();
            let pair_batches: Vec<Vec<&Instance>> = (0..k_count)
                .map(|k| pick_batch(&pair_chunks[k], step, &pair_pops[k]))
                .collect();

            let mut tape = Tape::new();
            let taped_fine = fine_model.register(&mut tape);
            let taped_coarse: Vec<TapedModel> = coarse_models
                .iter()
                .map(|m| m.register(&mut tape))
                .collect();
            let taped_attention: Vec<Option<TapedAttention>> = attention
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    a.as_ref()
                        .filter(|_| pair_active[k])
                        .map(|p| p.register(&mut tape))
                })
                .collect();

            let parts = build_objective_step(
                &mut tape,
                &taped_fine,
                &taped_coarse,
                &taped_attention,
                &StepInputs {
                    fine_batch: &fine_batch,
                    coarse_batches: &coarse_batches,
                    pair_batches: &pair_batches,
                    fine_unlabeled: &fine_unlabeled,
                    corrs: &corrs,
                    lambda: &lambda,
                    kind,
                    smax: cfg.smax,
                    reduce: cfg.consistency_reduce,
                },
            )
            .map_err(|e| mark_divergence(epoch, e))?;

            fine_sum += tape.value(parts.fine_ce).item();
            for (k, ce) in parts.coarse_ce.iter().enumerate() {
                if let Some(id) = ce {
                    coarse_sums[k] += tape.value(*id).item();
                }
            }
            for (k, term) in parts.consistency.iter().enumerate() {
                if let Some(id) = term {
                    pair_sums[k] += tape.value(*id).item();
                }
            }

            tape.backward(parts.total)
                .map_err(|e| mark_divergence(epoch, e.into()))?;
            fine_model.apply_gradients(&tape, &taped_fine, cfg.lr);
            for (model, taped) in coarse_models.iter_mut().zip(&taped_coarse) {
                model.apply_gradients(&tape, taped, cfg.lr);
            }
            for (params, taped) in attention.iter_mut().zip(&taped_attention) {
                if let (Some(p), Some(t)) = (params.as_mut(), taped) {
                    p.apply_gradients(&tape, t, cfg.lr);
                }
            }
        }

        let denom = steps as f64;
        let mut labeled = vec![fine_sum / denom];
        labeled.extend(coarse_sums.iter().map(|s| s / denom));
        let consistency: Vec<f64> = (0..k_count)
            .filter(|k| pair_active[*k])
            .map(|k| pair_sums[k] / denom)
            .collect();
        curve.push(EpochLoss {
            labeled,
            consistency,
        });
    }

    Ok(JointOutcome {
        fine: fine_model,
        coarse: coarse_models,
        attention: attention.into_iter().flatten().collect(),
        columns,
        curve,
    })
}

// ── Public training entry points ────────────────────────────────────────

/// Train with the configured method and report accuracy on the dataset's
/// held-out fine test split.
pub fn train(dataset: &MultiResDataset, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    let start = Instant::now();
    cfg.validate(dataset)?;
    let reported_lambda = if cfg.method.uses_lambda() {
        cfg.lambda_per_pair(dataset.num_coarse())?
    } else {
        vec![]
    };

    let mut result = match cfg.method {
        Method::OnlyFine => {
            let out = train_joint(dataset, cfg, PairKind::None, false, cfg.seed)?;
            result_from_joint(cfg, out, None, vec![])
        }
        Method::MultiResMil => {
            let out = train_joint(dataset, cfg, PairKind::Mil, true, cfg.seed)?;
            result_from_joint(cfg, out, None, vec![])
        }
        Method::MultiResAttention => {
            let out = train_joint(dataset, cfg, PairKind::Attention, true, cfg.seed)?;
            result_from_joint(cfg, out, None, vec![])
        }
        Method::SsrManifold => run_ssr_manifold(dataset, cfg)?,
        Method::Propagate => run_propagate(dataset, cfg)?,
        Method::Augment => run_augment(dataset, cfg)?,
    };
    result.lambda = reported_lambda;
    result.fine_train_accuracy = evaluate(&result.fine, &dataset.fine.labeled)?;
    result.fine_test_accuracy = evaluate(&result.fine, &dataset.fine_test)?;
    result.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(result)
}

fn result_from_joint(
    cfg: &TrainConfig,
    out: JointOutcome,
    pseudo_labels: Option<usize>,
    warnings: Vec<String>,
) -> TrainResult {
    TrainResult {
        method: cfg.method,
        seed: cfg.seed,
        lambda: vec![],
        epochs: cfg.epochs,
        fine: out.fine,
        coarse: out.coarse,
        attention: out.attention,
        loss_columns: out.columns,
        loss_curve: out.curve,
        fine_train_accuracy: f64::NAN,
        fine_test_accuracy: f64::NAN,
        pseudo_labels,
        warnings,
        wall_time_secs: 0.0,
    }
}

/// Supervised training of the fine model alone.
pub fn train_only_fine(
    dataset: &MultiResDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    let mut cfg = cfg.clone();
    cfg.method = Method::OnlyFine;
    train(dataset, &cfg)
}

/// Fine model with a Gaussian-weighted manifold penalty over a seeded
/// subsample of unlabeled instances.
pub fn train_ssr_manifold(
    dataset: &MultiResDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    let mut cfg = cfg.clone();
    cfg.method = Method::SsrManifold;
    train(dataset, &cfg)
}

/// Coarse-to-fine pseudo-labeling baseline.
pub fn train_propagate(
    dataset: &MultiResDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    let mut cfg = cfg.clone();
    cfg.method = Method::Propagate;
    train(dataset, &cfg)
}

/// Iterative agreement-gated self-training baseline.
pub fn train_augment(
    dataset: &MultiResDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    let mut cfg = cfg.clone();
    cfg.method = Method::Augment;
    train(dataset, &cfg)
}

// ── SSR manifold baseline ───────────────────────────────────────────────

/// Pairwise Gaussian weights over a subsample: w_ij = exp(−‖x_i − x_j‖² /
/// (2σ²)) with σ the median pairwise distance (1.0 when the points
/// coincide). Returns (σ, upper-triangle weights, whether σ fell back).
pub(crate) fn gaussian_pair_weights(features: &[&[f64]]) -> (f64, Vec<(usize, usize, f64)>, bool) {
    let n = features.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = features[i]
                .iter()
                .zip(features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    let mut sorted = dists.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    let fallback = median == 0.0;
    let sigma = if fallback { 1.0 } else { median };

    let mut weights = Vec::with_capacity(dists.len());
    let mut next = 0;
    for i in 0..n {
        for j in i + 1..n {
            let d = dists[next];
            next += 1;
            weights.push((i, j, (-d * d / (2.0 * sigma * sigma)).exp()));
        }
    }
    (sigma, weights, fallback)
}

fn run_ssr_manifold(
    dataset: &MultiResDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if dataset.fine.labeled.is_empty() {
        return Err(TrainError::NoLabeledData(0));
    }
    let available = dataset.fine.unlabeled.len();
    if cfg.ssr_subsample > available {
        return Err(TrainError::SubsampleTooLarge {
            requested: cfg.ssr_subsample,
            available,
        });
    }
    if cfg.ssr_subsample < 2 {
        return Err(TrainError::BadConfig(
            "manifold subsample needs at least 2 instances".into(),
        ));
    }

    let mut warnings = vec![];
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut stream_rng(cfg.seed, STREAM_MANIFOLD_SUBSAMPLE));
    let sub: Vec<&Instance> = order[..cfg.ssr_subsample]
        .iter()
        .map(|&i| &dataset.fine.unlabeled[i])
        .collect();
    let features: Vec<&[f64]> = sub.iter().map(|i| i.features.as_slice()).collect();
    let (_, pair_weights, fallback) = gaussian_pair_weights(&features);
    if fallback {
        warnings.push(
            "manifold bandwidth fell back to 1.0 (median pairwise distance is zero)".into(),
        );
    }

    let mut model = Classifier::init(
        cfg.model_specs[0].clone(),
        derive_seed(cfg.seed, STREAM_FINE_INIT),
    );
    let labeled: Vec<&Instance> = dataset.fine.labeled.iter().collect();
    let mut ce_rng = stream_rng(cfg.seed, STREAM_LABELED_SHUFFLE);
    let mut pair_rng = stream_rng(cfg.seed, STREAM_MANIFOLD_SHUFFLE);

    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ce_chunks = make_chunks(labeled.len(), cfg.batch_size, &mut ce_rng);
        let pair_chunks = make_chunks(pair_weights.len(), cfg.batch_size, &mut pair_rng);
        let steps = ce_chunks.len().max(pair_chunks.len());

        let mut ce_sum = 0.0;
        let mut manifold_sum = 0.0;
        for step in 0..steps {
            let batch: Vec<&Instance> = ce_chunks[step % ce_chunks.len()]
                .iter()
                .map(|&i| labeled[i])
                .collect();
            let pairs: Vec<&(usize, usize, f64)> = pair_chunks[step % pair_chunks.len()]
                .iter()
                .map(|&i| &pair_weights[i])
                .collect();

            let mut tape = Tape::new();
            let taped = model.register(&mut tape);
            let step_result = (|| -> Result<(TensorId, TensorId, TensorId), TrainError> {
                let ce = cross_entropy_loss(&mut tape, &taped, &batch)?;
                // predict each subsample point once, then wire up the pairs
                let mut preds: BTreeMap<usize, TensorId> = BTreeMap::new();
                for &&(i, j, _) in &pairs {
                    for idx in [i, j] {
                        if let std::collections::btree_map::Entry::Vacant(e) = preds.entry(idx) {
                            e.insert(taped.predict_features(&mut tape, &sub[idx].features)?);
                        }
                    }
                }
                let mut terms = Vec::with_capacity(pairs.len());
                for &&(i, j, w) in &pairs {
                    let diff = tape.sub(preds[&i], preds[&j])?;
                    let sq = tape.square(diff)?;
                    terms.push(tape.scale(sq, w)?);
                }
                let stacked = tape.concat(&terms)?;
                let manifold = tape.sum(stacked)?;
                let weighted = tape.scale(manifold, cfg.ssr_gamma)?;
                let total = tape.add(ce, weighted)?;
                Ok((total, ce, manifold))
            })();
            let (total, ce, manifold) = step_result.map_err(|e| mark_divergence(epoch, e))?;

            ce_sum += tape.value(ce).item();
            manifold_sum += tape.value(manifold).item();
            tape.backward(total)
                .map_err(|e| mark_divergence(epoch, e.into()))?;
            model.apply_gradients(&tape, &taped, cfg.lr);
        }
        let denom = steps as f64;
        curve.push(EpochLoss {
            labeled: vec![ce_sum / denom],
            consistency: vec![manifold_sum / denom],
        });
    }

    Ok(TrainResult {
        method: cfg.method,
        seed: cfg.seed,
        lambda: vec![],
        epochs: cfg.epochs,
        fine: model,
        coarse: vec![],
        attention: vec![],
        loss_columns: vec!["ce_fine".into(), "manifold".into()],
        loss_curve: curve,
        fine_train_accuracy: f64::NAN,
        fine_test_accuracy: f64::NAN,
        pseudo_labels: None,
        warnings,
        wall_time_secs: 0.0,
    })
}

// ── Propagate baseline ──────────────────────────────────────────────────

/// Train one model on labeled instances alone (used for the coarse phase
/// of Propagate, where no curve is recorded).
fn train_single_ce(
    instances: &[&Instance],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    init_seed: u64,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<Classifier, TrainError> {
    let mut model = Classifier::init(spec.clone(), init_seed);
    for epoch in 0..cfg.epochs {
        for chunk in make_chunks(instances.len(), cfg.batch_size, shuffle_rng) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| instances[i]).collect();
            let mut tape = Tape::new();
            let taped = model.register(&mut tape);
            let ce = cross_entropy_loss(&mut tape, &taped, &batch)
                .map_err(|e| mark_divergence(epoch, e.into()))?;
            tape.backward(ce)
                .map_err(|e| mark_divergence(epoch, e.into()))?;
            model.apply_gradients(&tape, &taped, cfg.lr);
        }
    }
    Ok(model)
}

fn run_propagate(dataset: &MultiResDataset, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    if dataset.num_coarse() == 0 {
        return Err(TrainError::BadConfig(
            "propagate needs at least one coarse resolution".into(),
        ));
    }
    let mut warnings = vec![];

    // phase 1: supervised coarse models
    let mut coarse_models = Vec::with_capacity(dataset.num_coarse());
    for (k, layer) in dataset.coarse.iter().enumerate() {
        if layer.labeled.is_empty() {
            return Err(TrainError::NoLabeledData(k + 1));
        }
        let refs: Vec<&Instance> = layer.labeled.iter().collect();
        let mut rng = stream_rng(cfg.seed, STREAM_LABELED_SHUFFLE + (k + 1) as u64);
        coarse_models.push(train_single_ce(
            &refs,
            &cfg.model_specs[k + 1],
            cfg,
            derive_seed(cfg.seed, (k + 1) as u64),
            &mut rng,
        )?);
    }

    // phase 2: confidence-gated pseudo-labels onto unlabeled fine members
    let unlabeled_ids: BTreeSet<usize> = dataset.fine.unlabeled.iter().map(|i| i.id).collect();
    let mut pseudo: BTreeMap<usize, Label> = BTreeMap::new();
    for (k, layer) in dataset.coarse.iter().enumerate() {
        let corr = build_correspondence(layer, &dataset.fine)?;
        for inst in &layer.unlabeled {
            let p = coarse_models[k].predict_value(&inst.features);
            if (p - 0.5).abs() < cfg.propagate_confidence {
                continue;
            }
            let label = if p >= 0.5 {
                Label::Positive
            } else {
                Label::Negative
            };
            for fid in corr.group(inst.id).unwrap_or(&[]) {
                if unlabeled_ids.contains(fid) {
                    pseudo.entry(*fid).or_insert(label);
                }
            }
        }
    }
    let pseudo_count = pseudo.len();
    if pseudo_count == 0 {
        warnings.push("no pseudo-labels passed the confidence gate; training on fine labels alone".into());
    }

    // phase 3: fine model on true labels plus pseudo-labels; reusing the
    // joint loop keeps the no-pseudo-label fallback bit-identical to
    // fine-only training
    let mut fine_labeled = dataset.fine.labeled.clone();
    let mut fine_unlabeled = Vec::with_capacity(dataset.fine.unlabeled.len() - pseudo_count);
    for inst in &dataset.fine.unlabeled {
        if let Some(label) = pseudo.get(&inst.id) {
            fine_labeled.push(Instance {
                label: *label,
                ..inst.clone()
            });
        } else {
            fine_unlabeled.push(inst.clone());
        }
    }
    let fine_layer = ResolutionLayer::new(0, dataset.fine.feature_dim, fine_labeled, fine_unlabeled)?;
    let working = MultiResDataset::new(
        fine_layer,
        dataset.coarse.clone(),
        dataset.location_dim,
        vec![],
    )?;
    let out = train_joint(&working, cfg, PairKind::None, false, cfg.seed)?;

    let mut result = result_from_joint(cfg, out, Some(pseudo_count), warnings);
    result.coarse = coarse_models;
    Ok(result)
}

// ── Augment baseline ────────────────────────────────────────────────────

struct AugmentPools {
    fine_labeled: Vec<Instance>,
    fine_unlabeled: Vec<Instance>,
    coarse_labeled: Vec<Vec<Instance>>,
    coarse_unlabeled: Vec<Vec<Instance>>,
}

impl AugmentPools {
    fn dataset(&self, template: &MultiResDataset) -> Result<MultiResDataset, TrainError> {
        let fine = ResolutionLayer::new(
            0,
            template.fine.feature_dim,
            self.fine_labeled.clone(),
            self.fine_unlabeled.clone(),
        )?;
        let coarse = template
            .coarse
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                ResolutionLayer::new(
                    layer.resolution_id,
                    layer.feature_dim,
                    self.coarse_labeled[k].clone(),
                    self.coarse_unlabeled[k].clone(),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(MultiResDataset::new(
            fine,
            coarse,
            template.location_dim,
            vec![],
        )?)
    }
}

/// One agreement round: move gated instances from the unlabeled pools to
/// the labeled pools and return how many moved (fine + coarse).
fn augment_round(
    pools: &mut AugmentPools,
    corrs: &[CorrespondenceMap],
    fine_model: &Classifier,
    coarse_models: &[Classifier],
    cfg: &TrainConfig,
) -> usize {
    let threshold = cfg.augment_threshold;
    let mut fine_moves: BTreeMap<usize, Label> = BTreeMap::new();
    let mut coarse_moves: Vec<BTreeMap<usize, Label>> =
        vec![BTreeMap::new(); pools.coarse_unlabeled.len()];

    for (k, unlabeled) in pools.coarse_unlabeled.iter().enumerate() {
        let fine_by_id: BTreeMap<usize, &Instance> = pools
            .fine_unlabeled
            .iter()
            .filter(|i| !fine_moves.contains_key(&i.id))
            .map(|i| (i.id, i))
            .collect();
        for inst in unlabeled {
            let members: Vec<&Instance> = corrs[k]
                .group(inst.id)
                .unwrap_or(&[])
                .iter()
                .filter_map(|fid| fine_by_id.get(fid).copied())
                .collect();
            if members.is_empty() {
                continue;
            }
            let coarse_pred = coarse_models[k].predict_value(&inst.features);
            let preds: Vec<f64> = members
                .iter()
                .map(|m| fine_model.predict_value(&m.features))
                .collect();
            let fine_agg = smax_value(&preds, cfg.smax.base);

            let agree = (coarse_pred - fine_agg).abs() <= 1.0 - threshold;
            let confident = (coarse_pred - 0.5).abs() >= threshold - 0.5
                && (fine_agg - 0.5).abs() >= threshold - 0.5;
            let same_side = (coarse_pred >= 0.5) == (fine_agg >= 0.5);
            if !(agree && confident && same_side) {
                continue;
            }

            if coarse_pred >= 0.5 {
                // a positive group certifies only its strongest member
                let best = preds
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite predictions"))
                    .map(|(idx, _)| idx)
                    .expect("group is nonempty");
                fine_moves.insert(members[best].id, Label::Positive);
                coarse_moves[k].insert(inst.id, Label::Positive);
            } else {
                // a negative group certifies every member
                for m in &members {
                    fine_moves.insert(m.id, Label::Negative);
                }
                coarse_moves[k].insert(inst.id, Label::Negative);
            }
        }
    }

    let moved = fine_moves.len() + coarse_moves.iter().map(BTreeMap::len).sum::<usize>();
    apply_moves(
        &mut pools.fine_labeled,
        &mut pools.fine_unlabeled,
        &fine_moves,
    );
    for (k, moves) in coarse_moves.iter().enumerate() {
        apply_moves(
            &mut pools.coarse_labeled[k],
            &mut pools.coarse_unlabeled[k],
            moves,
        );
    }
    moved
}

fn apply_moves(
    labeled: &mut Vec<Instance>,
    unlabeled: &mut Vec<Instance>,
    moves: &BTreeMap<usize, Label>,
) {
    if moves.is_empty() {
        return;
    }
    labeled.extend(unlabeled.iter().filter(|i| moves.contains_key(&i.id)).map(
        |i| Instance {
            label: moves[&i.id],
            ..i.clone()
        },
    ));
    unlabeled.retain(|i| !moves.contains_key(&i.id));
}

fn run_augment(dataset: &MultiResDataset, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    if dataset.num_coarse() == 0 {
        return Err(TrainError::BadConfig(
            "augment needs at least one coarse resolution".into(),
        ));
    }
    let corrs: Vec<CorrespondenceMap> = dataset
        .coarse
        .iter()
        .map(|layer| build_correspondence(layer, &dataset.fine))
        .collect::<Result<_, _>>()?;
    let mut pools = AugmentPools {
        fine_labeled: dataset.fine.labeled.clone(),
        fine_unlabeled: dataset.fine.unlabeled.clone(),
        coarse_labeled: dataset.coarse.iter().map(|l| l.labeled.clone()).collect(),
        coarse_unlabeled: dataset.coarse.iter().map(|l| l.unlabeled.clone()).collect(),
    };

    let mut moved_total = 0;
    for round in 0.. {
        let working = pools.dataset(dataset)?;
        let out = train_joint(
            &working,
            cfg,
            PairKind::None,
            true,
            derive_seed(cfg.seed, STREAM_AUGMENT_ROUND + round as u64),
        )?;
        if round == cfg.augment_max_iters {
            return Ok(result_from_joint(cfg, out, Some(moved_total), vec![]));
        }
        let moved = augment_round(&mut pools, &corrs, &out.fine, &out.coarse, cfg);
        moved_total += moved;
        if moved == 0 {
            return Ok(result_from_joint(cfg, out, Some(moved_total), vec![]));
        }
    }
    unreachable!("the augment loop always returns");
}

// ── Cross-validation, evaluation, artifacts ─────────────────────────────

/// The λ grid used when none is supplied: a decade ladder broadcast to
/// every coarse resolution.
pub fn default_lambda_grid(num_coarse: usize) -> Vec<Vec<f64>> {
    [0.01, 0.1, 1.0, 10.0]
        .iter()
        .map(|&l| vec![l; num_coarse.max(1)])
        .collect()
}

pub struct CvReport {
    pub best: Vec<f64>,
    /// (candidate, mean validation accuracy), in grid order.
    pub table: Vec<(Vec<f64>, f64)>,
}

fn lexicographically_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    a.len() < b.len()
}

/// Pick λ by k-fold cross-validation on the fine labeled set: each fold
/// trains on the remaining labeled instances (unlabeled data unchanged)
/// and validates on the held-out part. Ties go to the lexicographically
/// smaller λ (less regularization).
pub fn cross_validate_lambda(
    dataset: &MultiResDataset,
    cfg: &TrainConfig,
    grid: &[Vec<f64>],
    folds: usize,
) -> Result<CvReport, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::BadConfig("empty lambda grid".into()));
    }
    let splits = split_folds(&dataset.fine, folds, derive_seed(cfg.seed, STREAM_CV_SPLIT))?;
    let mut table: Vec<(Vec<f64>, f64)> = Vec::with_capacity(grid.len());
    for candidate in grid {
        let mut sum = 0.0;
        for (train_part, validation) in &splits {
            let fold_fine = ResolutionLayer::new(
                0,
                dataset.fine.feature_dim,
                train_part.clone(),
                dataset.fine.unlabeled.clone(),
            )?;
            let fold_dataset = MultiResDataset::new(
                fold_fine,
                dataset.coarse.clone(),
                dataset.location_dim,
                validation.clone(),
            )?;
            let mut fold_cfg = cfg.clone();
            fold_cfg.lambda = candidate.clone();
            sum += train(&fold_dataset, &fold_cfg)?.fine_test_accuracy;
        }
        table.push((candidate.clone(), sum / splits.len() as f64));
    }

    let mut best = table[0].clone();
    for (candidate, acc) in &table[1..] {
        let better = *acc > best.1
            || (*acc == best.1 && lexicographically_less(candidate, &best.0));
        if better {
            best = (candidate.clone(), *acc);
        }
    }
    Ok(CvReport {
        best: best.0,
        table,
    })
}

/// Restrict the fine labeled set to a seeded subsample of `budget`
/// instances, moving the rest (with labels stripped) into the unlabeled
/// pool. Subsamples are nested: for one seed, a smaller budget selects a
/// subset of any larger budget's instances. `budget` equal to the pool
/// size returns the dataset unchanged.
pub fn subsample_fine_labeled(
    dataset: &MultiResDataset,
    budget: usize,
    seed: u64,
) -> Result<MultiResDataset, TrainError> {
    let pool = dataset.fine.labeled.len();
    if budget > pool {
        return Err(TrainError::BudgetTooLarge {
            requested: budget,
            available: pool,
        });
    }
    if budget == 0 {
        return Err(TrainError::BadConfig("label budget must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_BUDGET_SUBSAMPLE));
    let keep: BTreeSet<usize> = order[..budget].iter().copied().collect();

    let mut labeled = Vec::with_capacity(budget);
    let mut unlabeled = dataset.fine.unlabeled.clone();
    for (i, inst) in dataset.fine.labeled.iter().enumerate() {
        if keep.contains(&i) {
            labeled.push(inst.clone());
        } else {
            unlabeled.push(Instance {
                label: Label::Unlabeled,
                ..inst.clone()
            });
        }
    }
    let fine = ResolutionLayer::new(0, dataset.fine.feature_dim, labeled, unlabeled)?;
    Ok(MultiResDataset::new(
        fine,
        dataset.coarse.clone(),
        dataset.location_dim,
        dataset.fine_test.clone(),
    )?)
}

/// Accuracy at threshold 0.5; a prediction of exactly 0.5 counts as
/// positive. All instances must be labeled.
pub fn evaluate(model: &Classifier, instances: &[Instance]) -> Result<f64, TrainError> {
    if instances.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let mut correct = 0usize;
    for inst in instances {
        let truth = match inst.label {
            Label::Positive => true,
            Label::Negative => false,
            Label::Unlabeled => return Err(TrainError::UnlabeledEvaluation(inst.id)),
        };
        if (model.predict_value(&inst.features) >= 0.5) == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// The metrics file body: run parameters, final accuracies, and the full
/// loss curve. Wall time is deliberately omitted so the same (config,
/// seed) always produces byte-identical output.
pub fn metrics_string(result: &TrainResult) -> String {
    let mut out = String::new();
    writeln!(out, "method {}", result.method.name()).unwrap();
    writeln!(out, "seed {}", result.seed).unwrap();
    let lambda = if result.method.uses_lambda() {
        result
            .lambda
            .iter()
            .map(|l| format_f64(*l))
            .collect::<Vec<_>>()
            .join(",")
    } else {
        "none".to_string()
    };
    writeln!(out, "lambda {lambda}").unwrap();
    writeln!(out, "epochs {}", result.epochs).unwrap();
    writeln!(
        out,
        "fine_train_accuracy {}",
        format_f64(result.fine_train_accuracy)
    )
    .unwrap();
    writeln!(
        out,
        "fine_test_accuracy {}",
        format_f64(result.fine_test_accuracy)
    )
    .unwrap();
    match result.pseudo_labels {
        Some(n) => writeln!(out, "pseudo_labels {n}").unwrap(),
        None => writeln!(out, "pseudo_labels none").unwrap(),
    }
    for warning in &result.warnings {
        writeln!(out, "warning {warning}").unwrap();
    }
    writeln!(out, "epoch {}", result.loss_columns.join(" ")).unwrap();
    for (epoch, loss) in result.loss_curve.iter().enumerate() {
        write!(out, "{epoch}").unwrap();
        for v in loss.labeled.iter().chain(&loss.consistency) {
            write!(out, " {}", format_f64(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum RunIoError {
    #[error(transparent)]
    Model(#[from] CheckpointError),
    #[error(transparent)]
    Attention(#[from] AttentionCheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Write a run's artifacts into `dir`: metrics.txt, fine.model, one
/// coarse{k}.model per coarse resolution, and attention{k}.att when the
/// method learned attention parameters.
pub fn save_run(dir: &Path, result: &TrainResult) -> Result<(), RunIoError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| RunIoError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = dir.join("metrics.txt");
    std::fs::write(&metrics, metrics_string(result)).map_err(io_err(&metrics))?;
    result.fine.save_checkpoint(&dir.join("fine.model"))?;
    for (k, model) in result.coarse.iter().enumerate() {
        model.save_checkpoint(&dir.join(format!("coarse{}.model", k + 1)))?;
    }
    for (k, params) in result.attention.iter().enumerate() {
        params.save_checkpoint(&dir.join(format!("attention{}.att", k + 1)))?;
    }
    Ok(())
}
