//! Cross-resolution consistency penalties.
//!
//! For a coarse instance i with fine group S_i, both penalties compare the
//! coarse model's prediction against an aggregate of the fine model over S_i:
//!
//! - MIL: the aggregate is a smooth maximum of the fine probabilities,
//!   smax(p) = Σ p_j β^{p_j} / Σ β^{p_j} — under the presence-based rule the
//!   coarse label is the OR of the fine labels, so the coarse probability
//!   should track the largest fine probability.
//! - Attention: the aggregate is the fine head applied to an
//!   attention-weighted sum of fine hidden representations, with additive
//!   attention scores conditioned on the coarse instance's hidden state.
//!
//! Both penalties are squared differences, recorded on the tape so gradients
//! reach every model parameter and the attention parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::data::{CorrespondenceMap, Instance};
use crate::io::format_f64;
use crate::model::{ModelError, TapedModel, DEFAULT_INIT_SCALE};
use crate::rng::stream_rng;
use crate::tape::{softmax_slice, Tape, Tensor, TensorError, TensorId};

/// Default alignment dimension of the additive attention score.
pub const DEFAULT_ALIGN_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("consistency group is empty")]
    EmptyGroup,
    #[error("smax base must exceed 1, got {0}")]
    BadBase(f64),
    #[error("attention: {weights} weights for {hiddens} hidden vectors")]
    WeightCount { weights: usize, hiddens: usize },
    #[error("attention: hidden vector has length {got}, expected {expected}")]
    HiddenDim { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Base of the smooth maximum; larger bases approximate max more sharply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmaxConfig {
    pub base: f64,
}

impl Default for SmaxConfig {
    fn default() -> Self {
        SmaxConfig {
            base: std::f64::consts::E,
        }
    }
}

impl SmaxConfig {
    pub fn new(base: f64) -> Result<Self, ConsistencyError> {
        if !(base > 1.0) {
            return Err(ConsistencyError::BadBase(base));
        }
        Ok(SmaxConfig { base })
    }
}

/// Tape-free smooth maximum, for gates and tests. Must stay numerically
/// identical to [`smax_aggregate`]: same shift, same accumulation order.
pub fn smax_value(probs: &[f64], base: f64) -> f64 {
    let pmax = probs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let ln_b = base.ln();
    let mut num = 0.0;
    let mut den = 0.0;
    for &p in probs {
        let d = p - pmax;
        let w = (d * ln_b).exp();
        num += d * w;
        den += w;
    }
    num / den + pmax
}

/// Smooth maximum of a 1-D probability tensor on the tape:
/// Σ p_j β^{p_j} / Σ β^{p_j}.
///
/// Evaluated in the shift-invariant form max(p) + Σ d_j β^{d_j} / Σ β^{d_j}
/// with d_j = p_j − max(p), which is the same function (the β^{max p}
/// factors cancel) but keeps every exponent nonpositive and returns the
/// common value *exactly* when all inputs are equal (every d_j is 0.0). The
/// shift is a constant on the tape; since the expression equals the smooth
/// maximum for any fixed shift, the gradient is unaffected.
pub fn smax_aggregate(
    tape: &mut Tape,
    probs: TensorId,
    cfg: SmaxConfig,
) -> Result<TensorId, ConsistencyError> {
    if !(cfg.base > 1.0) {
        return Err(ConsistencyError::BadBase(cfg.base));
    }
    if tape.value(probs).is_empty() {
        return Err(ConsistencyError::EmptyGroup);
    }
    let pmax = tape
        .value(probs)
        .values()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = tape.shift(probs, -pmax)?;
    // β^d = exp(d · ln β)
    let scaled = tape.scale(shifted, cfg.base.ln())?;
    let weights = tape.exp(scaled)?;
    let weighted = tape.mul(shifted, weights)?;
    let num = tape.sum(weighted)?;
    let den = tape.sum(weights)?;
    let frac = tape.div(num, den)?;
    Ok(tape.shift(frac, pmax)?)
}

/// MIL consistency: (coarse prediction − smax(fine predictions))².
pub fn mil_consistency(
    tape: &mut Tape,
    coarse_pred: TensorId,
    fine_preds: TensorId,
    cfg: SmaxConfig,
) -> Result<TensorId, ConsistencyError> {
    let agg = smax_aggregate(tape, fine_preds, cfg)?;
    let diff = tape.sub(coarse_pred, agg)?;
    Ok(tape.square(diff)?)
}

// ── Attention ───────────────────────────────────────────────────────────

/// Default initialization scale for the alignment matrix `wa`. Kept small
/// so the tanh pre-activations start in their linear regime: a saturated
/// alignment layer passes almost no gradient and the attention weights
/// freeze near uniform.
pub const DEFAULT_ATTENTION_INIT_SCALE: f64 = 0.2;

/// `va` is initialized this many times wider than `wa`. The output vector
/// sets the spread of the alignment scores (and the gain on their
/// gradients): with tanh activations near the linear regime, a wider `va`
/// lets the weights differentiate between group members early in training
/// instead of lingering near uniform.
pub const ATTENTION_OUTPUT_GAIN: f64 = 20.0;

/// Parameters of the additive attention score for one (coarse, fine) pair:
/// score(h_j, h_i) = v_a · tanh(W_a [h_j ; h_i] + b_a).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub align_dim: usize,
    pub fine_hidden: usize,
    pub coarse_hidden: usize,
    pub init_scale: f64,
    /// align_dim × (fine_hidden + coarse_hidden), row-major.
    pub wa: Vec<f64>,
    pub ba: Vec<f64>,
    pub va: Vec<f64>,
}

/// Tape handles for registered attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct TapedAttention {
    fine_hidden: usize,
    coarse_hidden: usize,
    wa: TensorId,
    ba: TensorId,
    va: TensorId,
}

impl AttentionParams {
    /// Fresh parameters: `wa` uniform in [−s, s], `va` uniform in
    /// [−s·gain, s·gain] with `gain = ATTENTION_OUTPUT_GAIN`, bias zero.
    pub fn init(
        align_dim: usize,
        fine_hidden: usize,
        coarse_hidden: usize,
        init_scale: f64,
        seed: u64,
    ) -> Self {
        let mut rng = stream_rng(seed, 0);
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-s..=s)).collect()
        };
        AttentionParams {
            align_dim,
            fine_hidden,
            coarse_hidden,
            init_scale,
            wa: draw(align_dim * (fine_hidden + coarse_hidden), init_scale),
            ba: vec![0.0; align_dim],
            va: draw(align_dim, init_scale * ATTENTION_OUTPUT_GAIN),
        }
    }

    pub fn num_params(&self) -> usize {
        self.wa.len() + self.ba.len() + self.va.len()
    }

    /// Parameters as named tensors, in registration order.
    pub fn param_tensors(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            (
                "wa",
                Tensor::matrix(
                    self.align_dim,
                    self.fine_hidden + self.coarse_hidden,
                    self.wa.clone(),
                )
                .expect("wa shape is consistent by construction"),
            ),
            ("ba", Tensor::vector(self.ba.clone()).unwrap()),
            ("va", Tensor::vector(self.va.clone()).unwrap()),
        ]
    }

    /// Overwrite parameters from a flat tensor list (same order as
    /// [`AttentionParams::param_tensors`]); returns tensors consumed.
    pub fn replace_params(&mut self, tensors: &[Tensor]) -> usize {
        self.wa = tensors[0].values().to_vec();
        self.ba = tensors[1].values().to_vec();
        self.va = tensors[2].values().to_vec();
        3
    }

    pub fn register(&self, tape: &mut Tape) -> TapedAttention {
        let wa = tape.parameter(
            Tensor::matrix(
                self.align_dim,
                self.fine_hidden + self.coarse_hidden,
                self.wa.clone(),
            )
            .expect("wa shape is consistent by construction"),
        );
        let ba = tape.parameter(Tensor::vector(self.ba.clone()).unwrap());
        let va = tape.parameter(Tensor::vector(self.va.clone()).unwrap());
        TapedAttention {
            fine_hidden: self.fine_hidden,
            coarse_hidden: self.coarse_hidden,
            wa,
            ba,
            va,
        }
    }

    pub fn apply_gradients(&mut self, tape: &Tape, taped: &TapedAttention, lr: f64) {
        let step = |values: &mut [f64], id: TensorId| {
            let grad = tape.grad(id).expect("backward() ran before the update");
            for (v, g) in values.iter_mut().zip(grad) {
                *v -= lr * g;
            }
        };
        step(&mut self.wa, taped.wa);
        step(&mut self.ba, taped.ba);
        step(&mut self.va, taped.va);
    }

    /// Plain-text checkpoint, same scheme as model checkpoints.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), AttentionCheckpointError> {
        let mut out = format!(
            "attention align_dim={} fine_hidden={} coarse_hidden={} init_scale={}\n",
            self.align_dim,
            self.fine_hidden,
            self.coarse_hidden,
            format_f64(self.init_scale),
        );
        for (name, tensor) in self.param_tensors() {
            write!(out, "{} {}", name, tensor.shape().len()).unwrap();
            for d in tensor.shape() {
                write!(out, " {d}").unwrap();
            }
            for v in tensor.values() {
                write!(out, " {}", format_f64(*v)).unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| AttentionCheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<AttentionParams, AttentionCheckpointError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| AttentionCheckpointError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let err = |line: usize, message: String| AttentionCheckpointError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, descriptor) = lines
            .next()
            .ok_or_else(|| err(1, "empty checkpoint".into()))?;
        let mut fields = descriptor.split_whitespace();
        if fields.next() != Some("attention") {
            return Err(err(1, "not an attention checkpoint".into()));
        }
        let mut params = AttentionParams {
            align_dim: 0,
            fine_hidden: 0,
            coarse_hidden: 0,
            init_scale: DEFAULT_INIT_SCALE,
            wa: vec![],
            ba: vec![],
            va: vec![],
        };
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| err(1, format!("bad descriptor field `{field}`")))?;
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|_| err(1, format!("bad {key}")));
            match key {
                "align_dim" => params.align_dim = parse_usize(value)?,
                "fine_hidden" => params.fine_hidden = parse_usize(value)?,
                "coarse_hidden" => params.coarse_hidden = parse_usize(value)?,
                "init_scale" => {
                    params.init_scale =
                        value.parse().map_err(|_| err(1, format!("bad {key}")))?
                }
                other => return Err(err(1, format!("unknown descriptor key `{other}`"))),
            }
        }
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let name = fields.next().unwrap_or_default().to_string();
            let rank: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| err(i + 1, "bad rank".into()))?;
            for _ in 0..rank {
                fields
                    .next()
                    .ok_or_else(|| err(i + 1, "missing dimension".into()))?;
            }
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| err(i + 1, format!("bad value: {e}")))?;
            match name.as_str() {
                "wa" => params.wa = values,
                "ba" => params.ba = values,
                "va" => params.va = values,
                other => return Err(err(i + 1, format!("unknown tensor `{other}`"))),
            }
        }
        let expected_wa = params.align_dim * (params.fine_hidden + params.coarse_hidden);
        if params.wa.len() != expected_wa
            || params.ba.len() != params.align_dim
            || params.va.len() != params.align_dim
        {
            return Err(err(0, "tensor sizes do not match the descriptor".into()));
        }
        Ok(params)
    }
}

#[derive(Debug, Error)]
pub enum AttentionCheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Attention weights over a fine group: softmax of additive scores
/// s_j = v_a · tanh(W_a [h_j ; h_i] + b_a). Returns a 1-D simplex tensor.
pub fn attention_weights(
    tape: &mut Tape,
    h_fine: &[TensorId],
    h_coarse: TensorId,
    att: &TapedAttention,
) -> Result<TensorId, ConsistencyError> {
    if h_fine.is_empty() {
        return Err(ConsistencyError::EmptyGroup);
    }
    let hc_len = tape.value(h_coarse).len();
    if hc_len != att.coarse_hidden {
        return Err(ConsistencyError::HiddenDim {
            expected: att.coarse_hidden,
            got: hc_len,
        });
    }
    let mut scores = Vec::with_capacity(h_fine.len());
    for &hj in h_fine {
        let hj_len = tape.value(hj).len();
        if hj_len != att.fine_hidden {
            return Err(ConsistencyError::HiddenDim {
                expected: att.fine_hidden,
                got: hj_len,
            });
        }
        let cat = tape.concat(&[hj, h_coarse])?;
        let z = tape.matvec(att.wa, cat)?;
        let z = tape.add(z, att.ba)?;
        let t = tape.tanh(z)?;
        scores.push(tape.dot(att.va, t)?);
    }
    let stacked = tape.concat(&scores)?;
    Ok(tape.softmax(stacked)?)
}

/// Convex combination Σ_j a_j h_j of the fine hidden vectors.
pub fn attention_aggregate(
    tape: &mut Tape,
    weights: TensorId,
    h_fine: &[TensorId],
) -> Result<TensorId, ConsistencyError> {
    let m = tape.value(weights).len();
    if h_fine.is_empty() {
        return Err(ConsistencyError::EmptyGroup);
    }
    if m != h_fine.len() {
        return Err(ConsistencyError::WeightCount {
            weights: m,
            hiddens: h_fine.len(),
        });
    }
    let mut acc: Option<TensorId> = None;
    for (j, &hj) in h_fine.iter().enumerate() {
        let aj = tape.index(weights, j)?;
        let term = tape.mul(hj, aj)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("group is nonempty"))
}

/// Attention consistency: (coarse prediction − fine head(Σ a_j h_j))².
pub fn attention_consistency(
    tape: &mut Tape,
    coarse_model: &TapedModel,
    fine_model: &TapedModel,
    x_coarse: &[f64],
    x_fine_group: &[&[f64]],
    att: &TapedAttention,
) -> Result<TensorId, ConsistencyError> {
    if x_fine_group.is_empty() {
        return Err(ConsistencyError::EmptyGroup);
    }
    let xc = tape.constant(Tensor::vector(x_coarse.to_vec())?);
    let h_coarse = coarse_model.hidden(tape, xc)?;
    let coarse_pred = coarse_model.head(tape, h_coarse)?;

    let mut h_fine = Vec::with_capacity(x_fine_group.len());
    for xj in x_fine_group {
        let x = tape.constant(Tensor::vector(xj.to_vec())?);
        h_fine.push(fine_model.hidden(tape, x)?);
    }
    let weights = attention_weights(tape, &h_fine, h_coarse, att)?;
    let pooled = attention_aggregate(tape, weights, &h_fine)?;
    let fine_pred = fine_model.head(tape, pooled)?;
    let diff = tape.sub(coarse_pred, fine_pred)?;
    Ok(tape.square(diff)?)
}

// ── Per-pair reduction D ────────────────────────────────────────────────

/// How the per-group penalties combine into one pair term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Sum,
}

/// Which penalty a pair uses.
pub enum ConsistencyMode<'a> {
    Mil(SmaxConfig),
    Attention(&'a TapedAttention),
}

/// One pair's consistency term plus bookkeeping about skipped groups.
pub struct PairTerm {
    pub loss: TensorId,
    pub groups_used: usize,
    /// Coarse instances whose group had no unlabeled fine member.
    pub groups_skipped: usize,
}

/// Consistency term for one (coarse, fine) pair: reduce d(i) over the given
/// unlabeled coarse instances, where each group S_i is restricted to
/// unlabeled fine instances. Groups left empty by the restriction are
/// skipped and counted. With no usable groups the term is the constant 0.
pub fn pair_consistency(
    tape: &mut Tape,
    coarse_unlabeled: &[&Instance],
    fine_unlabeled: &[&Instance],
    corr: &CorrespondenceMap,
    mode: &ConsistencyMode,
    coarse_model: &TapedModel,
    fine_model: &TapedModel,
    reduce: Reduce,
) -> Result<PairTerm, ConsistencyError> {
    let fine_by_id: BTreeMap<usize, &Instance> =
        fine_unlabeled.iter().map(|i| (i.id, *i)).collect();

    let mut terms = Vec::new();
    let mut skipped = 0usize;
    for coarse_inst in coarse_unlabeled {
        let members: Vec<&Instance> = corr
            .group(coarse_inst.id)
            .unwrap_or(&[])
            .iter()
            .filter_map(|fid| fine_by_id.get(fid).copied())
            .collect();
        if members.is_empty() {
            skipped += 1;
            continue;
        }
        let d = match mode {
            ConsistencyMode::Mil(cfg) => {
                let coarse_pred = coarse_model.predict_features(tape, &coarse_inst.features)?;
                let mut preds = Vec::with_capacity(members.len());
                for m in &members {
                    preds.push(fine_model.predict_features(tape, &m.features)?);
                }
                let stacked = tape.concat(&preds)?;
                mil_consistency(tape, coarse_pred, stacked, *cfg)?
            }
            ConsistencyMode::Attention(att) => {
                let group: Vec<&[f64]> = members.iter().map(|m| m.features.as_slice()).collect();
                attention_consistency(
                    tape,
                    coarse_model,
                    fine_model,
                    &coarse_inst.features,
                    &group,
                    att,
                )?
            }
        };
        terms.push(d);
    }

    let loss = if terms.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        let stacked = tape.concat(&terms)?;
        match reduce {
            Reduce::Mean => tape.mean(stacked)?,
            Reduce::Sum => tape.sum(stacked)?,
        }
    };
    Ok(PairTerm {
        loss,
        groups_used: terms.len(),
        groups_skipped: skipped,
    })
}

/// Tape-free attention weights for a trained model pair — used when
/// exporting weights from a checkpoint.
pub fn attention_weights_value(
    h_fine: &[Vec<f64>],
    h_coarse: &[f64],
    att: &AttentionParams,
) -> Vec<f64> {
    let width = att.fine_hidden + att.coarse_hidden;
    let scores: Vec<f64> = h_fine
        .iter()
        .map(|hj| {
            let mut s = 0.0;
            for a in 0..att.align_dim {
                let mut z = att.ba[a];
                for (c, v) in hj.iter().chain(h_coarse.iter()).enumerate() {
                    z += att.wa[a * width + c] * v;
                }
                s += att.va[a] * z.tanh();
            }
            s
        })
        .collect();
    softmax_slice(&scores)
}
