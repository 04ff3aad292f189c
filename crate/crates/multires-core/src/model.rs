//! Per-resolution binary classifiers.
//!
//! Two architectures share one interface: `logreg` (hidden representation is
//! the input itself) and `mlp1` (one tanh hidden layer). Every model splits
//! into `hidden` (representation) and `head` (sigmoid probability), and
//! `predict = head ∘ hidden` exactly — the attention consistency term reuses
//! the two halves separately.
//!
//! A [`Classifier`] owns plain parameter values; each training step registers
//! them on a fresh [`Tape`] via [`Classifier::register`] and applies the
//! resulting gradients back with [`Classifier::apply_gradients`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Instance;
use crate::io::format_f64;
use crate::tape::{sigmoid_scalar, Tape, Tensor, TensorError, TensorId};

/// Predicted probabilities are clipped to `[ε, 1−ε]` inside the
/// cross-entropy loss so saturated predictions keep a finite loss.
pub const PROB_EPSILON: f64 = 1e-7;

/// Default half-width of the uniform weight initialization.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has length {got}, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("hidden vector has length {got}, head expects {expected}")]
    HiddenDim { expected: usize, got: usize },
    #[error("cross-entropy batch is empty")]
    EmptyBatch,
    #[error("cross-entropy batch contains unlabeled instance {id}")]
    UnlabeledInBatch { id: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LogReg,
    Mlp1,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LogReg => "logreg",
            ModelKind::Mlp1 => "mlp1",
        }
    }
}

/// Architecture of one classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Hidden width; ignored for logreg.
    pub hidden_dim: usize,
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogReg,
            input_dim,
            hidden_dim: 0,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1,
            input_dim,
            hidden_dim,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    /// Length of the hidden representation this model feeds to its head.
    pub fn hidden_len(&self) -> usize {
        match self.kind {
            ModelKind::LogReg => self.input_dim,
            ModelKind::Mlp1 => self.hidden_dim,
        }
    }
}

/// A classifier's parameter values. `w1`/`b1` are empty for logreg.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ModelSpec,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Tape handles for one registered classifier, valid for a single
/// forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapedModel {
    spec: ModelSpec,
    w1: Option<TensorId>,
    b1: Option<TensorId>,
    w2: TensorId,
    b2: TensorId,
}

impl Classifier {
    /// Fresh model with weights uniform in [−s, s] and zero biases,
    /// deterministic under the seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = spec.init_scale;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-s..=s)).collect()
        };
        let (w1, b1) = match spec.kind {
            ModelKind::LogReg => (vec![], vec![]),
            ModelKind::Mlp1 => (
                draw(spec.hidden_dim * spec.input_dim),
                vec![0.0; spec.hidden_dim],
            ),
        };
        let w2 = draw(spec.hidden_len());
        let b2 = vec![0.0];
        Classifier {
            spec,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters as named tensors, in registration order.
    pub fn param_tensors(&self) -> Vec<(&'static str, Tensor)> {
        let mut out = Vec::new();
        if self.spec.kind == ModelKind::Mlp1 {
            out.push((
                "w1",
                Tensor::matrix(self.spec.hidden_dim, self.spec.input_dim, self.w1.clone())
                    .expect("w1 shape is consistent by construction"),
            ));
            out.push(("b1", Tensor::vector(self.b1.clone()).unwrap()));
        }
        out.push(("w2", Tensor::vector(self.w2.clone()).unwrap()));
        out.push(("b2", Tensor::vector(self.b2.clone()).unwrap()));
        out
    }

    /// Overwrite parameters from a flat tensor list (same order as
    /// [`Classifier::param_tensors`]); returns how many tensors were consumed.
    pub fn replace_params(&mut self, tensors: &[Tensor]) -> usize {
        let mut idx = 0;
        let mut take = |target: &mut Vec<f64>| {
            *target = tensors[idx].values().to_vec();
            idx += 1;
        };
        if self.spec.kind == ModelKind::Mlp1 {
            take(&mut self.w1);
            take(&mut self.b1);
        }
        take(&mut self.w2);
        take(&mut self.b2);
        idx
    }

    /// Register all parameters on a tape for one forward/backward pass.
    pub fn register(&self, tape: &mut Tape) -> TapedModel {
        let (w1, b1) = match self.spec.kind {
            ModelKind::LogReg => (None, None),
            ModelKind::Mlp1 => {
                let w1 = tape.parameter(
                    Tensor::matrix(self.spec.hidden_dim, self.spec.input_dim, self.w1.clone())
                        .expect("w1 shape is consistent by construction"),
                );
                let b1 = tape.parameter(Tensor::vector(self.b1.clone()).unwrap());
                (Some(w1), Some(b1))
            }
        };
        let w2 = tape.parameter(Tensor::vector(self.w2.clone()).unwrap());
        let b2 = tape.parameter(Tensor::vector(self.b2.clone()).unwrap());
        TapedModel {
            spec: self.spec,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// One gradient-descent step: `w ← w − lr · ∂loss/∂w` for every
    /// parameter, using the gradients of the tape's last backward pass.
    pub fn apply_gradients(&mut self, tape: &Tape, taped: &TapedModel, lr: f64) {
        let step = |values: &mut [f64], id: TensorId| {
            let grad = tape.grad(id).expect("backward() ran before the update");
            for (v, g) in values.iter_mut().zip(grad) {
                *v -= lr * g;
            }
        };
        if let (Some(w1), Some(b1)) = (taped.w1, taped.b1) {
            step(&mut self.w1, w1);
            step(&mut self.b1, b1);
        }
        step(&mut self.w2, taped.w2);
        step(&mut self.b2, taped.b2);
    }

    // ── Tape-free evaluation (no gradients) ─────────────────────────────

    /// Hidden representation of one feature vector.
    pub fn hidden_value(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.spec.input_dim, "feature length mismatch");
        match self.spec.kind {
            ModelKind::LogReg => x.to_vec(),
            ModelKind::Mlp1 => {
                let (h, d) = (self.spec.hidden_dim, self.spec.input_dim);
                (0..h)
                    .map(|i| {
                        let z: f64 = (0..d).map(|j| self.w1[i * d + j] * x[j]).sum::<f64>()
                            + self.b1[i];
                        z.tanh()
                    })
                    .collect()
            }
        }
    }

    /// Probability from a hidden representation.
    pub fn head_value(&self, h: &[f64]) -> f64 {
        assert_eq!(h.len(), self.w2.len(), "hidden length mismatch");
        let z: f64 = self.w2.iter().zip(h).map(|(w, v)| w * v).sum::<f64>() + self.b2[0];
        sigmoid_scalar(z)
    }

    /// Predicted probability of the positive class.
    pub fn predict_value(&self, x: &[f64]) -> f64 {
        self.head_value(&self.hidden_value(x))
    }

    // ── Checkpoints ─────────────────────────────────────────────────────

    /// Plain-text checkpoint: a spec descriptor line, then one line per
    /// parameter tensor (name, rank, dims, values at 17 significant digits).
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out = format!(
            "{} input_dim={} hidden_dim={} init_scale={}\n",
            self.spec.kind.name(),
            self.spec.input_dim,
            self.spec.hidden_dim,
            format_f64(self.spec.init_scale),
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
        std::fs::write(path, out).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Classifier, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let err = |line: usize, message: String| CheckpointError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, descriptor) = lines
            .next()
            .ok_or_else(|| err(1, "empty checkpoint".into()))?;
        let spec = parse_descriptor(descriptor).map_err(|m| err(1, m))?;
        let mut model = Classifier {
            spec,
            w1: vec![],
            b1: vec![],
            w2: vec![],
            b2: vec![],
        };
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let (name, values) = parse_tensor_line(line).map_err(|m| err(lineno, m))?;
            match name.as_str() {
                "w1" => model.w1 = values,
                "b1" => model.b1 = values,
                "w2" => model.w2 = values,
                "b2" => model.b2 = values,
                other => return Err(err(lineno, format!("unknown tensor `{other}`"))),
            }
        }
        let expect = |name: &str, got: usize, want: usize| -> Result<(), CheckpointError> {
            if got != want {
                Err(err(0, format!("tensor {name}: {got} values, expected {want}")))
            } else {
                Ok(())
            }
        };
        if spec.kind == ModelKind::Mlp1 {
            expect("w1", model.w1.len(), spec.hidden_dim * spec.input_dim)?;
            expect("b1", model.b1.len(), spec.hidden_dim)?;
        }
        expect("w2", model.w2.len(), spec.hidden_len())?;
        expect("b2", model.b2.len(), 1)?;
        Ok(model)
    }
}

fn parse_descriptor(line: &str) -> Result<ModelSpec, String> {
    let mut fields = line.split_whitespace();
    let kind = match fields.next() {
        Some("logreg") => ModelKind::LogReg,
        Some("mlp1") => ModelKind::Mlp1,
        other => return Err(format!("unknown model kind {other:?}")),
    };
    let mut spec = ModelSpec {
        kind,
        input_dim: 0,
        hidden_dim: 0,
        init_scale: DEFAULT_INIT_SCALE,
    };
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("bad descriptor field `{field}`"))?;
        match key {
            "input_dim" => spec.input_dim = value.parse().map_err(|_| format!("bad {key}"))?,
            "hidden_dim" => spec.hidden_dim = value.parse().map_err(|_| format!("bad {key}"))?,
            "init_scale" => spec.init_scale = value.parse().map_err(|_| format!("bad {key}"))?,
            other => return Err(format!("unknown descriptor key `{other}`")),
        }
    }
    if spec.input_dim == 0 {
        return Err("descriptor missing input_dim".into());
    }
    Ok(spec)
}

/// Parse `name rank d0 … values…`; the shape is validated by the caller.
fn parse_tensor_line(line: &str) -> Result<(String, Vec<f64>), String> {
    let mut fields = line.split_whitespace();
    let name = fields
        .next()
        .ok_or_else(|| "empty tensor line".to_string())?
        .to_string();
    let rank: usize = fields
        .next()
        .ok_or_else(|| "missing rank".to_string())?
        .parse()
        .map_err(|_| "bad rank".to_string())?;
    let mut count = 1usize;
    for _ in 0..rank {
        let d: usize = fields
            .next()
            .ok_or_else(|| "missing dimension".to_string())?
            .parse()
            .map_err(|_| "bad dimension".to_string())?;
        count *= d;
    }
    let values: Vec<f64> = fields
        .map(|f| f.parse::<f64>().map_err(|_| format!("bad value `{f}`")))
        .collect::<Result<_, _>>()?;
    if values.len() != count {
        return Err(format!(
            "tensor {name}: shape holds {count} values, line has {}",
            values.len()
        ));
    }
    Ok((name, values))
}

impl TapedModel {
    pub fn hidden_len(&self) -> usize {
        self.spec.hidden_len()
    }

    /// Tensor ids of this model's parameters, in registration order.
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        if let (Some(w1), Some(b1)) = (self.w1, self.b1) {
            ids.push(w1);
            ids.push(b1);
        }
        ids.push(self.w2);
        ids.push(self.b2);
        ids
    }

    /// Hidden representation: the input itself for logreg, tanh(W₁x + b₁)
    /// for mlp1.
    pub fn hidden(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId, ModelError> {
        let got = tape.value(x).len();
        if got != self.spec.input_dim {
            return Err(ModelError::InputDim {
                expected: self.spec.input_dim,
                got,
            });
        }
        match self.spec.kind {
            ModelKind::LogReg => Ok(x),
            ModelKind::Mlp1 => {
                let z = tape.matvec(self.w1.unwrap(), x)?;
                let z = tape.add(z, self.b1.unwrap())?;
                Ok(tape.tanh(z)?)
            }
        }
    }

    /// Probability head: sigmoid(w₂·h + b₂).
    pub fn head(&self, tape: &mut Tape, h: TensorId) -> Result<TensorId, ModelError> {
        let got = tape.value(h).len();
        if got != self.spec.hidden_len() {
            return Err(ModelError::HiddenDim {
                expected: self.spec.hidden_len(),
                got,
            });
        }
        let z = tape.dot(self.w2, h)?;
        let z = tape.add(z, self.b2)?;
        Ok(tape.sigmoid(z)?)
    }

    /// Full model: head(hidden(x)).
    pub fn predict(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId, ModelError> {
        let h = self.hidden(tape, x)?;
        self.head(tape, h)
    }

    /// Convenience: record a feature vector as a constant and predict.
    pub fn predict_features(&self, tape: &mut Tape, x: &[f64]) -> Result<TensorId, ModelError> {
        let x = tape.constant(Tensor::vector(x.to_vec()).map_err(ModelError::Tensor)?);
        self.predict(tape, x)
    }
}

/// Mean binary cross-entropy over a labeled batch, with predictions clipped
/// to `[ε, 1−ε]`: −mean(y·log p + (1−y)·log(1−p)).
pub fn cross_entropy_loss(
    tape: &mut Tape,
    model: &TapedModel,
    batch: &[&Instance],
) -> Result<TensorId, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(batch.len());
    for inst in batch {
        let y = inst
            .label
            .as_f64()
            .ok_or(ModelError::UnlabeledInBatch { id: inst.id })?;
        let p = model.predict_features(tape, &inst.features)?;
        let p = tape.clamp(p, PROB_EPSILON, 1.0 - PROB_EPSILON)?;
        let term = if y == 1.0 {
            tape.log(p)?
        } else {
            let neg = tape.scale(p, -1.0)?;
            let one_minus = tape.shift(neg, 1.0)?;
            tape.log(one_minus)?
        };
        terms.push(term);
    }
    let stacked = tape.concat(&terms)?;
    let mean = tape.mean(stacked)?;
    Ok(tape.scale(mean, -1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::gradcheck::grad_check;

    const LN_2: f64 = 0.6931471805599453;

    fn labeled(id: usize, features: &[f64], label: Label) -> Instance {
        Instance::new(id, vec![0.0], features.to_vec(), label)
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::mlp1(4, 8);
        let a = Classifier::init(spec, 9);
        let b = Classifier::init(spec, 9);
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w2, b.w2);
        let c = Classifier::init(spec, 10);
        assert_ne!(a.w1, c.w1);
    }

    #[test]
    fn zero_scale_predicts_half() {
        let mut spec = ModelSpec::logreg(3);
        spec.init_scale = 0.0;
        let model = Classifier::init(spec, 0);
        assert_eq!(model.predict_value(&[5.0, -2.0, 100.0]), 0.5);
    }

    #[test]
    fn mlp1_parameter_count() {
        let model = Classifier::init(ModelSpec::mlp1(4, 8), 0);
        assert_eq!(model.num_params(), 4 * 8 + 8 + 8 + 1);
    }

    #[test]
    fn logreg_hidden_is_identity() {
        let model = Classifier::init(ModelSpec::logreg(2), 1);
        assert_eq!(model.hidden_value(&[1.0, 2.0]), vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let taped = model.register(&mut tape);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let h = taped.hidden(&mut tape, x).unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn mlp1_zero_weights_hidden_is_zero() {
        let mut spec = ModelSpec::mlp1(3, 4);
        spec.init_scale = 0.0;
        let model = Classifier::init(spec, 0);
        assert_eq!(model.hidden_value(&[1.0, -2.0, 3.0]), vec![0.0; 4]);
    }

    #[test]
    fn mlp1_hidden_matches_manual_evaluation() {
        let model = Classifier::init(ModelSpec::mlp1(3, 5), 21);
        let x = [0.3, -1.2, 0.7];
        let h = model.hidden_value(&x);
        for i in 0..5 {
            let z: f64 = (0..3).map(|j| model.w1[i * 3 + j] * x[j]).sum::<f64>() + model.b1[i];
            assert!((h[i] - z.tanh()).abs() < 1e-15);
        }
        // the taped path agrees with the value path
        let mut tape = Tape::new();
        let taped = model.register(&mut tape);
        let xt = tape.constant(Tensor::vector(x.to_vec()).unwrap());
        let ht = taped.hidden(&mut tape, xt).unwrap();
        for (a, b) in tape.value(ht).values().iter().zip(&h) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn predict_is_head_of_hidden() {
        for spec in [ModelSpec::logreg(4), ModelSpec::mlp1(4, 6)] {
            let model = Classifier::init(spec, 3);
            let mut rng = {
                use rand::SeedableRng;
                ChaCha8Rng::seed_from_u64(17)
            };
            for _ in 0..100 {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let direct = model.predict_value(&x);
                let composed = model.head_value(&model.hidden_value(&x));
                assert_eq!(direct.to_bits(), composed.to_bits());
                assert!(direct > 0.0 && direct < 1.0);
            }
        }
    }

    #[test]
    fn crafted_logit_two_gives_sigmoid_two() {
        let mut model = Classifier::init(ModelSpec::mlp1(1, 1), 0);
        model.w1 = vec![0.0];
        model.b1 = vec![0.0];
        model.w2 = vec![1.0];
        model.b2 = vec![2.0]; // hidden is tanh(0)=0, so the logit is b2
        assert!((model.predict_value(&[7.0]) - 0.8807970779778824).abs() < 1e-15);
    }

    #[test]
    fn logreg_prediction_monotone_in_positively_weighted_feature() {
        let mut model = Classifier::init(ModelSpec::logreg(2), 4);
        model.w2 = vec![0.5, -0.3];
        let lo = model.predict_value(&[1.0, 0.0]);
        let hi = model.predict_value(&[2.0, 0.0]);
        assert!(hi > lo);
    }

    #[test]
    fn cross_entropy_half_is_ln_two() {
        let mut spec = ModelSpec::logreg(1);
        spec.init_scale = 0.0;
        let model = Classifier::init(spec, 0);
        let mut tape = Tape::new();
        let taped = model.register(&mut tape);
        let batch = [labeled(0, &[1.0], Label::Positive)];
        let refs: Vec<&Instance> = batch.iter().collect();
        let loss = cross_entropy_loss(&mut tape, &taped, &refs).unwrap();
        assert!((tape.value(loss).item() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_near_zero() {
        let mut model = Classifier::init(ModelSpec::logreg(1), 0);
        model.w2 = vec![50.0]; // p(x=1) ≈ 1
        let mut tape = Tape::new();
        let taped = model.register(&mut tape);
        let batch = [labeled(0, &[1.0], Label::Positive)];
        let refs: Vec<&Instance> = batch.iter().collect();
        let loss = cross_entropy_loss(&mut tape, &taped, &refs).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_clipping_bounds_the_loss() {
        // logit −100 saturates to p ≈ 0; clipping pins the loss at −ln ε
        let mut model = Classifier::init(ModelSpec::logreg(1), 0);
        model.w2 = vec![-100.0];
        let mut tape = Tape::new();
        let taped = model.register(&mut tape);
        let batch = [labeled(0, &[1.0], Label::Positive)];
        let refs: Vec<&Instance> = batch.iter().collect();
        let loss = cross_entropy_loss(&mut tape, &taped, &refs).unwrap();
        assert!((tape.value(loss).item() - 16.11809565095832).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_unlabeled_and_empty() {
        let model = Classifier::init(ModelSpec::logreg(1), 0);
        let mut tape = Tape::new();
        let taped = model.register(&mut tape);
        assert!(matches!(
            cross_entropy_loss(&mut tape, &taped, &[]),
            Err(ModelError::EmptyBatch)
        ));
        let batch = [labeled(3, &[1.0], Label::Unlabeled)];
        let refs: Vec<&Instance> = batch.iter().collect();
        assert!(matches!(
            cross_entropy_loss(&mut tape, &taped, &refs),
            Err(ModelError::UnlabeledInBatch { id: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let batch: Vec<Instance> = vec![
            labeled(0, &[0.5, 1.0, -0.3], Label::Positive),
            labeled(1, &[-1.0, 0.2, 0.8], Label::Negative),
            labeled(2, &[0.1, -0.7, 0.4], Label::Positive),
            labeled(3, &[1.2, 0.3, -1.1], Label::Negative),
            labeled(4, &[-0.4, -0.9, 0.6], Label::Positive),
        ];
        for spec in [ModelSpec::logreg(3), ModelSpec::mlp1(3, 4)] {
            let model = Classifier::init(spec, 11);
            let params: Vec<Tensor> =
                model.param_tensors().into_iter().map(|(_, t)| t).collect();
            let report = grad_check(
                |tape, tensors| {
                    let mut probe = model.clone();
                    probe.replace_params(tensors);
                    let taped = probe.register(tape);
                    let refs: Vec<&Instance> = batch.iter().collect();
                    cross_entropy_loss(tape, &taped, &refs)
                        .map_err(|e| match e {
                            ModelError::Tensor(t) => t,
                            other => panic!("unexpected model error: {other}"),
                        })
                },
                &params,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed,
                "{:?}: max rel err {}",
                spec.kind, report.max_rel_error
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [ModelSpec::logreg(3), ModelSpec::mlp1(3, 5)] {
            let model = Classifier::init(spec, 77);
            let path = dir.path().join(format!("{}.model", spec.kind.name()));
            model.save_checkpoint(&path).unwrap();
            let loaded = Classifier::load_checkpoint(&path).unwrap();
            assert_eq!(loaded.spec, model.spec);
            assert_eq!(loaded.w1, model.w1);
            assert_eq!(loaded.b1, model.b1);
            assert_eq!(loaded.w2, model.w2);
            assert_eq!(loaded.b2, model.b2);
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_arity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.model");
        std::fs::write(&path, "logreg input_dim=2 hidden_dim=0\nw2 1 2 0.5\nb2 1 1 0.0\n")
            .unwrap();
        assert!(Classifier::load_checkpoint(&path).is_err());
    }
}
