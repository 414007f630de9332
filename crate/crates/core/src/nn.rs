//! Network building blocks on top of [`crate::autodiff`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{what}: expected {expected} columns, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("network spec is inconsistent: {0}")]
    BadSpec(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Elu => tape.elu(x),
        }
    }
}

/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` uniform initialization.
pub fn init_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(rows, cols, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Affine layer `x W + b` with `W: inputs x outputs`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), init_uniform(inputs, outputs, inputs, rng));
        let b = store.insert(format!("{name}.b"), init_uniform(1, outputs, inputs, rng));
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.insert(format!("{name}.w"), Matrix::zeros(inputs, outputs));
        let b = store.insert(format!("{name}.b"), Matrix::zeros(1, outputs));
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Gated recurrent cell with reset, update and candidate gates packed as
/// `[r | z | n]` column blocks.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let h3 = 3 * hidden;
        Self {
            w_ih: store.insert(format!("{name}.w_ih"), init_uniform(inputs, h3, hidden, rng)),
            w_hh: store.insert(format!("{name}.w_hh"), init_uniform(hidden, h3, hidden, rng)),
            b_ih: store.insert(format!("{name}.b_ih"), init_uniform(1, h3, hidden, rng)),
            b_hh: store.insert(format!("{name}.b_hh"), init_uniform(1, h3, hidden, rng)),
            inputs,
            hidden,
        }
    }

    /// One step: `x` is `B x inputs`, `h` is `B x hidden`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b_ih = tape.param(store, self.b_ih);
        let b_hh = tape.param(store, self.b_hh);
        let gi = tape.matmul(x, w_ih);
        let gi = tape.add_row(gi, b_ih);
        let gh = tape.matmul(h, w_hh);
        let gh = tape.add_row(gh, b_hh);

        let i_r = tape.slice_cols(gi, 0, hd);
        let h_r = tape.slice_cols(gh, 0, hd);
        let r = tape.add(i_r, h_r);
        let r = tape.sigmoid(r);

        let i_z = tape.slice_cols(gi, hd, hd);
        let h_z = tape.slice_cols(gh, hd, hd);
        let z = tape.add(i_z, h_z);
        let z = tape.sigmoid(z);

        let i_n = tape.slice_cols(gi, 2 * hd, hd);
        let h_n = tape.slice_cols(gh, 2 * hd, hd);
        let rh = tape.mul(r, h_n);
        let n = tape.add(i_n, rh);
        let n = tape.tanh(n);

        // h' = n + z * (h - n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    /// Applies the cell over a sequence of `B x inputs` inputs, returning every
    /// hidden state.
    pub fn unroll(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var], h0: Var) -> Vec<Var> {
        let mut h = h0;
        xs.iter()
            .map(|&x| {
                h = self.step(tape, store, x, h);
                h
            })
            .collect()
    }
}

/// Shape description for [`Network`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input width followed by each layer's output width.
    pub layer_sizes: Vec<usize>,
    /// One activation per layer.
    pub activations: Vec<Activation>,
    /// Width of a recurrent cell inserted after the first layer.
    pub recurrent_hidden: Option<usize>,
    /// Pass the final outputs through [`nonneg_map`].
    pub nonneg_output: bool,
}

impl NetworkSpec {
    pub fn mlp(layer_sizes: Vec<usize>, hidden: Activation) -> Self {
        let layers = layer_sizes.len().saturating_sub(1);
        let mut activations = vec![hidden; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self {
            layer_sizes,
            activations,
            recurrent_hidden: None,
            nonneg_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::BadSpec("need an input and at least one layer".into()));
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(NnError::BadSpec(format!(
                "{} layers but {} activations",
                self.layer_sizes.len() - 1,
                self.activations.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NnError::BadSpec("zero-width layer".into()));
        }
        if self.recurrent_hidden == Some(0) {
            return Err(NnError::BadSpec("zero-width recurrent cell".into()));
        }
        Ok(())
    }
}

/// Feed-forward stack with an optional recurrent cell after the first layer.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    layers: Vec<Dense>,
    gru: Option<GruCell>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: NetworkSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let sizes = &spec.layer_sizes;
        let mut layers = Vec::new();
        let mut gru = None;
        for i in 0..sizes.len() - 1 {
            let mut input = sizes[i];
            if i == 1 {
                if let Some(h) = spec.recurrent_hidden {
                    gru = Some(GruCell::new(store, &format!("{name}.gru"), sizes[1], h, rng));
                    input = h;
                }
            }
            layers.push(Dense::new(store, &format!("{name}.l{i}"), input, sizes[i + 1], rng));
        }
        if spec.recurrent_hidden.is_some() && layers.len() < 2 {
            return Err(NnError::BadSpec("recurrent cell needs at least two layers".into()));
        }
        Ok(Self { spec, layers, gru })
    }

    pub fn input_width(&self) -> usize {
        self.spec.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.spec.layer_sizes.last().expect("validated")
    }

    pub fn recurrent_hidden(&self) -> Option<usize> {
        self.gru.as_ref().map(|g| g.hidden)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Returns `(outputs, new_hidden)`. A missing hidden state starts at zero.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        hidden: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let got = tape.value(x).cols();
        if got != self.input_width() {
            return Err(NnError::ShapeMismatch {
                what: "network input",
                expected: self.input_width(),
                got,
            });
        }
        let batch = tape.value(x).rows();
        let mut h = x;
        let mut new_hidden = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == 1 {
                if let Some(gru) = &self.gru {
                    let prev = match hidden {
                        Some(v) => {
                            let cols = tape.value(v).cols();
                            if cols != gru.hidden {
                                return Err(NnError::ShapeMismatch {
                                    what: "recurrent state",
                                    expected: gru.hidden,
                                    got: cols,
                                });
                            }
                            v
                        }
                        None => tape.constant(Matrix::zeros(batch, gru.hidden)),
                    };
                    h = gru.step(tape, store, h, prev);
                    new_hidden = Some(h);
                }
            }
            h = layer.forward(tape, store, h);
            h = self.spec.activations[i].apply(tape, h);
        }
        if self.spec.nonneg_output {
            h = tape.abs(h);
        }
        Ok((h, new_hidden))
    }
}

/// Elementwise absolute value, the nonnegativity map for mixing weights.
pub fn nonneg_map(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|x| x.abs()).collect()
}

/// Softmax of `utilities / temperature`.
pub fn boltzmann(utilities: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let max = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = utilities
        .iter()
        .map(|u| ((u - max) / temperature).exp())
        .collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Row-wise Boltzmann distribution on the tape.
pub fn boltzmann_rows(tape: &mut Tape, utilities: Var, temperature: f64) -> Var {
    let scaled = tape.scale(utilities, 1.0 / temperature);
    tape.softmax_rows(scaled)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

impl RmsProp {
    pub fn step(&self, store: &mut ParamStore) {
        rmsprop_step(store, self.learning_rate, self.alpha, self.eps);
    }
}

/// `v <- a v + (1 - a) g^2`, `p <- p - lr g / (sqrt(v) + eps)`, then zeroes gradients.
pub fn rmsprop_step(store: &mut ParamStore, learning_rate: f64, alpha: f64, eps: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (value, grad, sq) = store.entry_parts_mut(id);
        for ((p, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(sq.data_mut().iter_mut())
        {
            *v = alpha * *v + (1.0 - alpha) * g * g;
            *p -= learning_rate * g / (v.sqrt() + eps);
        }
    }
    store.zero_grads();
    store.bump_version();
}

/// Plain gradient descent step, then zeroes gradients.
pub fn sgd_step(store: &mut ParamStore, learning_rate: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (value, grad, _) = store.entry_parts_mut(id);
        for (p, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *p -= learning_rate * g;
        }
    }
    store.zero_grads();
    store.bump_version();
}

pub const CHECKPOINT_FORMAT: &str = "maven-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    sq_avg: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: Vec<CheckpointEntry>,
}

/// Serializes values and optimizer accumulators as versioned JSON.
pub fn checkpoint_to_json(store: &ParamStore) -> String {
    let params = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            CheckpointEntry {
                name: store.name(id).to_string(),
                rows: v.rows(),
                cols: v.cols(),
                values: v.data().to_vec(),
                sq_avg: store.sq_avg(id).data().to_vec(),
            }
        })
        .collect();
    serde_json::to_string(&Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params,
    })
    .expect("checkpoint serializes")
}

/// Loads a checkpoint into a store with the same parameter names and shapes.
pub fn load_checkpoint_json(store: &mut ParamStore, json: &str) -> Result<()> {
    let ck: Checkpoint = serde_json::from_str(json)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    if ck.params.len() != store.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} tensors, store has {}",
            ck.params.len(),
            store.len()
        )));
    }
    for entry in ck.params {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if store.value(id).shape() != (entry.rows, entry.cols)
            || entry.values.len() != entry.rows * entry.cols
            || entry.sq_avg.len() != entry.values.len()
        {
            return Err(NnError::Checkpoint(format!("shape mismatch for {}", entry.name)));
        }
        store.set_value(id, Matrix::from_vec(entry.rows, entry.cols, entry.values));
        store.restore_sq_avg(id, Matrix::from_vec(entry.rows, entry.cols, entry.sq_avg));
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(store))?;
    Ok(())
}

pub fn load_checkpoint(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    load_checkpoint_json(store, &text)
}

/// Result of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of `loss` against central differences with
/// step `h`, perturbing every parameter entry (or a random subset of
/// `max_coords` entries).
pub fn check_gradients<R: Rng + ?Sized>(
    store: &mut ParamStore,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
    loss: impl Fn(&mut Tape, &ParamStore) -> Var,
) -> GradCheckReport {
    store.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store);
    tape.backward_into(out, store).expect("fresh tape");

    let mut coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    if let Some(limit) = max_coords {
        if coords.len() > limit {
            let picked = rand::seq::index::sample(rng, coords.len(), limit);
            coords = picked.iter().map(|i| coords[i]).collect();
        }
    }
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(&mut t, store);
        t.value(v).item()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: coords.len(),
    };
    for (id, i) in coords {
        let analytic = store.grad(id).data()[i];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - h;
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    store.zero_grads();
    report
}
