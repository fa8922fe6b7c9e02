//! Shadow classifiers: per-snapshot reconstructor, mean pooling over
//! snapshots, a bidirectional GRU or a dilated CNN over sites, and a final
//! MLP producing the SSB probability.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Float, Tape, Var};
use crate::params::{orthogonal, uniform, Binding, CheckpointError, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?}: {why}")]
    Shape { got: Vec<usize>, why: String },
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Birnn,
    Cnn,
}

impl Arch {
    pub fn tag(self) -> u32 {
        match self {
            Arch::Birnn => 1,
            Arch::Cnn => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RnnCell {
    #[default]
    Gru,
    /// Elman cell, `h' = tanh(W_i x + W_h h + b)`.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub channels: usize,
    pub merge_channels: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4, 6],
            kernel: 3,
            channels: 128,
            merge_channels: 128,
            ff_width: 128,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: Arch,
    pub reconstructor_dims: Vec<usize>,
    pub rnn_hidden_total: usize,
    #[serde(default)]
    pub rnn_cell: RnnCell,
    /// Share weights between the two directions (test harness only).
    #[serde(default)]
    pub tie_directions: bool,
    pub final_dims: Vec<usize>,
    pub cnn: CnnConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::birnn()
    }
}

impl ClassifierConfig {
    pub fn birnn() -> Self {
        Self {
            arch: Arch::Birnn,
            reconstructor_dims: vec![4, 8, 16, 32, 64, 32, 16, 8],
            rnn_hidden_total: 512,
            rnn_cell: RnnCell::Gru,
            tie_directions: false,
            final_dims: vec![512, 64, 8, 1],
            cnn: CnnConfig::default(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn cnn() -> Self {
        Self {
            arch: Arch::Cnn,
            final_dims: vec![128, 64, 8, 1],
            ..Self::birnn()
        }
    }

    pub fn feature_width(&self) -> usize {
        *self.reconstructor_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::Config(s.to_string()));
        if self.reconstructor_dims.len() < 2 || self.reconstructor_dims[0] != 4 {
            return bad("reconstructor must start at width 4");
        }
        if self.final_dims.len() < 2 || *self.final_dims.last().unwrap() != 1 {
            return bad("final MLP must end at width 1");
        }
        let head_in = match self.arch {
            Arch::Birnn => {
                if self.rnn_hidden_total == 0 || !self.rnn_hidden_total.is_multiple_of(2) {
                    return bad("rnn_hidden_total must be a positive even number");
                }
                self.rnn_hidden_total
            }
            Arch::Cnn => {
                let c = &self.cnn;
                if c.dilations.is_empty() || c.kernel == 0 || c.kernel.is_multiple_of(2) {
                    return bad("CNN needs at least one branch and an odd kernel");
                }
                if c.dilations.contains(&0) {
                    return bad("dilations must be positive");
                }
                if !(0.0..1.0).contains(&c.dropout) {
                    return bad("dropout must lie in [0, 1)");
                }
                c.ff_width
            }
        };
        if self.final_dims[0] != head_in {
            return Err(ModelError::Config(format!(
                "final MLP input {} does not match feature width {head_in}",
                self.final_dims[0]
            )));
        }
        Ok(())
    }
}

/// Training mode draws dropout masks and uses batch statistics.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Batch statistics observed in a training forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<F: Float> {
    pub prefix: String,
    pub mean: ArrayD<F>,
    pub var: ArrayD<F>,
}

fn linear<F: Float>(tape: &Tape<F>, bind: &Binding, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, bind.var(&format!("{prefix}.w")));
    tape.add_bias(y, bind.var(&format!("{prefix}.b")))
}

/// MLP on the last axis of `x`; ReLU after every layer but the last.
fn mlp<F: Float>(tape: &Tape<F>, bind: &Binding, prefix: &str, n_layers: usize, x: Var) -> Var {
    let shape = tape.shape(x);
    let width = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / width;
    let mut h = tape.reshape(x, &[rows, width]);
    for i in 0..n_layers {
        h = linear(tape, bind, &format!("{prefix}.{i}"), h);
        if i + 1 < n_layers {
            h = tape.relu(h);
        }
    }
    let out_width = tape.shape(h)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out_width;
    tape.reshape(h, &out_shape)
}

/// `[B, n_s, l, 4]` to `[B, n_s, l, 8]`, the same MLP on every (shadow, site) slice.
pub fn shadow_reconstructor_forward<F: Float>(tape: &Tape<F>, bind: &Binding, cfg: &ClassifierConfig, x: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[3] != cfg.reconstructor_dims[0] {
        return Err(ModelError::Shape {
            got: shape,
            why: "expected [batch, n_s, l, 4]".into(),
        });
    }
    Ok(mlp(tape, bind, "recon", cfg.reconstructor_dims.len() - 1, x))
}

/// Mean over the shadow axis, order-independent to the last bit.
pub fn mean_pool_shadows<F: Float>(tape: &Tape<F>, x: Var) -> Var {
    tape.mean_axis_sorted(x, 1)
}

fn gru_direction<F: Float>(tape: &Tape<F>, bind: &Binding, prefix: &str, x: Var, hidden: usize, reverse: bool) -> Var {
    let shape = tape.shape(x);
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[b * l, d]);
    let proj = |gate: &str| {
        let y = linear_named(tape, bind, &format!("{prefix}.w_i{gate}"), &format!("{prefix}.b_i{gate}"), flat);
        tape.reshape(y, &[b, l, hidden])
    };
    let (xr, xz, xn) = (proj("r"), proj("z"), proj("n"));
    let mut h = tape.leaf(ArrayD::zeros(IxDyn(&[b, hidden])));
    for step in 0..l {
        let t = if reverse { l - 1 - step } else { step };
        let hh = |gate: &str| linear_named(tape, bind, &format!("{prefix}.w_h{gate}"), &format!("{prefix}.b_h{gate}"), h);
        let r = tape.sigmoid(tape.add(tape.select(xr, 1, t), hh("r")));
        let z = tape.sigmoid(tape.add(tape.select(xz, 1, t), hh("z")));
        let n = tape.tanh(tape.add(tape.select(xn, 1, t), tape.mul(r, hh("n"))));
        h = tape.add(tape.mul(tape.one_minus(z), n), tape.mul(z, h));
    }
    h
}

fn vanilla_direction<F: Float>(tape: &Tape<F>, bind: &Binding, prefix: &str, x: Var, hidden: usize, reverse: bool) -> Var {
    let shape = tape.shape(x);
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[b * l, d]);
    let xp = linear_named(tape, bind, &format!("{prefix}.w_i"), &format!("{prefix}.b_i"), flat);
    let xp = tape.reshape(xp, &[b, l, hidden]);
    let mut h = tape.leaf(ArrayD::zeros(IxDyn(&[b, hidden])));
    for step in 0..l {
        let t = if reverse { l - 1 - step } else { step };
        let hh = linear_named(tape, bind, &format!("{prefix}.w_h"), &format!("{prefix}.b_h"), h);
        h = tape.tanh(tape.add(tape.select(xp, 1, t), hh));
    }
    h
}

fn linear_named<F: Float>(tape: &Tape<F>, bind: &Binding, w: &str, b: &str, x: Var) -> Var {
    let y = tape.matmul(x, bind.var(w));
    tape.add_bias(y, bind.var(b))
}

/// `[B, l, 8]` to `[B, 2H]`: final forward state (sites 1..l) then final backward state (l..1).
pub fn birnn_forward<F: Float>(tape: &Tape<F>, bind: &Binding, cfg: &ClassifierConfig, x: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[1] == 0 || shape[2] != cfg.feature_width() {
        return Err(ModelError::Shape {
            got: shape,
            why: format!("expected [batch, l >= 1, {}]", cfg.feature_width()),
        });
    }
    let hidden = cfg.rnn_hidden_total / 2;
    let bwd = if cfg.tie_directions { "rnn.fwd" } else { "rnn.bwd" };
    let run = |prefix: &str, reverse| match cfg.rnn_cell {
        RnnCell::Gru => gru_direction(tape, bind, prefix, x, hidden, reverse),
        RnnCell::Vanilla => vanilla_direction(tape, bind, prefix, x, hidden, reverse),
    };
    let f = run("rnn.fwd", false);
    let b = run(bwd, true);
    Ok(tape.concat(&[f, b], 1))
}

/// Conv1d on `[B, L, C_in]` with weight `[K * C_in, C_out]`; output `[B * L_out, C_out]`.
pub fn conv1d<F: Float>(tape: &Tape<F>, x: Var, w: Var, b: Var, kernel: usize, dilation: usize, padding: usize) -> Var {
    let cols = tape.im2col(x, kernel, dilation, padding);
    tape.add_bias(tape.matmul(cols, w), b)
}

fn batchnorm<F: Float>(
    tape: &Tape<F>,
    bind: &Binding,
    store: &ParamStore<F>,
    cfg: &ClassifierConfig,
    prefix: &str,
    x: Var,
    train: bool,
    updates: &mut Vec<BnUpdate<F>>,
) -> Var {
    let gamma = bind.var(&format!("{prefix}.gamma"));
    let beta = bind.var(&format!("{prefix}.beta"));
    let eps = F::lit(cfg.bn_eps);
    if train {
        let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, eps);
        updates.push(BnUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
        });
        y
    } else {
        let mean = store.get(&format!("{prefix}.mean"));
        let var = store.get(&format!("{prefix}.var"));
        tape.batchnorm_eval(x, gamma, beta, mean, var, eps)
    }
}

/// `[B, l, 8]` to `[B, ff_width]`.
pub fn cnn_forward<F: Float>(
    tape: &Tape<F>,
    bind: &Binding,
    store: &ParamStore<F>,
    cfg: &ClassifierConfig,
    x: Var,
    mode: &mut Mode<'_>,
) -> Result<(Var, Vec<BnUpdate<F>>), ModelError> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[1] == 0 || shape[2] != cfg.feature_width() {
        return Err(ModelError::Shape {
            got: shape,
            why: format!("expected [batch, l >= 1, {}]", cfg.feature_width()),
        });
    }
    let (b, l) = (shape[0], shape[1]);
    let c = &cfg.cnn;
    let train = mode.is_train();
    let mut updates = Vec::new();
    let mut branches = Vec::with_capacity(c.dilations.len());
    for (j, &d) in c.dilations.iter().enumerate() {
        let pad = d * (c.kernel - 1) / 2;
        let mut h = x;
        for k in 0..2 {
            let p = format!("cnn.b{j}.conv{k}");
            let y = conv1d(tape, h, bind.var(&format!("{p}.w")), bind.var(&format!("{p}.b")), c.kernel, d, pad);
            let y = batchnorm(tape, bind, store, cfg, &format!("cnn.b{j}.bn{k}"), y, train, &mut updates);
            h = tape.reshape(tape.relu(y), &[b, l, c.channels]);
        }
        branches.push(h);
    }
    let cat = tape.concat(&branches, 2);
    let flat = tape.reshape(cat, &[b * l, c.channels * c.dilations.len()]);
    let merged = linear(tape, bind, "cnn.merge", flat);
    let merged = batchnorm(tape, bind, store, cfg, "cnn.merge.bn", merged, train, &mut updates);
    let merged = tape.reshape(tape.relu(merged), &[b, l, c.merge_channels]);
    let pooled = tape.mean_axis(merged, 1);
    let mut h = tape.relu(linear(tape, bind, "cnn.ff0", pooled));
    if let Mode::Train(rng) = mode {
        if c.dropout > 0.0 {
            let keep = 1.0 - c.dropout;
            let scale = F::lit(1.0 / keep);
            let mask = ArrayD::from_shape_simple_fn(IxDyn(&tape.shape(h)), || {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            });
            h = tape.mul(h, tape.leaf(mask));
        }
    }
    Ok((linear(tape, bind, "cnn.ff1", h), updates))
}

/// Logits of the final MLP, `[B, D]` to `[B, 1]`.
pub fn final_logits<F: Float>(tape: &Tape<F>, bind: &Binding, cfg: &ClassifierConfig, h: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(h);
    if shape.len() != 2 || shape[1] != cfg.final_dims[0] {
        return Err(ModelError::Shape {
            got: shape,
            why: format!("expected [batch, {}]", cfg.final_dims[0]),
        });
    }
    Ok(mlp(tape, bind, "head", cfg.final_dims.len() - 1, h))
}

/// Probability of the SSB phase, `[B, D]` to `[B, 1]`.
pub fn final_reconstructor_forward<F: Float>(tape: &Tape<F>, bind: &Binding, cfg: &ClassifierConfig, h: Var) -> Result<Var, ModelError> {
    Ok(tape.sigmoid(final_logits(tape, bind, cfg, h)?))
}

#[derive(Clone, Debug)]
pub struct Classifier<F: Float> {
    pub cfg: ClassifierConfig,
    pub store: ParamStore<F>,
}

fn add_linear<F: Float>(store: &mut ParamStore<F>, prefix: &str, fan_in: usize, fan_out: usize, relu_gain: bool, rng: &mut ChaCha8Rng) {
    let bound = if relu_gain { (6.0 / fan_in as f64).sqrt() } else { 1.0 / (fan_in as f64).sqrt() };
    store.insert(&format!("{prefix}.w"), uniform(&[fan_in, fan_out], bound, rng), true);
    store.insert(&format!("{prefix}.b"), uniform(&[fan_out], 1.0 / (fan_in as f64).sqrt(), rng), true);
}

fn add_mlp<F: Float>(store: &mut ParamStore<F>, prefix: &str, dims: &[usize], rng: &mut ChaCha8Rng) {
    for (i, w) in dims.windows(2).enumerate() {
        // layers feeding a ReLU get the ReLU gain
        add_linear(store, &format!("{prefix}.{i}"), w[0], w[1], i + 2 < dims.len(), rng);
    }
}

fn add_bn<F: Float>(store: &mut ParamStore<F>, prefix: &str, c: usize) {
    store.insert(&format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[c])), true);
    store.insert(&format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[c])), true);
    store.insert(&format!("{prefix}.mean"), ArrayD::zeros(IxDyn(&[c])), false);
    store.insert(&format!("{prefix}.var"), ArrayD::ones(IxDyn(&[c])), false);
}

impl<F: Float> Classifier<F> {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self, ModelError> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        add_mlp(&mut store, "recon", &cfg.reconstructor_dims, &mut rng);
        let d = cfg.feature_width();
        match cfg.arch {
            Arch::Birnn => {
                let h = cfg.rnn_hidden_total / 2;
                let dirs: &[&str] = if cfg.tie_directions { &["fwd"] } else { &["fwd", "bwd"] };
                let gates: &[&str] = match cfg.rnn_cell {
                    RnnCell::Gru => &["r", "z", "n"],
                    RnnCell::Vanilla => &[""],
                };
                let bound = 1.0 / (h as f64).sqrt();
                for dir in dirs {
                    for g in gates {
                        let p = format!("rnn.{dir}");
                        store.insert(&format!("{p}.w_i{g}"), uniform(&[d, h], bound, &mut rng), true);
                        store.insert(&format!("{p}.w_h{g}"), orthogonal(h, &mut rng), true);
                        store.insert(&format!("{p}.b_i{g}"), uniform(&[h], bound, &mut rng), true);
                        store.insert(&format!("{p}.b_h{g}"), uniform(&[h], bound, &mut rng), true);
                    }
                }
            }
            Arch::Cnn => {
                let c = &cfg.cnn;
                for j in 0..c.dilations.len() {
                    for k in 0..2 {
                        let cin = if k == 0 { d } else { c.channels };
                        add_linear(&mut store, &format!("cnn.b{j}.conv{k}"), c.kernel * cin, c.channels, true, &mut rng);
                        add_bn(&mut store, &format!("cnn.b{j}.bn{k}"), c.channels);
                    }
                }
                let cat = c.channels * c.dilations.len();
                add_linear(&mut store, "cnn.merge", cat, c.merge_channels, true, &mut rng);
                add_bn(&mut store, "cnn.merge.bn", c.merge_channels);
                add_linear(&mut store, "cnn.ff0", c.merge_channels, c.ff_width, true, &mut rng);
                add_linear(&mut store, "cnn.ff1", c.ff_width, c.ff_width, false, &mut rng);
            }
        }
        add_mlp(&mut store, "head", &cfg.final_dims, &mut rng);
        Ok(Self { cfg, store })
    }

    /// Logits `[B, 1]` for shadows `x[B, n_s, l, 4]`, plus batchnorm statistics in training mode.
    pub fn forward(&self, tape: &Tape<F>, bind: &Binding, x: &ArrayD<F>, mode: &mut Mode<'_>) -> Result<(Var, Vec<BnUpdate<F>>), ModelError> {
        let xv = tape.leaf(x.clone());
        let feats = shadow_reconstructor_forward(tape, bind, &self.cfg, xv)?;
        let pooled = mean_pool_shadows(tape, feats);
        let (h, updates) = match self.cfg.arch {
            Arch::Birnn => (birnn_forward(tape, bind, &self.cfg, pooled)?, Vec::new()),
            Arch::Cnn => cnn_forward(tape, bind, &self.store, &self.cfg, pooled, mode)?,
        };
        Ok((final_logits(tape, bind, &self.cfg, h)?, updates))
    }

    /// Exponential moving average of the batch statistics, momentum `bn_momentum`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) {
        let m = F::lit(self.cfg.bn_momentum);
        for u in updates {
            for (key, batch) in [("mean", &u.mean), ("var", &u.var)] {
                let run = self.store.get_mut(&format!("{}.{key}", u.prefix));
                ndarray::Zip::from(run).and(batch).for_each(|r, &b| *r = (F::one() - m) * *r + m * b);
            }
        }
    }

    /// SSB probabilities in inference mode.
    pub fn predict_proba(&self, x: &ArrayD<F>) -> Result<Vec<F>, ModelError> {
        let tape = Tape::new();
        let bind = self.store.bind(&tape);
        let (logits, _) = self.forward(&tape, &bind, x, &mut Mode::Eval)?;
        Ok(tape.value(logits).iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.to_bytes(self.cfg.arch.tag())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.store.save(path, self.cfg.arch.tag())?)
    }

    /// Loads weights, checking every tensor against a fresh model built from `cfg`.
    pub fn load(path: &Path, cfg: ClassifierConfig) -> Result<Self, ModelError> {
        let template = Self::new(cfg.clone(), 0)?;
        let store = ParamStore::load(path, cfg.arch.tag(), &template.store)?;
        Ok(Self { cfg, store })
    }

    pub fn from_bytes(bytes: &[u8], cfg: ClassifierConfig) -> Result<Self, ModelError> {
        let template = Self::new(cfg.clone(), 0)?;
        let store = ParamStore::from_bytes(bytes, cfg.arch.tag(), &template.store)?;
        Ok(Self { cfg, store })
    }
}
