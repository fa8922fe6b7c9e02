//! Training loop and evaluation.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use qphase_core::datagen::{Dataset, UNLABELED};
use qphase_core::metrics::Metrics;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::model::{Classifier, ClassifierConfig, Mode, ModelError};
use crate::params::AdamConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty corpus")]
    Empty,
    #[error("state {index} has no label")]
    Unlabeled { index: usize },
    #[error("requested {requested} shadows but the data holds only {available}")]
    ShadowCount { requested: usize, available: usize },
    #[error("loss diverged at epoch {epoch}, batch {batch} (l = {l}): loss = {loss}, last finite loss = {last_finite}")]
    Diverged { epoch: usize, batch: usize, l: usize, loss: f32, last_finite: f32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Random subset of shadows per state, redrawn every epoch. `None` uses all.
    #[serde(default)]
    pub train_shadows: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
            train_shadows: None,
            eval_batch: 16,
        }
    }
}

/// One state's shadows, `n_s x l x 4` row-major.
#[derive(Clone, Debug)]
pub struct Sample {
    pub l: usize,
    pub n_s: usize,
    pub label: u8,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn from_datasets(sets: &[Dataset]) -> Self {
        let mut samples = Vec::new();
        for d in sets {
            for i in 0..d.n_states() {
                samples.push(Sample {
                    l: d.l(),
                    n_s: d.n_s(),
                    label: d.labels[i],
                    data: d.record(i).to_vec(),
                });
            }
        }
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stratified by `(l, label)`: a `fraction` of every stratum goes to the second part.
    pub fn split(&self, fraction: f64, seed: u64) -> (Corpus, Corpus) {
        let mut keys: Vec<(usize, u8)> = self.samples.iter().map(|s| (s.l, s.label)).collect();
        keys.sort_unstable();
        keys.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for key in keys {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| (self.samples[i].l, self.samples[i].label) == key).collect();
            idx.shuffle(&mut rng);
            let n_b = (idx.len() as f64 * fraction).round() as usize;
            for (k, &i) in idx.iter().enumerate() {
                if k < n_b { &mut b } else { &mut a }.push(self.samples[i].clone());
            }
        }
        (Corpus { samples: a }, Corpus { samples: b })
    }
}

/// `[B, n, l, 4]` from the first `n` shadows of each state, or a random
/// subset of `n` when `rng` is given.
fn batch_tensor(samples: &[&Sample], n: usize, rng: Option<&mut ChaCha8Rng>) -> ArrayD<f32> {
    let l = samples[0].l;
    let row = l * 4;
    let mut out = Vec::with_capacity(samples.len() * n * row);
    match rng {
        None => {
            for s in samples {
                out.extend_from_slice(&s.data[..n * row]);
            }
        }
        Some(rng) => {
            for s in samples {
                let mut pick = rand::seq::index::sample(rng, s.n_s, n).into_vec();
                pick.sort_unstable();
                for k in pick {
                    out.extend_from_slice(&s.data[k * row..(k + 1) * row]);
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[samples.len(), n, l, 4]), out).expect("batch shape")
}

/// Batches of indices, one patch length per batch, rotating across lengths.
fn make_batches(corpus: &Corpus, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut ls: Vec<usize> = corpus.samples.iter().map(|s| s.l).collect();
    ls.sort_unstable();
    ls.dedup();
    let mut queues: Vec<Vec<Vec<usize>>> = ls
        .iter()
        .map(|&l| {
            let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.samples[i].l == l).collect();
            idx.shuffle(rng);
            idx.chunks(batch).map(<[usize]>::to_vec).rev().collect()
        })
        .collect();
    let mut out = Vec::new();
    while queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if let Some(b) = q.pop() {
                out.push(b);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub model: Classifier<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// SSB probabilities for every state of `corpus` from its first `n_s_sub` shadows.
pub fn predict_corpus(model: &Classifier<f32>, corpus: &Corpus, n_s_sub: Option<usize>, eval_batch: usize) -> Result<Vec<f64>, TrainError> {
    let mut probs = vec![0.0; corpus.len()];
    let mut ls: Vec<usize> = corpus.samples.iter().map(|s| s.l).collect();
    ls.sort_unstable();
    ls.dedup();
    for l in ls {
        let idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.samples[i].l == l).collect();
        for chunk in idx.chunks(eval_batch.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &corpus.samples[i]).collect();
            let avail = refs.iter().map(|s| s.n_s).min().unwrap_or(0);
            let n = n_s_sub.unwrap_or(avail);
            if n == 0 || n > avail {
                return Err(TrainError::ShadowCount { requested: n, available: avail });
            }
            let x = batch_tensor(&refs, n, None);
            for (&i, p) in chunk.iter().zip(model.predict_proba(&x)?) {
                probs[i] = p as f64;
            }
        }
    }
    Ok(probs)
}

pub fn predict(model: &Classifier<f32>, dataset: &Dataset, n_s_sub: Option<usize>) -> Result<Vec<f64>, TrainError> {
    predict_corpus(model, &Corpus::from_datasets(std::slice::from_ref(dataset)), n_s_sub, 16)
}

/// Accuracy at threshold 0.5, ROC and AUC over a labeled corpus.
pub fn evaluate_corpus(model: &Classifier<f32>, corpus: &Corpus, n_s_sub: Option<usize>) -> Result<Metrics, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::Empty);
    }
    if let Some(i) = corpus.samples.iter().position(|s| s.label == UNLABELED) {
        return Err(TrainError::Unlabeled { index: i });
    }
    let probs = predict_corpus(model, corpus, n_s_sub, 16)?;
    Ok(Metrics::from_scores(&probs, &corpus.labels(), 0.5))
}

pub fn evaluate(model: &Classifier<f32>, dataset: &Dataset, n_s_sub: usize) -> Result<Metrics, TrainError> {
    evaluate_corpus(model, &Corpus::from_datasets(std::slice::from_ref(dataset)), Some(n_s_sub))
}

fn val_scores(model: &Classifier<f32>, val: &Corpus, eval_batch: usize) -> Result<(f64, f64), TrainError> {
    let probs = predict_corpus(model, val, None, eval_batch)?;
    let labels = val.labels();
    let loss = probs.iter().zip(&labels).map(|(&p, &y)| bce(p, y)).sum::<f64>() / probs.len() as f64;
    let acc = qphase_core::metrics::accuracy(&probs, &labels, 0.5);
    Ok((loss, acc))
}

/// Adam on binary cross-entropy with early stopping on validation accuracy.
/// Row 0 of the log is the untrained model.
pub fn train(
    train: &Corpus,
    val: &Corpus,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Empty);
    }
    for c in [train, val] {
        if let Some(i) = c.samples.iter().position(|s| s.label == UNLABELED) {
            return Err(TrainError::Unlabeled { index: i });
        }
    }
    let min_ns = train.samples.iter().map(|s| s.n_s).min().unwrap_or(0);
    if let Some(k) = tcfg.train_shadows {
        if k == 0 || k > min_ns {
            return Err(TrainError::ShadowCount { requested: k, available: min_ns });
        }
    }
    let mut model = Classifier::<f32>::new(cfg.clone(), tcfg.seed)?;
    let adam = AdamConfig {
        lr: tcfg.lr,
        beta1: tcfg.beta1,
        beta2: tcfg.beta2,
        eps: 1e-8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7472_6169_6e);

    let mut log = Vec::new();
    let (l0, a0) = val_scores(&model, val, tcfg.eval_batch)?;
    let train0 = {
        let probs = predict_corpus(&model, train, tcfg.train_shadows, tcfg.eval_batch)?;
        probs.iter().zip(train.labels()).map(|(&p, y)| bce(p, y)).sum::<f64>() / probs.len() as f64
    };
    let row = EpochLog { epoch: 0, train_loss: train0, val_loss: l0, val_acc: a0 };
    on_epoch(&row);
    log.push(row);
    let (mut best, mut best_epoch, mut best_loss) = (model.clone(), 0, l0);
    let mut best_acc = a0;
    let mut stale = 0;
    let mut last_finite = f32::NAN;

    for epoch in 1..=tcfg.max_epochs {
        let batches = make_batches(train, tcfg.batch_size, &mut rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let x = match tcfg.train_shadows {
                Some(k) => batch_tensor(&refs, k, Some(&mut rng)),
                None => batch_tensor(&refs, min_ns, None),
            };
            let y = ArrayD::from_shape_vec(IxDyn(&[refs.len(), 1]), refs.iter().map(|s| s.label as f32).collect()).expect("labels");
            let tape = Tape::new();
            let bind = model.store.bind(&tape);
            let (logits, updates) = model.forward(&tape, &bind, &x, &mut Mode::Train(&mut rng))?;
            let loss = tape.bce_with_logits(logits, &y);
            let lv = tape.value(loss)[[]];
            if !lv.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    l: refs[0].l,
                    loss: lv,
                    last_finite,
                });
            }
            last_finite = lv;
            let mut grads = tape.backward(loss);
            let named = model.store.collect_grads(&bind, &mut grads);
            drop(grads);
            drop(tape);
            model.store.adam_step(&named, &adam);
            model.apply_bn_updates(&updates);
            total += lv as f64 * refs.len() as f64;
            count += refs.len();
        }
        let (vl, va) = val_scores(&model, val, tcfg.eval_batch)?;
        let row = EpochLog {
            epoch,
            train_loss: total / count as f64,
            val_loss: vl,
            val_acc: va,
        };
        on_epoch(&row);
        log.push(row);
        if va > best_acc || (va == best_acc && vl < best_loss) {
            best = model.clone();
            best_acc = va;
            best_loss = vl;
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        best_val_acc: best_acc,
    })
}

/// Splits the datasets `1 - val_fraction : val_fraction` and trains.
pub fn train_datasets(sets: &[Dataset], cfg: &ClassifierConfig, tcfg: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome, TrainError> {
    let corpus = Corpus::from_datasets(sets);
    let (tr, va) = corpus.split(tcfg.val_fraction, tcfg.seed);
    train(&tr, &va, cfg, tcfg, on_epoch)
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_loss,val_acc")?;
    for r in log {
        writeln!(f, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc)?;
    }
    f.flush()?;
    Ok(())
}
