//! Neural shadow classifiers on a small reverse-mode autodiff.

pub mod autodiff;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod train;

pub use autodiff::{Float, Grads, Tape, Var};
pub use model::{Arch, Classifier, ClassifierConfig, CnnConfig, Mode, ModelError, RnnCell};
pub use params::{AdamConfig, CheckpointError, ParamStore};
pub use train::{evaluate, evaluate_corpus, predict, predict_corpus, train, train_datasets, Corpus, EpochLog, Sample, TrainConfig, TrainError, TrainOutcome};
