//! End-to-end runs: synthesize data, train, evaluate.

use crate::config::TrainConfig;
use crate::error::Result;
use crate::model::{Ablation, Model};
use crate::scalar::Scalar;
use crate::train::{datasets, evaluate, prepare_pairs, summarize, EvalSummary, StepStats, Trainer};

#[derive(Clone, Debug)]
pub struct RunResult<T> {
    pub config: TrainConfig,
    pub stats: Vec<StepStats>,
    /// Validation scores of the freshly initialized model.
    pub untrained: EvalSummary,
    pub trained: EvalSummary,
    pub model: Model<T>,
}

impl<T> RunResult<T> {
    pub fn ablation(&self) -> Ablation {
        self.config.model.ablation()
    }

    pub fn gain_db(&self) -> f64 {
        self.trained.psnr_restored - self.trained.psnr_deg
    }
}

/// Trains on the config's synthetic data and scores the validation split before and after.
pub fn run<T: Scalar>(config: &TrainConfig) -> Result<RunResult<T>> {
    let (train, val) = datasets(config)?;
    let mut trainer = Trainer::<T>::new(config.clone())?;
    let train_pairs = prepare_pairs(&train, &trainer.model)?;
    let val_pairs = prepare_pairs(&val, &trainer.model)?;
    let untrained = summarize(&evaluate(&trainer.model, &val_pairs)?).expect("validation set is non-empty");
    let stats = trainer.fit(&train_pairs, |_| {})?;
    trainer.model.bank.freeze();
    let trained = summarize(&evaluate(&trainer.model, &val_pairs)?).expect("validation set is non-empty");
    Ok(RunResult {
        config: config.clone(),
        stats,
        untrained,
        trained,
        model: trainer.model,
    })
}

/// `config` with the given seed and ablation.
pub fn variant(config: &TrainConfig, seed: u64, ablation: Ablation) -> TrainConfig {
    let mut c = config.clone();
    c.seed = seed;
    c.model = c.model.with_ablation(ablation);
    c
}

/// `config` with the given seed and memory-bank size; `k` is capped at the capacity.
pub fn capacity_variant(config: &TrainConfig, seed: u64, capacity: usize, top_k: usize) -> TrainConfig {
    let mut c = config.clone();
    c.seed = seed;
    c.model.imb_capacity = capacity;
    c.model.imb_topk = top_k.min(capacity);
    c
}

/// Mean of `f` over runs.
pub fn mean_of<T>(runs: &[&RunResult<T>], f: impl Fn(&RunResult<T>) -> f64) -> f64 {
    runs.iter().map(|r| f(r)).sum::<f64>() / runs.len() as f64
}
