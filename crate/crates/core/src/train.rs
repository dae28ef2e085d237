//! Learning-rate schedule, training driver and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{make_dataset, Dataset, DatasetSpec, DegradationSpec, Weather};
use crate::error::{Error, Result};
use crate::loss::{total_loss_and_grad_cached, LossBreakdown, PerceptualProxy};
use crate::metrics::{psnr, ssim};
use crate::model::{Model, BANK_SLOTS};
use crate::optim::{clip_grad_norm, Adam};
use crate::prior::PriorEmbedding;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(
            "step",
            format!("{step} is past the schedule end {}", cfg.total_steps),
        ));
    }
    // Weighted form so both endpoints are reproduced exactly.
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.total_steps as f64).cos());
    Ok(cfg.lr_start * w + cfg.lr_end * (1.0 - w))
}

/// Independent seed streams derived from the run seed.
pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const VAL_DATA: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const BATCHES: u64 = 4;

    pub fn derive(seed: u64, stream: u64) -> u64 {
        let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// A degraded/clean pair in training precision with its prior.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair<T> {
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
    pub prior: Option<PriorEmbedding<T>>,
    pub spec: DegradationSpec,
}

/// Casts a dataset and attaches the priors `model` needs.
pub fn prepare_pairs<T: Scalar>(dataset: &Dataset, model: &Model<T>) -> Result<Vec<TrainPair<T>>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(TrainPair {
                degraded: s.degraded.cast(),
                clean: s.clean.cast(),
                prior: model.synth_prior_for(&s.spec)?,
                spec: s.spec,
            })
        })
        .collect()
}

/// The training and validation sets a config describes.
pub fn datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let spec = |count, stream| DatasetSpec {
        count,
        mix: d.mix.clone(),
        height: d.size,
        width: d.size,
        severity: (d.severity_min, d.severity_max),
        seed: streams::derive(cfg.seed, stream),
    };
    Ok((
        make_dataset(&spec(d.train_count, streams::TRAIN_DATA))?,
        make_dataset(&spec(d.val_count, streams::VAL_DATA))?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,char,perc,lr";

pub fn loss_csv(stats: &[StepStats]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for st in stats {
        writeln!(
            s,
            "{},{:e},{:e},{:e},{:e}",
            st.step, st.loss.total, st.loss.charbonnier, st.loss.perceptual, st.lr
        )
        .expect("writing to a string");
    }
    s
}

/// Owns the model, optimizer state and loss network for one run.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    optimizer: Adam<T>,
    proxy: PerceptualProxy<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model, streams::derive(config.seed, streams::MODEL_INIT))?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: Model<T>, config: TrainConfig) -> Self {
        Self {
            optimizer: Adam::new(&model, &[BANK_SLOTS]),
            proxy: PerceptualProxy::default(),
            model,
            config,
        }
    }

    /// One forward/backward/Adam update over `batch`, averaging the loss.
    pub fn step(&mut self, batch: &[&TrainPair<T>], step: usize) -> Result<StepStats> {
        let batch: Vec<_> = batch.iter().map(|&p| (p, None)).collect();
        self.step_cached(&batch, step)
    }

    fn step_cached(&mut self, batch: &[(&TrainPair<T>, Option<&[Tensor<T>]>)], step: usize) -> Result<StepStats> {
        if self.model.bank.is_frozen() {
            return Err(Error::invalid("train_step", "memory bank is frozen"));
        }
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let lr = lr_at(step, &self.config)?;
        let mut grad = self.model.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = LossBreakdown {
            total: 0.0,
            charbonnier: 0.0,
            perceptual: 0.0,
        };
        for &(pair, features) in batch {
            let (out, cache) = self.model.forward(&pair.degraded, pair.prior.as_ref())?;
            let (l, dout) = total_loss_and_grad_cached(
                &pair.clean,
                features,
                &out,
                &self.proxy,
                self.config.charbonnier_eps,
                self.config.lambda_perc,
            )?;
            loss.total += l.total * scale;
            loss.charbonnier += l.charbonnier * scale;
            loss.perceptual += l.perceptual * scale;
            self.model.backward(&cache, &dout.scale(T::of(scale)), &mut grad)?;
        }
        let grad_norm = clip_grad_norm(&mut grad, self.config.clip_norm);
        if !loss.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "training diverged at step {step}: loss {}, grad norm {grad_norm}",
                loss.total
            )));
        }
        self.optimizer.step(&mut self.model, &grad, lr)?;
        Ok(StepStats {
            step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Runs every step of the schedule on shuffled mini-batches from `pairs`.
    pub fn fit(&mut self, pairs: &[TrainPair<T>], mut on_step: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        if pairs.is_empty() {
            return Err(Error::invalid("training set", "no pairs"));
        }
        let features = if self.config.lambda_perc == 0.0 {
            vec![None; pairs.len()]
        } else {
            pairs
                .iter()
                .map(|p| self.proxy.features(&p.clean).map(Some))
                .collect::<Result<Vec<_>>>()?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(streams::derive(self.config.seed, streams::BATCHES));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut cursor = order.len();
        let mut stats = Vec::with_capacity(self.config.total_steps);
        for step in 0..self.config.total_steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let i = order[cursor];
                batch.push((&pairs[i], features[i].as_deref()));
                cursor += 1;
            }
            let st = self.step_cached(&batch, step)?;
            on_step(&st);
            stats.push(st);
        }
        Ok(stats)
    }
}

/// Per-image evaluation scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub weather: Weather,
    pub severity: f64,
    pub psnr_deg: f64,
    pub psnr_restored: f64,
    pub ssim_deg: f64,
    pub ssim_restored: f64,
}

/// Scores the restored and the unrestored input against the clean target.
///
/// Both scores use the same precision-cast tensors the model sees.
pub fn evaluate<T: Scalar>(model: &Model<T>, pairs: &[TrainPair<T>]) -> Result<Vec<EvalRow>> {
    pairs
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let restored = model.restore(&p.degraded, p.prior.as_ref())?;
            Ok(EvalRow {
                index,
                weather: p.spec.weather,
                severity: p.spec.severity,
                psnr_deg: psnr(&p.degraded, &p.clean, 1.0)?,
                psnr_restored: psnr(&restored, &p.clean, 1.0)?,
                ssim_deg: ssim(&p.degraded, &p.clean)?,
                ssim_restored: ssim(&restored, &p.clean)?,
            })
        })
        .collect()
}

/// Column means over a set of rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub count: usize,
    pub psnr_deg: f64,
    pub psnr_restored: f64,
    pub ssim_deg: f64,
    pub ssim_restored: f64,
}

pub fn summarize<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> Option<EvalSummary> {
    let mut s = EvalSummary {
        count: 0,
        psnr_deg: 0.0,
        psnr_restored: 0.0,
        ssim_deg: 0.0,
        ssim_restored: 0.0,
    };
    for r in rows {
        s.count += 1;
        s.psnr_deg += r.psnr_deg;
        s.psnr_restored += r.psnr_restored;
        s.ssim_deg += r.ssim_deg;
        s.ssim_restored += r.ssim_restored;
    }
    if s.count == 0 {
        return None;
    }
    let n = s.count as f64;
    s.psnr_deg /= n;
    s.psnr_restored /= n;
    s.ssim_deg /= n;
    s.ssim_restored /= n;
    Some(s)
}

pub const EVAL_CSV_HEADER: &str = "index,weather,severity,psnr_deg,psnr_restored,ssim_deg,ssim_restored";

/// Per-image rows followed by `mean_<weather>` rows and an overall `mean_all` row.
pub fn evaluation_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.4},{:.6},{:.6},{:.6},{:.6}",
            r.index, r.weather, r.severity, r.psnr_deg, r.psnr_restored, r.ssim_deg, r.ssim_restored
        )
        .expect("writing to a string");
    }
    let groups = Weather::ALL
        .iter()
        .map(|&w| {
            (
                format!("mean_{w}"),
                w.to_string(),
                summarize(rows.iter().filter(|r| r.weather == w)),
            )
        })
        .chain(std::iter::once((
            "mean_all".to_string(),
            "all".to_string(),
            summarize(rows),
        )));
    for (label, weather, summary) in groups {
        if let Some(m) = summary {
            writeln!(
                s,
                "{label},{weather},,{:.6},{:.6},{:.6},{:.6}",
                m.psnr_deg, m.psnr_restored, m.ssim_deg, m.ssim_restored
            )
            .expect("writing to a string");
        }
    }
    s
}
