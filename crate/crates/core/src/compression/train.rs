use std::io::Write;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::LossSpec;
use super::metrics::{sample_relative_error, split_dataset};
use super::model::Autoencoder;
use crate::autodiff::{AdamState, Tape, Tensor};
use crate::data::FieldSeries;
use crate::error::{ensure, Error, Result};

pub const METRICS_HEADER: &str = "step,split,loss,rel_err,max_err";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

/// Mean loss, mean relative error and max relative error over one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub split: Split,
    pub loss: f64,
    pub rel_err: f64,
    pub max_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub step: usize,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    pub all: SplitMetrics,
}

impl Evaluation {
    pub fn csv_rows(&self) -> String {
        [self.train, self.test, self.all]
            .iter()
            .map(|m| {
                format!(
                    "{},{},{:.9e},{:.9e},{:.9e}\n",
                    self.step,
                    m.split.name(),
                    m.loss,
                    m.rel_err,
                    m.max_err
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub stop: StopReason,
    pub final_eval: Evaluation,
    pub evaluations: Vec<Evaluation>,
    /// Batch loss of every step taken.
    pub batch_losses: Vec<f64>,
    pub seconds: f64,
}

/// Model, optimizer and data split of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Autoencoder,
    optimizer: AdamState,
    loss: LossSpec,
    step: usize,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    /// Parameters, optimizer and step count before the most recent update.
    previous: Option<(Vec<Vec<f64>>, AdamState, usize)>,
}

impl Trainer {
    pub fn new(model: Autoencoder, samples: usize) -> Result<Self> {
        let lens: Vec<usize> = model.param_vectors().iter().map(Vec::len).collect();
        let optimizer = AdamState::new(model.config().lr, &lens);
        Self::resume(model, optimizer, 0, samples)
    }

    /// Continues from a stored optimizer state and step count.
    pub fn resume(model: Autoencoder, optimizer: AdamState, step: usize, samples: usize) -> Result<Self> {
        let cfg = model.config();
        let (train_idx, test_idx) = split_dataset(samples, cfg.split, cfg.split_seed)?;
        let loss = LossSpec::new(model.mesh(), cfg.lambda)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(step as u64));
        Ok(Trainer {
            model,
            optimizer,
            loss,
            step,
            train_idx,
            test_idx,
            rng,
            queue: Vec::new(),
            previous: None,
        })
    }

    pub fn model(&self) -> &Autoencoder {
        &self.model
    }

    pub fn into_model(self) -> Autoencoder {
        self.model
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_idx
    }

    fn steps_per_epoch(&self) -> usize {
        self.train_idx.len().div_ceil(self.model.config().batch_size)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.model.config().batch_size.min(self.train_idx.len());
        if self.queue.len() < b {
            let mut order = self.train_idx.clone();
            order.shuffle(&mut self.rng);
            // Leftovers of the previous epoch go first so every sample is seen once per epoch.
            order.append(&mut self.queue);
            self.queue = order;
        }
        let at = self.queue.len() - b;
        self.queue.split_off(at)
    }

    /// Loss and gradients of the mean per-sample loss over `batch`. All
    /// samples share one tape, so the kernel filters are evaluated once.
    pub fn batch_gradient(&self, series: &FieldSeries, batch: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        ensure!(!batch.is_empty(), Contract, "empty mini-batch");
        let model = &self.model;
        let shape = [model.channels(), model.mesh().len()];
        let mut tape = Tape::with_precision(model.config().precision);
        let bound = model.bind(&mut tape, true)?;
        let mut total = None;
        for &t in batch {
            let x = tape.constant(Tensor::new(&shape, series.sample(t).to_vec())?);
            let z = model.record_encode(&mut tape, &bound, x)?;
            let y = model.record_decode(&mut tape, &bound, z)?;
            let l = self.loss.record(&mut tape, y, x)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        tape.backward(loss)?;
        let grads = bound
            .params
            .iter()
            .map(|&p| tape.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(p).len()]))
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }

    /// Restores the state before the last update, whose parameters produced a
    /// non-finite loss, and reports the divergence.
    fn diverged(&mut self, what: String) -> Error {
        if let Some((params, opt, step)) = self.previous.take() {
            if self.model.set_param_vectors(&params).is_ok() {
                self.optimizer = opt;
                self.step = step;
            }
        }
        Error::Training(format!("{what}; state rolled back to step {}", self.step))
    }

    /// One Adam step on the next mini-batch. A non-finite loss or gradient is
    /// a training error; the model and optimizer are left at the last state
    /// whose loss was finite.
    pub fn step(&mut self, series: &FieldSeries) -> Result<f64> {
        let batch = self.next_batch();
        let (loss, grads) = self.batch_gradient(series, &batch)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            let msg = format!("non-finite loss or gradient at step {} (loss {loss})", self.step + 1);
            return Err(self.diverged(msg));
        }
        let mut params = self.model.param_vectors();
        let mut opt = self.optimizer.clone();
        {
            let mut refs: Vec<&mut [f64]> = params.iter_mut().map(Vec::as_mut_slice).collect();
            let grefs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut refs, &grefs)?;
        }
        ensure!(
            params.iter().flatten().all(|v| v.is_finite()),
            Training,
            "parameters became non-finite at step {}",
            self.step + 1
        );
        let before = self.model.param_vectors();
        self.model.set_param_vectors(&params)?;
        self.previous = Some((before, std::mem::replace(&mut self.optimizer, opt), self.step));
        self.step += 1;
        Ok(loss)
    }

    /// Metrics of the current model on the train, test and full index sets.
    pub fn evaluate(&self, series: &FieldSeries) -> Result<Evaluation> {
        let recon = self.model.reconstruct_samples(series)?;
        ensure!(
            recon.iter().flatten().all(|v| v.is_finite()),
            Training,
            "reconstruction is not finite at step {}",
            self.step
        );
        let per: Vec<(f64, f64)> = (0..series.samples())
            .map(|t| {
                let r = &recon[t];
                let x = series.sample(t);
                Ok((self.loss.value(r, x)?, sample_relative_error(r, x)?))
            })
            .collect::<Result<_>>()?;
        let summarize = |split: Split, idx: &[usize]| {
            let n = idx.len().max(1) as f64;
            SplitMetrics {
                split,
                loss: idx.iter().map(|&t| per[t].0).sum::<f64>() / n,
                rel_err: idx.iter().map(|&t| per[t].1).sum::<f64>() / n,
                max_err: idx.iter().map(|&t| per[t].1).fold(0.0, f64::max),
            }
        };
        let all: Vec<usize> = (0..series.samples()).collect();
        Ok(Evaluation {
            step: self.step,
            train: summarize(Split::Train, &self.train_idx),
            test: summarize(Split::Test, &self.test_idx),
            all: summarize(Split::All, &all),
        })
    }

    fn target_met(&self, e: &Evaluation) -> bool {
        let cfg = self.model.config();
        if cfg.target_rel.is_none() && cfg.target_max.is_none() {
            return false;
        }
        cfg.target_rel.is_none_or(|t| e.all.rel_err <= t) && cfg.target_max.is_none_or(|t| e.all.max_err <= t)
    }

    /// Trains until `max_steps` or until the full-data targets are met,
    /// writing metric rows to `log` at every evaluation.
    pub fn run(&mut self, series: &FieldSeries, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        let start = Instant::now();
        let cfg = self.model.config().clone();
        let every = if cfg.eval_every == 0 { self.steps_per_epoch() } else { cfg.eval_every };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{METRICS_HEADER}")?;
        }
        let mut evaluations = Vec::new();
        let mut batch_losses = Vec::new();
        let mut record = |e: Evaluation, log: &mut Option<&mut dyn Write>| -> Result<Evaluation> {
            info!(
                "step {}: train loss {:.4e}, all rel {:.4}, max {:.4}",
                e.step, e.train.loss, e.all.rel_err, e.all.max_err
            );
            if let Some(w) = log.as_deref_mut() {
                w.write_all(e.csv_rows().as_bytes())?;
                w.flush()?;
            }
            evaluations.push(e.clone());
            Ok(e)
        };
        let mut last = record(self.evaluate(series)?, &mut log)?;
        let mut stop = StopReason::MaxSteps;
        if self.target_met(&last) {
            stop = StopReason::TargetReached;
        }
        while stop == StopReason::MaxSteps && self.step < cfg.max_steps {
            batch_losses.push(self.step(series)?);
            if self.step.is_multiple_of(every) || self.step == cfg.max_steps {
                let e = match self.evaluate(series) {
                    Err(Error::Training(msg)) => return Err(self.diverged(msg)),
                    r => r?,
                };
                last = record(e, &mut log)?;
                if self.target_met(&last) {
                    stop = StopReason::TargetReached;
                }
            }
        }
        Ok(TrainOutcome {
            steps: self.step,
            stop,
            final_eval: last,
            evaluations,
            batch_losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}
