//! Training loop, optimizers and benchmarks.

mod bench;
mod optim;

pub use bench::{bench_compare, BenchConfig, BenchModel, BenchReport, BenchRow};
pub use optim::{adam_step, sgd_momentum_step, AdamState, Optimizer, OptimizerConfig, SgdState};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{plan_step, GroupDesc, GroupPlan, Keep, ModelSpec, Mode, Network};
use crate::slicing::SliceScheme;
use crate::tensor::{counters, Element, Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Usage(format!("unknown precision '{other}' (expected f32 or f64)"))),
        }
    }
}

/// Rows of features with integer labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    /// Row-major `[len, dim]`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize, dim: usize) -> &[f64] {
        &self.x[i * dim..(i + 1) * dim]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Consistency("training split is empty".into()));
        }
        for (name, s) in [("train", &self.train), ("test", &self.test)] {
            if s.x.len() != s.len() * self.dim {
                return Err(Error::Consistency(format!(
                    "{name} split has {} values for {} rows of width {}",
                    s.x.len(),
                    s.len(),
                    self.dim
                )));
            }
            if let Some(&l) = s.y.iter().find(|&&l| l >= self.classes) {
                return Err(Error::Label { label: l, classes: self.classes });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub scheme: SliceScheme,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of final epochs trained without dropout. Defaults to 0 for
    /// MLPs and 0.1 otherwise.
    #[serde(default)]
    pub cutoff_fraction: Option<f64>,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    pub fn cutoff_fraction(&self) -> f64 {
        self.cutoff_fraction.unwrap_or(match self.model {
            ModelSpec::Mlp { .. } => 0.0,
            _ => 0.1,
        })
    }

    /// Number of final epochs run on the full network.
    pub fn cutoff_epochs(&self) -> usize {
        (self.epochs as f64 * self.cutoff_fraction()).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        let f = self.cutoff_fraction();
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("cutoff_fraction {f} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Measurements for one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub time_ms: f64,
    pub element_reads: u64,
    pub element_writes: u64,
    pub copy_bytes: u64,
    pub multiply_ops: u64,
    pub peak_activation_bytes: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Groups restricted by a slice or unit subset this step.
    pub slice_samples: usize,
}

/// Per-epoch aggregate of [`StepMetrics`] plus evaluation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub scheme: String,
    pub p: f64,
    pub sliced: bool,
    pub step_time_ms: f64,
    pub peak_activation_bytes: u64,
    pub copy_bytes: u64,
    pub multiply_ops: u64,
    pub element_reads: u64,
    pub element_writes: u64,
    pub slice_samples: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSnapshot {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochMetrics>,
    pub params: Vec<ParamSnapshot>,
}

impl RunRecord {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn argmax_accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let v = logits.to_vec();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &v[i * classes..(i + 1) * classes];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// A network, its optimizer and the step RNG.
pub struct Trainer<T: Element> {
    pub net: Box<dyn Network<T>>,
    pub opt: Optimizer<T>,
    pub scheme: SliceScheme,
    pub groups: Vec<GroupDesc>,
    pub rng: ChaCha8Rng,
}

impl<T: Element> Trainer<T> {
    pub fn new(net: Box<dyn Network<T>>, scheme: SliceScheme, opt: OptimizerConfig, seed: u64) -> Result<Self> {
        scheme.validate()?;
        let groups = net.groups(&scheme)?;
        let opt = Optimizer::new(opt, net.store())?;
        Ok(Trainer { net, opt, scheme, groups, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Samples this step's plans. With `sliced == false` every group is full.
    pub fn sample_plans(&mut self, sliced: bool) -> Result<Vec<GroupPlan>> {
        let scheme = if sliced { self.scheme } else { SliceScheme::none() };
        plan_step(&scheme, &self.groups, &mut self.rng)
    }

    /// One training step on a batch: sample, forward, backward, update.
    pub fn step(&mut self, x: &Tensor<T>, labels: &[usize], sliced: bool) -> Result<(StepMetrics, Vec<GroupPlan>)> {
        let plans = self.sample_plans(sliced)?;
        let m = self.step_with_plans(x, labels, &plans)?;
        Ok((m, plans))
    }

    pub fn step_with_plans(&mut self, x: &Tensor<T>, labels: &[usize], plans: &[GroupPlan]) -> Result<StepMetrics> {
        counters::reset();
        let start = Instant::now();
        let (loss, accuracy) = {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let logits = self.net.forward(&mut g, xv, plans, Mode::Train, &mut self.rng)?;
            let accuracy = argmax_accuracy(g.value(logits), labels);
            let loss = g.cross_entropy(logits, labels)?;
            let lv = g.value(loss).item().to_f64();
            g.backward(loss)?;
            self.opt.step(self.net.store(), g.touched_regions())?;
            (lv, accuracy)
        };
        let time_ms = start.elapsed().as_secs_f64() * 1e3;
        let c = counters::snapshot();
        Ok(StepMetrics {
            time_ms,
            element_reads: c.element_reads,
            element_writes: c.element_writes,
            copy_bytes: c.copy_bytes_allocated,
            multiply_ops: c.multiply_ops,
            peak_activation_bytes: c.peak_activation_bytes,
            loss,
            accuracy,
            slice_samples: plans.iter().filter(|p| p.keep != Keep::All).count(),
        })
    }

    /// Full-network loss and accuracy over a split.
    pub fn evaluate(&mut self, split: &Split, dim: usize) -> Result<(f64, f64)> {
        const CHUNK: usize = 512;
        let (mut loss, mut hits) = (0.0, 0.0);
        for lo in (0..split.len()).step_by(CHUNK) {
            let hi = (lo + CHUNK).min(split.len());
            let x = batch_tensor::<T>(split, dim, &(lo..hi).collect::<Vec<_>>())?;
            let labels = &split.y[lo..hi];
            let mut g = Graph::new();
            let xv = g.input(x);
            let logits = self.net.forward(&mut g, xv, &[], Mode::Eval, &mut self.rng)?;
            hits += argmax_accuracy(g.value(logits), labels) * labels.len() as f64;
            let l = g.cross_entropy(logits, labels)?;
            loss += g.value(l).item().to_f64() * labels.len() as f64;
        }
        let n = split.len().max(1) as f64;
        Ok((loss / n, hits / n))
    }

    pub fn snapshot(&self) -> Vec<ParamSnapshot> {
        self.net
            .store()
            .iter()
            .map(|p| ParamSnapshot {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.to_f64_vec(),
            })
            .collect()
    }
}

pub fn batch_tensor<T: Element>(split: &Split, dim: usize, rows: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        data.extend(split.row(r, dim).iter().map(|&v| T::from_f64(v)));
    }
    Tensor::from_vec(data, &[rows.len(), dim])
}

/// Trains `cfg.model` on `data`. The last `cutoff_epochs` epochs run the
/// full network. Deterministic for a fixed config.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<RunRecord> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, data),
        Precision::F64 => train_typed::<f64>(cfg, data),
    }
}

pub fn train_typed<T: Element>(cfg: &TrainConfig, data: &Dataset) -> Result<RunRecord> {
    train_with::<T>(cfg, data, |_, _| {})
}

/// [`train_typed`] with a callback after every epoch.
pub fn train_with<T: Element>(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics, &Trainer<T>),
) -> Result<RunRecord> {
    cfg.validate()?;
    data.validate()?;
    let net = cfg.model.build::<T>(data.dim, data.classes, cfg.seed, cfg.scheme.delayed)?;
    let mut tr = Trainer::new(net, cfg.scheme, cfg.optimizer, cfg.seed)?;
    let cutoff_from = cfg.epochs - cfg.cutoff_epochs();
    let eff = cfg.scheme.effective();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let sliced = epoch <= cutoff_from;
        order.shuffle(&mut tr.rng);
        let mut times = Vec::new();
        let mut agg = EpochMetrics {
            epoch,
            scheme: eff.kind.to_string(),
            p: eff.rate,
            sliced: sliced && eff.kind != crate::slicing::SchemeKind::None,
            step_time_ms: 0.0,
            peak_activation_bytes: 0,
            copy_bytes: 0,
            multiply_ops: 0,
            element_reads: 0,
            element_writes: 0,
            slice_samples: 0,
            train_loss: 0.0,
            train_acc: 0.0,
            test_acc: 0.0,
        };
        let mut loss_sum = 0.0;
        for rows in order.chunks(cfg.batch) {
            let x = batch_tensor::<T>(&data.train, data.dim, rows)?;
            let labels: Vec<usize> = rows.iter().map(|&r| data.train.y[r]).collect();
            let (m, _) = tr.step(&x, &labels, sliced)?;
            if !m.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: m.loss });
            }
            times.push(m.time_ms);
            agg.peak_activation_bytes = agg.peak_activation_bytes.max(m.peak_activation_bytes);
            agg.copy_bytes += m.copy_bytes;
            agg.multiply_ops += m.multiply_ops;
            agg.element_reads += m.element_reads;
            agg.element_writes += m.element_writes;
            agg.slice_samples += m.slice_samples;
            loss_sum += m.loss * rows.len() as f64;
        }
        agg.step_time_ms = median(&mut times);
        agg.train_loss = loss_sum / data.train.len() as f64;
        agg.train_acc = tr.evaluate(&data.train, data.dim)?.1;
        agg.test_acc = if data.test.is_empty() { 0.0 } else { tr.evaluate(&data.test, data.dim)?.1 };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} test {:.4}",
            agg.train_loss,
            agg.train_acc,
            agg.test_acc
        );
        on_epoch(&agg, &tr);
        epochs.push(agg);
    }
    Ok(RunRecord { epochs, params: tr.snapshot() })
}
