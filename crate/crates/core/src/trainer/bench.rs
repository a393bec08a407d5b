use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{median, OptimizerConfig, Precision, Trainer};
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, Placement};
use crate::slicing::{check_rate, Normalization, SchemeKind, SliceScheme};
use crate::tensor::{Element, Tensor};

const WARMUP_STEPS: usize = 3;
const INPUT_DIM: usize = 784;
const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchModel {
    #[default]
    Mlp,
    Resblock,
    Attention,
}

impl std::str::FromStr for BenchModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(BenchModel::Mlp),
            "resblock" => Ok(BenchModel::Resblock),
            "attention" => Ok(BenchModel::Attention),
            other => Err(Error::Usage(format!("unknown model '{other}' (expected mlp, resblock or attention)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub model: BenchModel,
    /// Hidden width (MLP), channel count (resblock) or model width (attention).
    pub width: usize,
    pub batch: usize,
    pub p: f64,
    pub schemes: Vec<SchemeKind>,
    pub trials: usize,
    /// Timed steps per trial.
    pub steps: usize,
    pub precision: Precision,
    pub normalization: Normalization,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(model: BenchModel, width: usize, batch: usize, p: f64) -> Self {
        BenchConfig {
            model,
            width,
            batch,
            p,
            schemes: vec![SchemeKind::Standard, SchemeKind::Controlled, SchemeKind::SliceOut],
            trials: 3,
            steps: 5,
            precision: Precision::F32,
            normalization: Normalization::Flow,
            seed: 0,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let w = self.width;
        match self.model {
            BenchModel::Mlp => ModelSpec::Mlp { hidden: vec![w; 3] },
            BenchModel::Resblock => ModelSpec::Resblock {
                image: [1, 28, 28],
                channels: w,
                blocks: 1,
                placement: Placement::FirstConv,
                delayed: false,
                batch_norm: true,
            },
            BenchModel::Attention => ModelSpec::Attention { tokens: 16, d_model: w, heads: 1, ffn: 2 * w },
        }
    }

    fn validate(&self) -> Result<()> {
        check_rate(self.p)?;
        if self.trials < 3 {
            return Err(Error::Usage(format!("at least 3 trials are required, got {}", self.trials)));
        }
        if self.steps == 0 || self.batch == 0 || self.width == 0 {
            return Err(Error::Usage("steps, batch and width must be positive".into()));
        }
        if (self.width as f64 * (1.0 - self.p)).round() < 1.0 {
            return Err(Error::Rate(self.p));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub scheme: SchemeKind,
    pub median_step_ms: f64,
    pub peak_activation_bytes: u64,
    pub copy_bytes: u64,
    pub multiply_ops: u64,
    /// Percent of the standard-dropout value.
    pub rel_time_pct: f64,
    pub rel_peak_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: BenchModel,
    pub width: usize,
    pub batch: usize,
    pub p: f64,
    pub trials: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, scheme: SchemeKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }
}

/// Median step time and peak activation bytes per scheme, relative to
/// standard dropout (always measured). Trials interleave the schemes.
pub fn bench_compare(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => bench_typed::<f32>(cfg),
        Precision::F64 => bench_typed::<f64>(cfg),
    }
}

struct Arm<T: Element> {
    kind: SchemeKind,
    trainer: Trainer<T>,
    times: Vec<f64>,
    peak: u64,
    copy: u64,
    macs: u64,
}

fn bench_typed<T: Element>(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut kinds = vec![SchemeKind::Standard];
    for &k in &cfg.schemes {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x: Vec<T> = (0..cfg.batch * INPUT_DIM).map(|_| T::from_f64(rng.random::<f64>())).collect();
    let x = Tensor::from_vec(x, &[cfg.batch, INPUT_DIM])?;
    let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..CLASSES)).collect();
    let spec = cfg.model_spec();
    let mut arms = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let scheme = SliceScheme { kind, rate: cfg.p, normalization: cfg.normalization, ..SliceScheme::none() };
        let net = spec.build::<T>(INPUT_DIM, CLASSES, cfg.seed, false)?;
        let opt = OptimizerConfig::Sgd { lr: 1e-3, momentum: 0.9, weight_decay: 0.0 };
        let mut trainer = Trainer::new(net, scheme, opt, cfg.seed)?;
        for _ in 0..WARMUP_STEPS {
            trainer.step(&x, &labels, true)?;
        }
        arms.push(Arm { kind, trainer, times: Vec::new(), peak: 0, copy: 0, macs: 0 });
    }
    for _ in 0..cfg.trials {
        for arm in &mut arms {
            for _ in 0..cfg.steps {
                let (m, _) = arm.trainer.step(&x, &labels, true)?;
                arm.times.push(m.time_ms);
                arm.peak = arm.peak.max(m.peak_activation_bytes);
                arm.copy = arm.copy.max(m.copy_bytes);
                arm.macs = arm.macs.max(m.multiply_ops);
            }
        }
        log::debug!("bench trial done");
    }
    let mut rows: Vec<BenchRow> = arms
        .iter_mut()
        .map(|a| BenchRow {
            scheme: a.kind,
            median_step_ms: median(&mut a.times),
            peak_activation_bytes: a.peak,
            copy_bytes: a.copy,
            multiply_ops: a.macs,
            rel_time_pct: 0.0,
            rel_peak_pct: 0.0,
        })
        .collect();
    let (bt, bp) = (rows[0].median_step_ms, rows[0].peak_activation_bytes as f64);
    for r in &mut rows {
        r.rel_time_pct = 100.0 * r.median_step_ms / bt;
        r.rel_peak_pct = 100.0 * r.peak_activation_bytes as f64 / bp;
    }
    if !cfg.schemes.contains(&SchemeKind::Standard) {
        rows.remove(0);
    }
    Ok(BenchReport { model: cfg.model, width: cfg.width, batch: cfg.batch, p: cfg.p, trials: cfg.trials, rows })
}
