//! Analytic per-layer cost model and CO₂ savings estimates.
//!
//! Counts are exact element counts for one dense layer of `n` inputs and `m`
//! outputs on a batch of `b`. The `(1−p)` factors come from the actual kept
//! widths, so they agree with the instrumentation counters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicing::{check_rate, slice_width, SchemeKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub scheme: SchemeKind,
    pub b: usize,
    pub n: usize,
    pub m: usize,
    pub p: f64,
    /// Kept input and output widths.
    pub w_in: usize,
    pub w_out: usize,
    /// Extra reads/writes spent rearranging weights. Constant (reported as 0)
    /// for slicing.
    pub weight_manipulation_rw: u64,
    pub extra_copy_elements: u64,
    pub multiply_ops: u64,
    pub activation_elements: u64,
}

/// Costs with explicit kept widths.
pub fn table1_costs_for_widths(scheme: SchemeKind, b: usize, n: usize, m: usize, w_in: usize, w_out: usize) -> Result<CostReport> {
    if b == 0 || n == 0 || m == 0 {
        return Err(Error::Size(format!("b, n and m must be positive, got ({b}, {n}, {m})")));
    }
    if w_in == 0 || w_in > n {
        return Err(Error::Width { width: w_in, layer_width: n });
    }
    if w_out == 0 || w_out > m {
        return Err(Error::Width { width: w_out, layer_width: m });
    }
    let (b64, kept) = (b as u64, (w_in * w_out) as u64);
    let (rw, copy, macs, act) = match scheme {
        SchemeKind::None | SchemeKind::Standard => (0, 0, b64 * (n * m) as u64, b64 * m as u64),
        SchemeKind::Controlled => (kept, kept, b64 * kept, b64 * w_out as u64),
        SchemeKind::SliceOut => (0, 0, b64 * kept, b64 * w_out as u64),
    };
    Ok(CostReport {
        scheme,
        b,
        n,
        m,
        p: 0.0,
        w_in,
        w_out,
        weight_manipulation_rw: rw,
        extra_copy_elements: copy,
        multiply_ops: macs,
        activation_elements: act,
    })
}

/// Costs of one dense layer under `scheme` at rate `p`, with both sides
/// dropped.
pub fn table1_costs(scheme: SchemeKind, b: usize, n: usize, m: usize, p: f64) -> Result<CostReport> {
    check_rate(p)?;
    // any scheme at rate 0 runs the plain layer
    let run = if p == 0.0 { SchemeKind::None } else { scheme };
    let (w_in, w_out) = match run {
        SchemeKind::Controlled | SchemeKind::SliceOut => (slice_width(n, p)?, slice_width(m, p)?),
        _ => (n, m),
    };
    let mut r = table1_costs_for_widths(run, b, n, m, w_in, w_out)?;
    r.scheme = scheme;
    r.p = p;
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Co2Mode {
    /// The memory gain lets the job run on fewer machines of a pool.
    FewerMachines,
    /// Same machines, batch grown until memory matches; saving is the
    /// measured speedup at that batch.
    BiggerBatch,
    /// Same hardware and hyperparameters.
    PlainSpeedup,
}

impl FromStr for Co2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewer-machines" => Ok(Co2Mode::FewerMachines),
            "bigger-batch" => Ok(Co2Mode::BiggerBatch),
            "plain-speedup" => Ok(Co2Mode::PlainSpeedup),
            other => Err(Error::Usage(format!(
                "unknown CO2 mode '{other}' (expected fewer-machines, bigger-batch or plain-speedup)"
            ))),
        }
    }
}

impl fmt::Display for Co2Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Co2Mode::FewerMachines => "fewer-machines",
            Co2Mode::BiggerBatch => "bigger-batch",
            Co2Mode::PlainSpeedup => "plain-speedup",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Co2Inputs {
    /// Fractional reduction in training time.
    pub speedup: f64,
    /// Fractional reduction in memory.
    pub memory_gain: f64,
    /// Machines used by the baseline.
    pub pool: usize,
    /// Fraction of each baseline machine's memory left unused.
    pub headroom: f64,
}

impl Default for Co2Inputs {
    fn default() -> Self {
        Co2Inputs { speedup: 0.0, memory_gain: 0.0, pool: 4, headroom: 0.05 }
    }
}

/// Machines needed once memory per job shrinks by `memory_gain`.
pub fn machines_needed(pool: usize, memory_gain: f64, headroom: f64) -> usize {
    let demand = pool as f64 * (1.0 - headroom) * (1.0 - memory_gain);
    (demand - 1e-9).ceil().max(1.0) as usize
}

/// Fractional emissions saving; emissions are taken as proportional to
/// machine-hours.
pub fn co2_savings(mode: Co2Mode, inputs: &Co2Inputs) -> Result<f64> {
    for (name, v) in [("speedup", inputs.speedup), ("memory gain", inputs.memory_gain), ("headroom", inputs.headroom)] {
        if !(v.is_finite() && (0.0..1.0).contains(&v)) {
            return Err(Error::Usage(format!("{name} {v} outside [0, 1)")));
        }
    }
    match mode {
        Co2Mode::FewerMachines => {
            if inputs.pool == 0 {
                return Err(Error::Usage("machine pool must be positive".into()));
            }
            let need = machines_needed(inputs.pool, inputs.memory_gain, inputs.headroom);
            Ok((inputs.pool - need) as f64 / inputs.pool as f64)
        }
        Co2Mode::BiggerBatch | Co2Mode::PlainSpeedup => Ok(inputs.speedup),
    }
}
