//! Exhaustive-enumeration and finite-difference checks of the slicing
//! mathematics, the backward passes and the cost counters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::costmodel::table1_costs;
use crate::error::{Error, Result};
use crate::nn::{
    architecture_count, attention_sliceout, enumerate_distinct_masks, AttentionSliceConfig, ChannelSlices,
    DenseSliceLayer, Keep, Mode, Normalizer, ResidualBlock, ResidualBlockConfig,
};
use crate::slicing::{
    build_keep_profile, eligible_starts, flow_norm_factor, normalization_factors, sample_kept_units, sample_slice,
    slice_width, Normalization, SchemeKind, SliceSpec,
};
use crate::tensor::{counters, grad_check_params, Element, Graph, ParamStore, Tensor};

/// Largest number of slice combinations a moment check will enumerate.
pub const MAX_ENUMERATION: u64 = 250_000;
pub const MAX_MOMENT_WIDTH: usize = 64;
/// Relative tolerance for middle-band second moments.
pub const SECOND_MOMENT_TOL: f64 = 0.05;
pub const FIRST_MOMENT_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MomentCheckResult {
    pub first_moment_max_abs_dev: f64,
    /// Over pairs of final-layer units that are always kept.
    pub second_moment_band_max_rel_dev: Option<f64>,
    /// Over the remaining pairs; reported, not asserted.
    pub second_moment_edge_max_rel_dev: Option<f64>,
    /// `‖E − F‖ / ‖F‖` over the band pairs, robust to products near zero.
    pub second_moment_band_fro_rel_dev: Option<f64>,
    pub slice_count: u64,
    /// `max |Σⱼ P(j)·m/w − m|` over layers, for flow normalization.
    pub flow_conservation_error: Option<f64>,
}

/// A stack of dense layers whose outputs are each sliced to a fixed width,
/// with optional ReLUs between layers. Layer `i + 1` reads exactly the
/// units layer `i` kept.
#[derive(Clone, Debug)]
pub struct MomentNet {
    pub dims: Vec<usize>,
    pub widths: Vec<usize>,
    pub relu: bool,
    store: ParamStore<f64>,
    layers: Vec<DenseSliceLayer>,
}

impl MomentNet {
    pub fn random(dims: &[usize], widths: &[usize], relu: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for d in dims.windows(2) {
            let w: Vec<f64> = (0..d[0] * d[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
            weights.push(Tensor::from_vec(w, &[d[1], d[0]])?);
            biases.push((0..d[1]).map(|_| rng.random_range(-0.5..0.5)).collect());
        }
        Self::from_weights(weights, biases, widths, relu)
    }

    /// `weights[i]` is `[out, in]`.
    pub fn from_weights(weights: Vec<Tensor<f64>>, biases: Vec<Vec<f64>>, widths: &[usize], relu: bool) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() || weights.len() != widths.len() {
            return Err(Error::Config("one weight, bias and width per layer is required".into()));
        }
        let mut dims = vec![weights[0].shape()[1]];
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            let (m, n) = (w.shape()[0], w.shape()[1]);
            if n != dims[i] || b.len() != m {
                return Err(Error::Shape(format!("layer {i}: weight [{m}, {n}] after width {}", dims[i])));
            }
            if widths[i] == 0 || widths[i] > m {
                return Err(Error::Width { width: widths[i], layer_width: m });
            }
            if m > MAX_MOMENT_WIDTH || n > MAX_MOMENT_WIDTH {
                return Err(Error::Size(format!("layer {i} is wider than {MAX_MOMENT_WIDTH}")));
            }
            let wid = store.add(format!("l{i}.weight"), w);
            let bid = store.add(format!("l{i}.bias"), Tensor::from_vec(b, &[m])?);
            layers.push(DenseSliceLayer { w: wid, b: Some(bid), m_in: n, m_out: m });
            dims.push(m);
        }
        Ok(MomentNet { dims, widths: widths.to_vec(), relu, store, layers })
    }

    pub fn slice_count(&self) -> u64 {
        self.dims[1..].iter().zip(&self.widths).map(|(&m, &w)| (m - w + 1) as u64).product()
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Output padded to full width. `specs: None` runs the full network.
    /// `fault` negates the first normalization factor of every layer.
    pub fn forward(&self, x: &[f64], specs: Option<&[SliceSpec]>, norm: Normalization, fault: bool) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut h = g.input(Tensor::from_vec(x.to_vec(), &[1, x.len()])?);
        let mut prev = Keep::All;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (keep, normalizer) = match specs {
                None => (Keep::All, Normalizer::None),
                Some(s) => {
                    let mut f = normalization_factors(norm, &s[i])?;
                    if fault {
                        f[0] = -f[0];
                    }
                    (Keep::Slice(s[i]), Normalizer::Factors(f))
                }
            };
            h = layer.forward(&mut g, &self.store, h, &prev, &keep, &normalizer)?;
            if self.relu && i < last {
                h = g.relu(h);
            }
            prev = keep;
        }
        let out = g.value(h).to_vec();
        let m = self.output_dim();
        let mut padded = vec![0.0; m];
        let start = prev.spec().map_or(0, |s| s.start);
        padded[start..start + out.len()].copy_from_slice(&out);
        Ok(padded)
    }

    /// Every combination of eligible slice starts, one spec per layer.
    pub fn all_specs(&self) -> Result<Vec<Vec<SliceSpec>>> {
        let count = self.slice_count();
        if count > MAX_ENUMERATION {
            return Err(Error::Size(format!("{count} slice combinations exceed the limit of {MAX_ENUMERATION}")));
        }
        let mut out: Vec<Vec<SliceSpec>> = vec![vec![]];
        for (&m, &w) in self.dims[1..].iter().zip(&self.widths) {
            let starts: Vec<usize> = eligible_starts(m, w)?.collect();
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    starts.iter().map(move |&s| {
                        let mut v = prefix.clone();
                        v.push(SliceSpec { layer_width: m, width: w, start: s });
                        v
                    })
                })
                .collect();
        }
        Ok(out)
    }
}

/// Averages the padded, normalized outputs over every slice combination and
/// compares with the full forward pass.
pub fn check_first_moment(net: &MomentNet, x: &[f64], norm: Normalization, fault: bool) -> Result<MomentCheckResult> {
    let specs = net.all_specs()?;
    let m = net.output_dim();
    let mut mean = vec![0.0; m];
    for s in &specs {
        for (a, v) in mean.iter_mut().zip(net.forward(x, Some(s), norm, fault)?) {
            *a += v;
        }
    }
    let full = net.forward(x, None, norm, false)?;
    let n = specs.len() as f64;
    let dev = mean.iter().zip(&full).map(|(a, f)| (a / n - f).abs()).fold(0.0, f64::max);
    if !dev.is_finite() {
        return Err(Error::Numeric("non-finite first moment".into()));
    }
    let flow = match norm {
        Normalization::Flow => {
            let mut err: f64 = 0.0;
            for (&m, &w) in net.dims[1..].iter().zip(&net.widths) {
                let p = build_keep_profile(m, w)?;
                let total: f64 = p.probs.iter().map(|pj| pj * flow_norm_factor(m, w)).sum();
                err = err.max((total - m as f64).abs());
            }
            Some(err)
        }
        Normalization::Probabilistic => None,
    };
    Ok(MomentCheckResult {
        first_moment_max_abs_dev: dev,
        slice_count: specs.len() as u64,
        flow_conservation_error: flow,
        ..MomentCheckResult::default()
    })
}

/// Enumerated `E[S(y_j1)·S(y_j2)]` against the full network's `y_j1·y_j2`
/// under probabilistic normalization. Pairs inside the final layer's
/// always-kept band are compared against [`SECOND_MOMENT_TOL`]; the rest are
/// only reported.
pub fn check_second_moment(net: &MomentNet, x: &[f64]) -> Result<MomentCheckResult> {
    let m = net.output_dim();
    let w = *net.widths.last().unwrap();
    for (&mi, &wi) in net.dims[1..].iter().zip(&net.widths) {
        if 2 * wi < mi {
            return Err(Error::Usage(format!("width {wi} of {mi} corresponds to a rate above 0.5")));
        }
    }
    let specs = net.all_specs()?;
    let mut second = vec![0.0; m * m];
    for s in &specs {
        let y = net.forward(x, Some(s), Normalization::Probabilistic, false)?;
        for a in 0..m {
            for b in 0..m {
                second[a * m + b] += y[a] * y[b];
            }
        }
    }
    let full = net.forward(x, None, Normalization::Probabilistic, false)?;
    let n = specs.len() as f64;
    let band = (m - w)..w;
    let (mut inner, mut edge) = (None::<f64>, None::<f64>);
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for a in 0..m {
        for b in 0..m {
            let want = full[a] * full[b];
            let got = second[a * m + b] / n;
            let rel = (got - want).abs() / want.abs().max(1e-12);
            let in_band = band.contains(&a) && band.contains(&b);
            if in_band {
                diff2 += (got - want).powi(2);
                norm2 += want * want;
            }
            let slot = if in_band { &mut inner } else { &mut edge };
            *slot = Some(slot.map_or(rel, |v| v.max(rel)));
        }
    }
    let fro = inner.map(|_| diff2.sqrt() / norm2.sqrt().max(1e-300));
    Ok(MomentCheckResult {
        first_moment_max_abs_dev: 0.0,
        second_moment_band_max_rel_dev: inner,
        second_moment_edge_max_rel_dev: edge,
        second_moment_band_fro_rel_dev: fro,
        slice_count: specs.len() as u64,
        flow_conservation_error: None,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradReport {
    pub dense_unsliced: f64,
    pub dense_sliced: f64,
    pub residual_channel: f64,
    pub attention: f64,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        [self.dense_unsliced, self.dense_sliced, self.residual_channel, self.attention].into_iter().fold(0.0, f64::max)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Finite-difference check of a dense layer `n → m` with the given keeps
/// under cross-entropy.
pub fn grad_check_dense(n: usize, m: usize, input: Keep, output: Keep, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = DenseSliceLayer::new(&mut store, "fc", n, m, true, &mut rng);
    let batch = 3;
    let x = random_tensor(&mut rng, &[batch, input.width(n)]);
    let classes = output.width(m);
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let norm = match &output {
        Keep::Slice(_) => Normalizer::Probabilistic,
        _ => Normalizer::None,
    };
    grad_check_params(
        |g, s| {
            let xv = g.input(x.clone());
            let y = layer.forward(g, s, xv, &input, &output, &norm)?;
            g.cross_entropy(y, &labels)
        },
        &store,
        1e-5,
    )
}

/// Finite-difference check of a residual block whose conv1 outputs, batch
/// norm and conv2 inputs share a channel slice.
pub fn grad_check_residual(channels: usize, keep: Keep, delayed: bool, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = ResidualBlockConfig { delayed_normalization: delayed, ..ResidualBlockConfig::new(channels) };
    let block = ResidualBlock::new(&mut store, "block", cfg, &mut rng);
    let x = random_tensor(&mut rng, &[2, channels, 4, 4]);
    let probe = random_tensor(&mut rng, &[2, channels, 4, 4]);
    let factors = keep.spec().map(|s| normalization_factors(Normalization::Probabilistic, s)).transpose()?;
    let slices = ChannelSlices::shared(keep);
    grad_check_params(
        |g, s| {
            let mut b = block.clone();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let xv = g.input(x.clone());
            let y = b.forward_channels(g, s, xv, &slices, factors.as_deref(), None, Mode::Train, &mut r)?;
            let pv = g.input(probe.clone());
            let prod = g.mul(y, pv)?;
            Ok(g.sum(prod))
        },
        &store,
        1e-5,
    )
}

/// Finite-difference check of single-head attention over `t` positions of
/// width `d`, with query/key and value features sliced to `d_sliced`.
pub fn grad_check_attention(t: usize, d: usize, d_sliced: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let wq = DenseSliceLayer::new(&mut store, "q", d, d, true, &mut rng);
    // a key bias shifts every score of a row equally, so its gradient is
    // identically zero and the relative error would compare noise to noise
    let wk = DenseSliceLayer::new(&mut store, "k", d, d, false, &mut rng);
    let wv = DenseSliceLayer::new(&mut store, "v", d, d, true, &mut rng);
    let x = random_tensor(&mut rng, &[t, d]);
    let qk = sample_slice(&mut rng, d, d_sliced)?;
    let vs = sample_slice(&mut rng, d, d_sliced)?;
    let cfg = AttentionSliceConfig {
        d,
        heads: 1,
        q: Keep::Slice(qk),
        k: Keep::Slice(qk),
        v: Keep::Slice(vs),
        v_factors: Some(normalization_factors(Normalization::Probabilistic, &vs)?),
        mode: Mode::Train,
    };
    let probe = random_tensor(&mut rng, &[t, d_sliced]);
    grad_check_params(
        |g, s| {
            let xv = g.input(x.clone());
            let q = wq.forward(g, s, xv, &Keep::All, &Keep::All, &Normalizer::None)?;
            let k = wk.forward(g, s, xv, &Keep::All, &Keep::All, &Normalizer::None)?;
            let v = wv.forward(g, s, xv, &Keep::All, &Keep::All, &Normalizer::None)?;
            let out = attention_sliceout(g, q, k, v, &cfg)?.out;
            let pv = g.input(probe.clone());
            let prod = g.mul(out, pv)?;
            Ok(g.sum(prod))
        },
        &store,
        1e-5,
    )
}

/// Gradient checks through every sliced layer type.
pub fn check_gradients(seed: u64) -> Result<GradReport> {
    let spec = |m, w, s| Keep::Slice(SliceSpec { layer_width: m, width: w, start: s });
    Ok(GradReport {
        dense_unsliced: grad_check_dense(4, 4, Keep::All, Keep::All, seed)?,
        dense_sliced: grad_check_dense(4, 4, spec(4, 2, 1), spec(4, 2, 2), seed)?,
        residual_channel: grad_check_residual(4, spec(4, 2, 1), false, seed)?
            .max(grad_check_residual(4, spec(4, 3, 0), true, seed)?),
        attention: grad_check_attention(2, 4, 2, seed)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountCheck {
    pub name: String,
    pub expected: u64,
    pub observed: u64,
    pub passed: bool,
}

impl CountCheck {
    fn new(name: String, expected: u64, observed: u64) -> Self {
        CountCheck { name, expected, observed, passed: expected == observed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountsConfig {
    /// `(b, n, m, p)` dense-layer cases.
    pub layers: Vec<(usize, usize, usize, f64)>,
    /// `(n, w1, m, w2)` mask-enumeration cases.
    pub masks: Vec<(usize, Option<usize>, usize, Option<usize>)>,
    pub seed: u64,
}

impl Default for CountsConfig {
    fn default() -> Self {
        CountsConfig {
            layers: vec![(128, 1024, 1024, 0.5), (4, 10, 8, 0.4), (16, 64, 32, 0.3)],
            masks: vec![
                (10, None, 10, Some(6)),
                (10, Some(6), 8, Some(4)),
                (12, Some(5), 9, None),
                (7, Some(7), 5, Some(5)),
            ],
            seed: 0,
        }
    }
}

/// Counters of one instrumented forward pass of a dense layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerCounts {
    pub multiply_ops: u64,
    pub copy_elements: u64,
    pub activation_elements: u64,
}

/// Runs one bias-free dense layer `n → m` under `scheme` at rate `p` in
/// 32-bit and reports what the counters saw.
pub fn instrumented_layer(scheme: SchemeKind, b: usize, n: usize, m: usize, p: f64, seed: u64) -> Result<LayerCounts> {
    type T = f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::new();
    let layer = DenseSliceLayer::new(&mut store, "fc", n, m, false, &mut rng);
    let active = p > 0.0 && matches!(scheme, SchemeKind::Controlled | SchemeKind::SliceOut);
    let (input, output) = if active {
        let (wi, wo) = (slice_width(n, p)?, slice_width(m, p)?);
        if scheme == SchemeKind::SliceOut {
            (Keep::Slice(sample_slice(&mut rng, n, wi)?), Keep::Slice(sample_slice(&mut rng, m, wo)?))
        } else {
            (Keep::Units(sample_kept_units(&mut rng, n, wi)?), Keep::Units(sample_kept_units(&mut rng, m, wo)?))
        }
    } else {
        (Keep::All, Keep::All)
    };
    let norm = if active { Normalizer::Flow } else { Normalizer::None };
    let x = Tensor::<T>::full(&[b, input.width(n)], 0.5);
    let mut g = Graph::new();
    let xv = g.input(x);
    counters::reset();
    let before = counters::snapshot();
    layer.forward(&mut g, &store, xv, &input, &output, &norm)?;
    let after = counters::snapshot();
    let bytes = T::BYTES as u64;
    Ok(LayerCounts {
        multiply_ops: after.multiply_ops - before.multiply_ops,
        copy_elements: (after.copy_bytes_allocated - before.copy_bytes_allocated) / bytes,
        activation_elements: (after.live_activation_bytes - before.live_activation_bytes) / bytes,
    })
}

/// Compares instrumented layer counts with the cost model, and enumerated
/// mask counts with [`architecture_count`].
pub fn check_counts(cfg: &CountsConfig) -> Result<Vec<CountCheck>> {
    let mut out = Vec::new();
    for &(b, n, m, p) in &cfg.layers {
        for scheme in [SchemeKind::Standard, SchemeKind::Controlled, SchemeKind::SliceOut] {
            let want = table1_costs(scheme, b, n, m, p)?;
            let got = instrumented_layer(scheme, b, n, m, p, cfg.seed)?;
            let tag = format!("{scheme} b={b} n={n} m={m} p={p}");
            out.push(CountCheck::new(format!("{tag} multiplies"), want.multiply_ops, got.multiply_ops));
            out.push(CountCheck::new(format!("{tag} copied elements"), want.extra_copy_elements, got.copy_elements));
            out.push(CountCheck::new(format!("{tag} activations"), want.activation_elements, got.activation_elements));
        }
    }
    for &(n, w1, m, w2) in &cfg.masks {
        let want = architecture_count(w1.map(|w| (n, w)), w2.map(|w| (m, w)))?;
        let got = enumerate_distinct_masks(n, w1, m, w2)? as u64;
        out.push(CountCheck::new(format!("architectures n={n} w1={w1:?} m={m} w2={w2:?}"), want, got));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Moments,
    Grads,
    Counts,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moments" => Ok(Suite::Moments),
            "grads" => Ok(Suite::Grads),
            "counts" => Ok(Suite::Counts),
            "all" => Ok(Suite::All),
            other => Err(Error::Usage(format!("unknown suite '{other}' (expected moments, grads, counts or all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// `None` for report-only measurements.
    pub passed: Option<bool>,
    pub detail: String,
}

impl CheckOutcome {
    fn assert(name: impl Into<String>, passed: bool, detail: String) -> Self {
        CheckOutcome { name: name.into(), passed: Some(passed), detail }
    }

    fn report(name: impl Into<String>, detail: String) -> Self {
        CheckOutcome { name: name.into(), passed: None, detail }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed != Some(false))
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| c.passed == Some(false)).count()
    }
}

/// Random moment configurations: one or two sliced layers, widths up to
/// 32, rates drawn from {0.1, …, 0.5}.
pub fn random_moment_configs(count: usize, seed: u64) -> Result<Vec<(MomentNet, Vec<f64>)>> {
    const RATES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let layers = 1 + i % 2;
        let mut dims = vec![rng.random_range(2..=32usize)];
        let mut widths = Vec::new();
        for _ in 0..layers {
            let m = rng.random_range(2..=32usize);
            let p = RATES[rng.random_range(0..RATES.len())];
            dims.push(m);
            widths.push(slice_width(m, p)?);
        }
        let net = MomentNet::random(&dims, &widths, rng.random_bool(0.5), rng.random())?;
        let x = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        out.push((net, x));
    }
    Ok(out)
}

fn moments_suite(fault: bool, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let net = MomentNet::from_weights(vec![Tensor::from_vec(eye, &[4, 4])?], vec![vec![0.0; 4]], &[2], false)?;
    let r = check_first_moment(&net, &[1.0; 4], Normalization::Probabilistic, fault)?;
    out.push(CheckOutcome::assert(
        "first moment, identity 4x4, w=2, probabilistic",
        r.first_moment_max_abs_dev < FIRST_MOMENT_TOL,
        format!("deviation {:.3e} over {} slices", r.first_moment_max_abs_dev, r.slice_count),
    ));
    for (i, (net, x)) in random_moment_configs(20, seed)?.iter().enumerate() {
        let r = check_first_moment(net, x, Normalization::Probabilistic, fault)?;
        out.push(CheckOutcome::assert(
            format!("first moment, random config {i} dims {:?} widths {:?}", net.dims, net.widths),
            r.first_moment_max_abs_dev < FIRST_MOMENT_TOL && r.slice_count == net.slice_count(),
            format!("deviation {:.3e} over {} slices", r.first_moment_max_abs_dev, r.slice_count),
        ));
    }
    let net = MomentNet::random(&[8, 10], &[6], false, seed)?;
    let x: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 1.0).collect();
    let r = check_first_moment(&net, &x, Normalization::Flow, fault)?;
    out.push(CheckOutcome::report(
        "first moment, 8->10, w=6, flow",
        format!("deviation {:.3e}", r.first_moment_max_abs_dev),
    ));
    let cons = r.flow_conservation_error.unwrap_or(f64::NAN);
    out.push(CheckOutcome::assert(
        "flow normalization conserves expected throughput",
        cons < FIRST_MOMENT_TOL,
        format!("|sum P(j) m/w - m| = {cons:.3e}"),
    ));
    let w = slice_width(16, 0.4)?;
    let net = MomentNet::random(&[12, 16], &[w], false, seed)?;
    let x: Vec<f64> = (0..12).map(|i| (0.7 * i as f64).cos()).collect();
    let r = check_second_moment(&net, &x)?;
    let band = r.second_moment_band_max_rel_dev.unwrap_or(f64::NAN);
    out.push(CheckOutcome::assert(
        format!("second moment, 12->16, w={w}, middle band"),
        band < SECOND_MOMENT_TOL,
        format!("relative deviation {band:.3e}"),
    ));
    out.push(CheckOutcome::report(
        format!("second moment, 12->16, w={w}, edge pairs"),
        format!("relative deviation {:.3e}", r.second_moment_edge_max_rel_dev.unwrap_or(f64::NAN)),
    ));
    let net = MomentNet::random(&[12, 16, 16], &[w, w], false, seed)?;
    let r = check_second_moment(&net, &x)?;
    out.push(CheckOutcome::report(
        format!("second moment, 12->16->16, both w={w}, middle band"),
        format!(
            "max pairwise relative deviation {:.3e}, Frobenius relative deviation {:.3e}",
            r.second_moment_band_max_rel_dev.unwrap_or(f64::NAN),
            r.second_moment_band_fro_rel_dev.unwrap_or(f64::NAN)
        ),
    ));
    Ok(out)
}

fn grads_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let r = check_gradients(seed)?;
    Ok(vec![
        CheckOutcome::assert("gradient, unsliced dense", r.dense_unsliced < 1e-6, format!("{:.3e}", r.dense_unsliced)),
        CheckOutcome::assert("gradient, sliced dense", r.dense_sliced < 1e-6, format!("{:.3e}", r.dense_sliced)),
        CheckOutcome::assert(
            "gradient, channel-sliced residual block",
            r.residual_channel < GRAD_TOL,
            format!("{:.3e}", r.residual_channel),
        ),
        CheckOutcome::assert("gradient, sliced attention", r.attention < GRAD_TOL, format!("{:.3e}", r.attention)),
    ])
}

/// Runs a verification suite. `fault` negates one normalization factor in
/// the moment checks, which must then fail.
pub fn run_suite(suite: Suite, fault: bool, seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Moments | Suite::All) {
        checks.extend(moments_suite(fault, seed)?);
    }
    if matches!(suite, Suite::Grads | Suite::All) {
        checks.extend(grads_suite(seed)?);
    }
    if matches!(suite, Suite::Counts | Suite::All) {
        for c in check_counts(&CountsConfig { seed, ..CountsConfig::default() })? {
            checks.push(CheckOutcome::assert(c.name, c.passed, format!("expected {}, observed {}", c.expected, c.observed)));
        }
    }
    Ok(SuiteReport { checks })
}
