//! Dropout schemes: slice sizing and sampling, keep profiles, normalizers,
//! standard (Bernoulli) dropout and gather-based controlled dropout.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn check_rate(p: f64) -> Result<()> {
    if p.is_finite() && (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Rate(p))
    }
}

/// Number of units kept out of `m` at rate `p`: `max(1, round(m·(1−p)))`,
/// rounding halves away from zero.
pub fn slice_width(m: usize, p: f64) -> Result<usize> {
    check_rate(p)?;
    if m == 0 {
        return Err(Error::Width { width: 0, layer_width: 0 });
    }
    Ok(((m as f64 * (1.0 - p)).round() as usize).clamp(1, m))
}

/// Rates at or above this, or slices narrower than [`NARROW_SLICE`] units
/// on a wider layer, are logged as extreme.
pub const EXTREME_RATE: f64 = 0.8;
pub const NARROW_SLICE: usize = 2;

/// [`slice_width`], logging a warning when the setting is extreme.
pub fn planned_width(m: usize, p: f64) -> Result<usize> {
    let w = slice_width(m, p)?;
    if p > 0.0 && (p >= EXTREME_RATE || (w <= NARROW_SLICE && m > w)) {
        log::warn!("extreme slicing: rate {p} keeps {w} of {m} units");
    }
    Ok(w)
}

/// Start positions `s` with `s + w <= m`.
pub fn eligible_starts(m: usize, w: usize) -> Result<RangeInclusive<usize>> {
    if w == 0 || w > m {
        return Err(Error::Width { width: w, layer_width: m });
    }
    Ok(0..=m - w)
}

/// A contiguous keep-range `[start, start + width)` of a layer of `layer_width` units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceSpec {
    pub layer_width: usize,
    pub width: usize,
    pub start: usize,
}

impl SliceSpec {
    pub fn new(layer_width: usize, width: usize, start: usize) -> Result<Self> {
        eligible_starts(layer_width, width)?;
        if start + width > layer_width {
            return Err(Error::Bounds { start, width, len: layer_width });
        }
        Ok(SliceSpec { layer_width, width, start })
    }

    /// The whole layer.
    pub fn full(m: usize) -> Self {
        SliceSpec { layer_width: m, width: m, start: 0 }
    }

    pub fn end(&self) -> usize {
        self.start + self.width
    }

    pub fn is_full(&self) -> bool {
        self.width == self.layer_width
    }

    pub fn contains(&self, j: usize) -> bool {
        (self.start..self.end()).contains(&j)
    }
}

/// Draws a start uniformly from `eligible_starts(m, w)`.
pub fn sample_slice<R: Rng + ?Sized>(rng: &mut R, m: usize, w: usize) -> Result<SliceSpec> {
    let starts = eligible_starts(m, w)?;
    let start = rng.random_range(starts);
    Ok(SliceSpec { layer_width: m, width: w, start })
}

/// Seeded slice sampler; equal seeds give equal sequences.
#[derive(Clone, Debug)]
pub struct SliceSampler {
    rng: ChaCha8Rng,
}

impl SliceSampler {
    pub fn new(seed: u64) -> Self {
        SliceSampler { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self, m: usize, w: usize) -> Result<SliceSpec> {
        sample_slice(&mut self.rng, m, w)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Probability that unit `j` falls inside a uniformly sampled slice.
pub fn keep_probability(j: usize, m: usize, w: usize) -> Result<f64> {
    let starts = eligible_starts(m, w)?;
    if j >= m {
        return Err(Error::Index(format!("unit {j} outside layer of width {m}")));
    }
    let hi = j.min(m - w);
    let lo = (j + 1).saturating_sub(w);
    Ok((hi - lo + 1) as f64 / (starts.end() + 1) as f64)
}

/// Per-unit keep probabilities for a layer and their reciprocals.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepProfile {
    pub m: usize,
    pub w: usize,
    pub probs: Vec<f64>,
    pub reciprocals: Vec<f64>,
}

impl KeepProfile {
    /// Units `[m−w, w−1]` that every slice covers (empty when `w < m/2`).
    pub fn full_band(&self) -> std::ops::Range<usize> {
        let lo = self.m - self.w;
        let hi = self.w;
        if lo < hi {
            lo..hi
        } else {
            0..0
        }
    }
}

pub fn build_keep_profile(m: usize, w: usize) -> Result<KeepProfile> {
    let probs = (0..m).map(|j| keep_probability(j, m, w)).collect::<Result<Vec<_>>>()?;
    let reciprocals = probs.iter().map(|p| 1.0 / p).collect();
    let profile = KeepProfile { m, w, probs, reciprocals };
    debug_assert!((profile.probs.iter().sum::<f64>() - w as f64).abs() < 1e-9 * w as f64);
    Ok(profile)
}

/// Flow normalization: kept activations are multiplied by `m / w`.
pub fn flow_norm_factor(m: usize, w: usize) -> f64 {
    m as f64 / w as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    #[default]
    None,
    Standard,
    Controlled,
    SliceOut,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Flow,
    Probabilistic,
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(SchemeKind::None),
            "standard" => Ok(SchemeKind::Standard),
            "controlled" => Ok(SchemeKind::Controlled),
            "sliceout" => Ok(SchemeKind::SliceOut),
            other => Err(Error::Usage(format!(
                "unknown scheme '{other}' (expected none, standard, controlled or sliceout)"
            ))),
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::None => "none",
            SchemeKind::Standard => "standard",
            SchemeKind::Controlled => "controlled",
            SchemeKind::SliceOut => "sliceout",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flow" => Ok(Normalization::Flow),
            "probabilistic" => Ok(Normalization::Probabilistic),
            other => Err(Error::Usage(format!(
                "unknown normalization '{other}' (expected flow or probabilistic)"
            ))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Flow => "flow",
            Normalization::Probabilistic => "probabilistic",
        })
    }
}

/// Which dropout scheme to apply, at what rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceScheme {
    pub kind: SchemeKind,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub delayed: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SliceScheme {
    fn default() -> Self {
        SliceScheme::none()
    }
}

impl SliceScheme {
    pub fn none() -> Self {
        SliceScheme {
            kind: SchemeKind::None,
            rate: 0.0,
            normalization: Normalization::Flow,
            delayed: false,
            seed: 0,
        }
    }

    pub fn new(kind: SchemeKind, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(SliceScheme { kind, rate, ..SliceScheme::none() })
    }

    pub fn sliceout(rate: f64, normalization: Normalization) -> Result<Self> {
        check_rate(rate)?;
        Ok(SliceScheme { kind: SchemeKind::SliceOut, rate, normalization, ..SliceScheme::none() })
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if self.kind != SchemeKind::SliceOut && self.delayed {
            return Err(Error::Config("'delayed' only applies to the sliceout scheme".into()));
        }
        Ok(())
    }

    /// The scheme actually run: any kind at rate 0 is plain `none`.
    pub fn effective(&self) -> SliceScheme {
        if self.rate == 0.0 || self.kind == SchemeKind::None {
            SliceScheme { seed: self.seed, ..SliceScheme::none() }
        } else {
            *self
        }
    }

    pub fn is_active(&self) -> bool {
        self.effective().kind != SchemeKind::None
    }
}

/// Per-unit factors for the kept units of `spec` under `norm`, indexed by
/// local offset (global unit `spec.start + i`).
pub fn normalization_factors(norm: Normalization, spec: &SliceSpec) -> Result<Vec<f64>> {
    let (m, w) = (spec.layer_width, spec.width);
    Ok(match norm {
        Normalization::Flow => vec![flow_norm_factor(m, w); w],
        Normalization::Probabilistic => {
            let profile = build_keep_profile(m, w)?;
            profile.reciprocals[spec.start..spec.end()].to_vec()
        }
    })
}

/// Inverted-dropout mask: each entry is `1/(1−p)` with probability `1−p`,
/// otherwise 0.
pub fn dropout_mask<T: Element, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<T>> {
    check_rate(p)?;
    let keep = 1.0 - p;
    let scale = T::from_f64(1.0 / keep);
    Ok((0..n)
        .map(|_| if p == 0.0 || rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect())
}

/// Standard dropout of every element of `x`. The output keeps the input's
/// shape; dropped entries are zeros in memory.
pub fn apply_standard_dropout<T: Element, R: Rng + ?Sized>(x: &Tensor<T>, p: f64, rng: &mut R) -> Result<Tensor<T>> {
    let mask = dropout_mask::<T, R>(x.numel(), p, rng)?;
    apply_dropout_mask(x, &mask)
}

pub fn apply_dropout_mask<T: Element>(x: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    if mask.len() != x.numel() {
        return Err(Error::Shape(format!("mask of {} for shape {:?}", mask.len(), x.shape())));
    }
    let d: Vec<T> = x.to_vec().into_iter().zip(mask).map(|(a, &m)| a * m).collect();
    Tensor::from_vec(d, x.shape())
}

/// Copies the selected rows and columns of `w` into a new buffer.
pub fn controlled_gather<T: Element>(w: &Tensor<T>, keep_rows: &[usize], keep_cols: &[usize]) -> Result<Tensor<T>> {
    w.gather2d(Some(keep_rows), Some(keep_cols))
}

/// `w` distinct units out of `m`, uniformly at random, sorted.
pub fn sample_kept_units<R: Rng + ?Sized>(rng: &mut R, m: usize, w: usize) -> Result<Vec<usize>> {
    eligible_starts(m, w)?;
    let mut idx = rand::seq::index::sample(rng, m, w).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// 0/1 mask with ones exactly on the slice.
pub fn sliceout_mask_equivalent(m: usize, spec: &SliceSpec) -> Vec<u8> {
    (0..m).map(|j| u8::from(spec.contains(j))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths() {
        assert_eq!(slice_width(10, 0.4).unwrap(), 6);
        assert_eq!(slice_width(10, 0.0).unwrap(), 10);
        assert_eq!(slice_width(2048, 0.5).unwrap(), 1024);
        assert_eq!(slice_width(5, 0.5).unwrap(), 3);
        assert_eq!(slice_width(3, 0.99).unwrap(), 1);
        assert!(matches!(slice_width(10, 1.0), Err(Error::Rate(_))));
        assert!(matches!(slice_width(10, -0.1), Err(Error::Rate(_))));
    }

    #[test]
    fn starts() {
        assert_eq!(eligible_starts(10, 6).unwrap(), 0..=4);
        assert_eq!(eligible_starts(7, 7).unwrap(), 0..=0);
        assert_eq!(eligible_starts(7, 3).unwrap().count(), 5);
        assert!(matches!(eligible_starts(3, 4), Err(Error::Width { .. })));
    }

    #[test]
    fn keep_profile_values() {
        let p = build_keep_profile(10, 6).unwrap();
        let want = [0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.8, 0.6, 0.4, 0.2];
        for (a, b) in p.probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let r = [5.0, 2.5, 5.0 / 3.0, 1.25, 1.0, 1.0, 1.25, 5.0 / 3.0, 2.5, 5.0];
        for (a, b) in p.reciprocals.iter().zip(r) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.full_band(), 4..6);
        let q = build_keep_profile(4, 2).unwrap();
        assert_eq!(q.probs, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert!(matches!(keep_probability(10, 10, 6), Err(Error::Index(_))));
    }

    #[test]
    fn scheme_rate_zero_is_none() {
        let s = SliceScheme::sliceout(0.0, Normalization::Flow).unwrap();
        assert_eq!(s.effective().kind, SchemeKind::None);
        assert!(!s.is_active());
        assert!("bogus".parse::<SchemeKind>().is_err());
        assert_eq!("SliceOut".parse::<SchemeKind>().unwrap(), SchemeKind::SliceOut);
    }

    #[test]
    fn mask_equivalent() {
        let spec = SliceSpec::new(10, 6, 2).unwrap();
        assert_eq!(sliceout_mask_equivalent(10, &spec), vec![0, 0, 1, 1, 1, 1, 1, 1, 0, 0]);
        assert!(sliceout_mask_equivalent(4, &SliceSpec::full(4)).iter().all(|&b| b == 1));
    }

    #[test]
    fn standard_dropout_hand_case() {
        let x = Tensor::<f64>::from_f64(&[2.0, 4.0], &[2]).unwrap();
        let y = apply_dropout_mask(&x, &[2.0, 0.0]).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_standard_dropout(&x, 0.0, &mut rng).unwrap().to_vec(), x.to_vec());
    }
}
