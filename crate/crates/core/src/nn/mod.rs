//! Layers, blocks and models with SliceOut wired in.

mod arch;
mod attention;
mod dense;
mod models;
mod residual;

pub use arch::{architecture_count, enumerate_distinct_masks};
pub use attention::{attention_sliceout, scaled_dot_attention, AttentionBlock, AttentionOutput, AttentionSliceConfig};
pub use dense::{dense_sliceout_forward, DenseSliceLayer, Normalizer};
pub use models::{AttentionNet, Mlp, ModelSpec, Network, ResNet};
pub use residual::{
    delayed_normalize, patch_sliceout, patch_window, ChannelSlices, NormSite, Placement, ResidualBlock,
    ResidualBlockConfig,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::slicing::{
    normalization_factors, planned_width, sample_kept_units, sample_slice, flow_norm_factor, Normalization,
    SchemeKind, SliceScheme, SliceSpec,
};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which units of a group survive this step.
#[derive(Clone, Debug, PartialEq)]
pub enum Keep {
    All,
    /// Contiguous slice, realized as a view.
    Slice(SliceSpec),
    /// Arbitrary sorted subset, realized as a gather copy.
    Units(Vec<usize>),
}

impl Keep {
    pub fn width(&self, m: usize) -> usize {
        match self {
            Keep::All => m,
            Keep::Slice(s) => s.width,
            Keep::Units(u) => u.len(),
        }
    }

    pub fn spec(&self) -> Option<&SliceSpec> {
        match self {
            Keep::Slice(s) => Some(s),
            _ => None,
        }
    }

    /// Global unit index of local position `i`.
    pub fn global(&self, i: usize) -> usize {
        match self {
            Keep::All => i,
            Keep::Slice(s) => s.start + i,
            Keep::Units(u) => u[i],
        }
    }
}

/// A droppable group of units (hidden layer, channel set, spatial axis...).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupDesc {
    pub m: usize,
    /// Kept width when slicing or gathering.
    pub width: usize,
}

/// Per-step decision for one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPlan {
    pub m: usize,
    pub keep: Keep,
    /// Normalization factors for the kept units (local order).
    pub factors: Option<Vec<f64>>,
    /// Standard dropout rate applied element-wise to the group's activations.
    pub mask_rate: Option<f64>,
}

impl GroupPlan {
    pub fn full(m: usize) -> Self {
        GroupPlan { m, keep: Keep::All, factors: None, mask_rate: None }
    }

    pub fn sliced(spec: SliceSpec, norm: Normalization) -> Result<Self> {
        Ok(GroupPlan {
            m: spec.layer_width,
            factors: Some(normalization_factors(norm, &spec)?),
            keep: Keep::Slice(spec),
            mask_rate: None,
        })
    }

    pub fn width(&self) -> usize {
        self.keep.width(self.m)
    }

    pub fn factors_as<T: Element>(&self) -> Option<Vec<T>> {
        self.factors.as_ref().map(|f| f.iter().map(|&v| T::from_f64(v)).collect())
    }
}

/// Samples one step's plan for every group under `scheme`.
pub fn plan_step<R: Rng + ?Sized>(scheme: &SliceScheme, groups: &[GroupDesc], rng: &mut R) -> Result<Vec<GroupPlan>> {
    let s = scheme.effective();
    groups
        .iter()
        .map(|gd| {
            Ok(match s.kind {
                SchemeKind::None => GroupPlan::full(gd.m),
                SchemeKind::Standard => GroupPlan { mask_rate: Some(s.rate), ..GroupPlan::full(gd.m) },
                SchemeKind::Controlled => GroupPlan {
                    m: gd.m,
                    keep: Keep::Units(sample_kept_units(rng, gd.m, gd.width)?),
                    factors: Some(vec![flow_norm_factor(gd.m, gd.width); gd.width]),
                    mask_rate: None,
                },
                SchemeKind::SliceOut => GroupPlan::sliced(sample_slice(rng, gd.m, gd.width)?, s.normalization)?,
            })
        })
        .collect()
}

/// Kept width of a group of `m` units under `scheme`.
pub fn group_width(scheme: &SliceScheme, m: usize) -> Result<usize> {
    let s = scheme.effective();
    match s.kind {
        SchemeKind::Controlled | SchemeKind::SliceOut => planned_width(m, s.rate),
        _ => Ok(m),
    }
}

/// State threaded through one forward pass.
pub struct StepCtx<'a, R: Rng + ?Sized> {
    pub mode: Mode,
    pub groups: Vec<GroupPlan>,
    pub rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> StepCtx<'a, R> {
    pub fn new(mode: Mode, groups: Vec<GroupPlan>, rng: &'a mut R) -> Self {
        StepCtx { mode, groups, rng }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn group(&self, i: usize) -> &GroupPlan {
        &self.groups[i]
    }
}

/// Applies a standard-dropout mask to `x` when the group asks for one.
pub(crate) fn maybe_mask<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    plan: &GroupPlan,
    rng: &mut R,
) -> Result<Var> {
    match plan.mask_rate {
        Some(p) => {
            let n = g.value(x).numel();
            let mask = crate::slicing::dropout_mask::<T, R>(n, p, rng)?;
            g.mask_mul(x, mask)
        }
        None => Ok(x),
    }
}

/// Restricts `v` along `axis` to the kept units: a view for slices, a
/// gathered copy for unit lists.
pub(crate) fn select<T: Element>(g: &mut Graph<T>, v: Var, axis: usize, keep: &Keep) -> Result<Var> {
    match keep {
        Keep::All => Ok(v),
        Keep::Slice(s) => {
            if g.shape(v)[axis] != s.layer_width {
                return Err(Error::Alignment(format!(
                    "slice over {} units applied to axis of {}",
                    s.layer_width,
                    g.shape(v)[axis]
                )));
            }
            g.slice(v, axis, s.start, s.width)
        }
        Keep::Units(u) => {
            let mut picks = vec![None; g.shape(v).len()];
            picks[axis] = Some(u.clone());
            g.gather(v, picks)
        }
    }
}

/// He-normal initialization with `fan_in` inputs.
pub fn he_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data: Vec<T> = (0..shape.iter().product::<usize>()).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(data, shape).expect("shape matches")
}
