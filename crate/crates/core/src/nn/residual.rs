use rand::Rng;

use super::{he_normal, maybe_mask, select, GroupPlan, Keep, Mode};
use crate::error::{Error, Result};
use crate::slicing::{sample_slice, SliceSpec};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

/// Where the block drops units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Output channels of the first convolution (Channel-SliceOut).
    #[default]
    FirstConv,
    /// A spatial window of the block input (Patch-SliceOut).
    InputPatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualBlockConfig {
    pub channels: usize,
    pub delayed_normalization: bool,
    pub placement: Placement,
    /// `false` replaces the intermediate batch norm by the identity.
    pub batch_norm: bool,
}

impl ResidualBlockConfig {
    pub fn new(channels: usize) -> Self {
        ResidualBlockConfig { channels, delayed_normalization: false, placement: Placement::FirstConv, batch_norm: true }
    }
}

/// The channel selections of conv1 outputs, the batch norm between the
/// convolutions, and conv2 inputs. They must be one and the same.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSlices {
    pub conv1_out: Keep,
    pub bn: Keep,
    pub conv2_in: Keep,
}

impl ChannelSlices {
    pub fn shared(keep: Keep) -> Self {
        ChannelSlices { conv1_out: keep.clone(), bn: keep.clone(), conv2_in: keep }
    }

    fn aligned(&self) -> Result<&Keep> {
        if self.conv1_out != self.bn || self.bn != self.conv2_in {
            return Err(Error::Alignment(format!(
                "channel selections differ: conv1 {:?}, batch norm {:?}, conv2 {:?}",
                self.conv1_out, self.bn, self.conv2_in
            )));
        }
        Ok(&self.conv1_out)
    }
}

/// Guards against normalizing twice within one block pass.
#[derive(Debug, Default)]
pub struct NormSite {
    applied: bool,
}

impl NormSite {
    pub fn new() -> Self {
        NormSite::default()
    }

    pub fn applied(&self) -> bool {
        self.applied
    }
}

/// Multiplies channel `i` (axis 1) of `y` by `factors[i]`, once per block.
pub fn delayed_normalize<T: Element>(g: &mut Graph<T>, y: Var, factors: &[f64], site: &mut NormSite) -> Result<Var> {
    if site.applied {
        return Err(Error::Usage("normalization already applied in this block".into()));
    }
    site.applied = true;
    g.scale_axis(y, 1, factors.iter().map(|&f| T::from_f64(f)).collect())
}

/// Window side lengths `max(1, round(side·√(1−p)))`.
pub fn patch_window(h: usize, w: usize, p: f64) -> Result<(usize, usize)> {
    if !(p.is_finite() && (0.0..1.0).contains(&p)) {
        return Err(Error::Rate(p));
    }
    let k = (1.0 - p).sqrt();
    let side = |n: usize| ((n as f64 * k).round() as usize).max(1);
    let (a, b) = (side(h), side(w));
    if a > h || b > w {
        return Err(Error::Size(format!("window {a}x{b} larger than input {h}x{w}")));
    }
    Ok((a, b))
}

/// Zero-copy spatial window of `x: [b, C, H, W]`, shared by batch and
/// channels, scaled by `H·W / (h'·w')`. Returns the window and the two
/// axis specs.
pub fn patch_sliceout<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    p: f64,
    rng: &mut R,
) -> Result<(Var, SliceSpec, SliceSpec)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("patch slicing needs [b, C, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let (ph, pw) = patch_window(h, w, p)?;
    let rs = sample_slice(rng, h, ph)?;
    let cs = sample_slice(rng, w, pw)?;
    let v = g.slice(x, 2, rs.start, rs.width)?;
    let v = g.slice(v, 3, cs.start, cs.width)?;
    let factor = (h * w) as f64 / (ph * pw) as f64;
    let v = if factor != 1.0 { g.mul_scalar(v, T::from_f64(factor)) } else { v };
    Ok((v, rs, cs))
}

/// `x + conv2(relu(bn(conv1(x))))` with 3×3 same-padded convolutions and
/// channel selections shared by conv1 outputs, the batch norm and conv2
/// inputs.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub cfg: ResidualBlockConfig,
    pub conv1: ParamId,
    pub conv2: ParamId,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl ResidualBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: ResidualBlockConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let conv1 = store.add(format!("{name}.conv1"), he_normal(&[c, c, 3, 3], c * 9, rng));
        let conv2 = store.add(format!("{name}.conv2"), he_normal(&[c, c, 3, 3], c * 9, rng));
        let (gamma, beta) = if cfg.batch_norm {
            (
                Some(store.add(format!("{name}.bn.gamma"), Tensor::full(&[c], T::one()))),
                Some(store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c]))),
            )
        } else {
            (None, None)
        };
        ResidualBlock {
            cfg,
            conv1,
            conv2,
            gamma,
            beta,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Channel-placement forward pass. `factors` (one per kept channel) are
    /// applied right after conv1, or after the batch norm and ReLU when
    /// normalization is delayed.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_channels<T: Element, R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        slices: &ChannelSlices,
        factors: Option<&[f64]>,
        mask_rate: Option<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let keep = slices.aligned()?.clone();
        let c = self.cfg.channels;
        if g.shape(x).len() != 4 || g.shape(x)[1] != c {
            return Err(Error::Shape(format!("block with {c} channels got input {:?}", g.shape(x))));
        }
        let width = keep.width(c);
        if let Some(f) = factors {
            if f.len() != width {
                return Err(Error::Alignment(format!("{} factors for {width} kept channels", f.len())));
            }
        }
        let train = mode == Mode::Train;
        let mut site = NormSite::new();
        let k1 = g.param(store.get(self.conv1));
        let k1 = select(g, k1, 0, &keep)?;
        let mut h = g.conv2d(x, k1, 1, 1)?;
        if let (Some(f), false) = (factors, self.cfg.delayed_normalization) {
            h = delayed_normalize(g, h, f, &mut site)?;
        }
        if let (Some(gid), Some(bid)) = (self.gamma, self.beta) {
            h = if train {
                let gm = g.param(store.get(gid));
                let gm = select(g, gm, 0, &keep)?;
                let bt = g.param(store.get(bid));
                let bt = select(g, bt, 0, &keep)?;
                let (y, mean, var) = g.batch_norm(h, gm, bt, self.eps)?;
                let count = (g.shape(h)[0] * g.shape(h)[2] * g.shape(h)[3]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for i in 0..width {
                    let j = keep.global(i);
                    let mo = self.momentum;
                    self.running_mean[j] = (1.0 - mo) * self.running_mean[j] + mo * mean[i].to_f64();
                    self.running_var[j] = (1.0 - mo) * self.running_var[j] + mo * var[i].to_f64() * unbias;
                }
                y
            } else {
                let gm = store.get(gid).value.to_f64_vec();
                let bt = store.get(bid).value.to_f64_vec();
                let mut scale = Vec::with_capacity(width);
                let mut shift = Vec::with_capacity(width);
                for i in 0..width {
                    let j = keep.global(i);
                    let s = gm[j] / (self.running_var[j] + self.eps).sqrt();
                    scale.push(T::from_f64(s));
                    shift.push(T::from_f64(bt[j] - self.running_mean[j] * s));
                }
                g.affine_axis(h, 1, scale, Some(shift))?
            };
        }
        h = g.relu(h);
        if train {
            let plan = GroupPlan { mask_rate, ..GroupPlan::full(c) };
            h = maybe_mask(g, h, &plan, rng)?;
        }
        if let Some(f) = factors {
            if self.cfg.delayed_normalization {
                h = delayed_normalize(g, h, f, &mut site)?;
            }
        }
        let k2 = g.param(store.get(self.conv2));
        let k2 = select(g, k2, 1, &keep)?;
        let out = g.conv2d(h, k2, 1, 1)?;
        g.add(out, x)
    }

    /// Patch-placement forward pass: the block runs on a spatial window of
    /// `x`, and the skip connection carries the same window.
    pub fn forward_patch<T: Element, R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        rows: &GroupPlan,
        cols: &GroupPlan,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let mut xp = x;
        if mode == Mode::Train {
            xp = select(g, xp, 2, &rows.keep)?;
            xp = select(g, xp, 3, &cols.keep)?;
            if let Some(f) = rows.factors_as::<T>() {
                xp = g.scale_axis(xp, 2, f)?;
            }
            if let Some(f) = cols.factors_as::<T>() {
                xp = g.scale_axis(xp, 3, f)?;
            }
            xp = maybe_mask(g, xp, rows, rng)?;
        }
        let all = ChannelSlices::shared(Keep::All);
        self.forward_channels(g, store, xp, &all, None, None, mode, rng)
    }
}
