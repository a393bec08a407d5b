use rand::Rng;

use super::{he_normal, select, Keep};
use crate::error::{Error, Result};
use crate::slicing::{build_keep_profile, flow_norm_factor, Normalization};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

/// How the outputs of a sliced layer are rescaled.
#[derive(Clone, Debug, PartialEq)]
pub enum Normalizer {
    None,
    Flow,
    Probabilistic,
    /// Explicit per-kept-unit factors.
    Factors(Vec<f64>),
}

impl From<Normalization> for Normalizer {
    fn from(n: Normalization) -> Self {
        match n {
            Normalization::Flow => Normalizer::Flow,
            Normalization::Probabilistic => Normalizer::Probabilistic,
        }
    }
}

impl Normalizer {
    /// Factors for the kept output units, or `None` for no rescaling.
    pub fn factors(&self, keep: &Keep, m: usize) -> Result<Option<Vec<f64>>> {
        let w = keep.width(m);
        Ok(match (self, keep) {
            (Normalizer::None, _) => None,
            (Normalizer::Factors(f), _) => {
                if f.len() != w {
                    return Err(Error::Alignment(format!("{} factors for {w} kept units", f.len())));
                }
                Some(f.clone())
            }
            (Normalizer::Flow, _) => Some(vec![flow_norm_factor(m, w); w]),
            (Normalizer::Probabilistic, Keep::Slice(s)) => {
                let p = build_keep_profile(m, s.width)?;
                Some(p.reciprocals[s.start..s.end()].to_vec())
            }
            // every unit is equally likely to be kept
            (Normalizer::Probabilistic, _) => Some(vec![flow_norm_factor(m, w); w]),
        })
    }
}

/// Fully connected layer `y = x · Wᵀ + b` whose weight rows (outputs) and
/// columns (inputs) can be restricted per step.
#[derive(Clone, Debug)]
pub struct DenseSliceLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub m_in: usize,
    pub m_out: usize,
}

impl DenseSliceLayer {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        m_in: usize,
        m_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(&[m_out, m_in], m_in, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[m_out])));
        DenseSliceLayer { w, b, m_in, m_out }
    }

    /// Forward pass on the kept input columns and output rows.
    ///
    /// `x` must already hold exactly the kept input units. Slices select
    /// weight views; unit lists gather a copy of the weight (controlled
    /// dropout). Normalization multiplies each kept output unit.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        input: &Keep,
        output: &Keep,
        norm: &Normalizer,
    ) -> Result<Var> {
        let w_in = input.width(self.m_in);
        if g.shape(x).len() != 2 || g.shape(x)[1] != w_in {
            return Err(Error::Alignment(format!(
                "input {:?} does not match {w_in} kept of {} units",
                g.shape(x),
                self.m_in
            )));
        }
        let w = g.param(store.get(self.w));
        let ws = match (output, input) {
            // one copy of the kept grid, as controlled dropout does
            (Keep::Units(r), Keep::Units(c)) => g.gather(w, vec![Some(r.clone()), Some(c.clone())])?,
            (Keep::Units(r), Keep::All) => g.gather(w, vec![Some(r.clone()), None])?,
            (Keep::All, Keep::Units(c)) => g.gather(w, vec![None, Some(c.clone())])?,
            _ => {
                let rows = select(g, w, 0, output)?;
                select(g, rows, 1, input)?
            }
        };
        let b = match self.b {
            Some(id) => {
                let b = g.param(store.get(id));
                Some(select(g, b, 0, output)?)
            }
            None => None,
        };
        let scale = norm
            .factors(output, self.m_out)?
            .map(|f| f.into_iter().map(T::from_f64).collect());
        g.linear(x, ws, b, scale)
    }
}

/// [`DenseSliceLayer::forward`] with optional contiguous input/output slices.
pub fn dense_sliceout_forward<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    layer: &DenseSliceLayer,
    input: Option<crate::slicing::SliceSpec>,
    output: Option<crate::slicing::SliceSpec>,
    norm: &Normalizer,
) -> Result<Var> {
    for (spec, m) in [(input, layer.m_in), (output, layer.m_out)] {
        if let Some(s) = spec {
            if s.layer_width != m {
                return Err(Error::Alignment(format!("slice over {} units on a layer side of {m}", s.layer_width)));
            }
        }
    }
    let keep = |s: Option<crate::slicing::SliceSpec>| s.map_or(Keep::All, Keep::Slice);
    layer.forward(g, store, x, &keep(input), &keep(output), norm)
}
