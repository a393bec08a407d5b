use rand::Rng;

use super::{maybe_mask, DenseSliceLayer, GroupPlan, Keep, Mode, Normalizer};
use crate::error::{Error, Result};
use crate::slicing::SliceSpec;
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

/// Per-head feature selections for one attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSliceConfig {
    pub d: usize,
    pub heads: usize,
    /// Query and key selections within a head; they must be identical.
    pub q: Keep,
    pub k: Keep,
    pub v: Keep,
    /// Normalization factors for the kept value features.
    pub v_factors: Option<Vec<f64>>,
    pub mode: Mode,
}

impl AttentionSliceConfig {
    pub fn unsliced(d: usize, heads: usize, mode: Mode) -> Self {
        AttentionSliceConfig { d, heads, q: Keep::All, k: Keep::All, v: Keep::All, v_factors: None, mode }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn check(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Shape(format!("{} heads do not divide model width {}", self.heads, self.d)));
        }
        if self.q != self.k {
            return Err(Error::Alignment(format!(
                "query selection {:?} differs from key selection {:?}",
                self.q, self.k
            )));
        }
        Ok(())
    }

    /// Softmax temperature: the kept query/key width while training, the
    /// full head width at evaluation.
    pub fn alpha(&self) -> usize {
        match self.mode {
            Mode::Train => self.q.width(self.head_dim()),
            Mode::Eval => self.head_dim(),
        }
    }
}

/// Selection of head `h`'s features inside the full `d`-wide projection.
fn head_keep(keep: &Keep, h: usize, hd: usize, d: usize) -> Keep {
    let off = h * hd;
    match keep {
        Keep::All => Keep::Slice(SliceSpec { layer_width: d, width: hd, start: off }),
        Keep::Slice(s) => Keep::Slice(SliceSpec { layer_width: d, width: s.width, start: off + s.start }),
        Keep::Units(u) => Keep::Units(u.iter().map(|&i| off + i).collect()),
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights per head, `[T, T]`.
    pub weights: Vec<Var>,
}

/// `softmax(q·kᵀ / √alpha) · v` for one sequence.
pub fn scaled_dot_attention<T: Element>(g: &mut Graph<T>, q: Var, k: Var, v: Var, alpha: usize) -> Result<(Var, Var)> {
    if g.shape(q) != g.shape(k) {
        return Err(Error::Alignment(format!("query {:?} and key {:?} shapes differ", g.shape(q), g.shape(k))));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul_scaled(q, kt, T::from_f64(1.0 / (alpha as f64).sqrt()))?;
    let w = g.softmax(scores)?;
    let out = g.matmul(w, v)?;
    Ok((out, w))
}

/// Multi-head attention over one sequence with pre-computed `q, k, v` of
/// shape `[T, d]`. Heads read column views of the projections; value
/// features are normalized. Returns `[T, heads · kept_v]`.
pub fn attention_sliceout<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionSliceConfig,
) -> Result<AttentionOutput> {
    cfg.check()?;
    let (d, hd) = (cfg.d, cfg.head_dim());
    for x in [q, k, v] {
        if g.shape(x).len() != 2 || g.shape(x)[1] != d {
            return Err(Error::Shape(format!("attention input {:?} is not [T, {d}]", g.shape(x))));
        }
    }
    let (qk, vk) = if cfg.mode == Mode::Train { (&cfg.q, &cfg.v) } else { (&Keep::All, &Keep::All) };
    let alpha = cfg.alpha();
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qs = super::select(g, q, 1, &head_keep(qk, h, hd, d))?;
        let ks = super::select(g, k, 1, &head_keep(qk, h, hd, d))?;
        let mut vs = super::select(g, v, 1, &head_keep(vk, h, hd, d))?;
        if let (Mode::Train, Some(f)) = (cfg.mode, &cfg.v_factors) {
            vs = g.scale_axis(vs, 1, f.iter().map(|&x| T::from_f64(x)).collect())?;
        }
        let (o, w) = scaled_dot_attention(g, qs, ks, vs, alpha)?;
        outs.push(o);
        weights.push(w);
    }
    let out = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok(AttentionOutput { out, weights })
}

/// Post-norm transformer block: attention then a ReLU feed-forward layer.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub wq: DenseSliceLayer,
    pub wk: DenseSliceLayer,
    pub wv: DenseSliceLayer,
    pub wo: DenseSliceLayer,
    pub ffn1: DenseSliceLayer,
    pub ffn2: DenseSliceLayer,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

fn layer_norm_params<T: Element>(store: &mut ParamStore<T>, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one())),
        store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
    )
}

impl AttentionBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide model width {d}")));
        }
        Ok(AttentionBlock {
            d,
            heads,
            ffn_dim,
            wq: DenseSliceLayer::new(store, &format!("{name}.q"), d, d, true, rng),
            wk: DenseSliceLayer::new(store, &format!("{name}.k"), d, d, true, rng),
            wv: DenseSliceLayer::new(store, &format!("{name}.v"), d, d, true, rng),
            // one output bias would be added once per head
            wo: DenseSliceLayer::new(store, &format!("{name}.o"), d, d, false, rng),
            ffn1: DenseSliceLayer::new(store, &format!("{name}.ffn1"), d, ffn_dim, true, rng),
            ffn2: DenseSliceLayer::new(store, &format!("{name}.ffn2"), ffn_dim, d, true, rng),
            ln1: layer_norm_params(store, &format!("{name}.ln1"), d),
            ln2: layer_norm_params(store, &format!("{name}.ln2"), d),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `x` is `[batch · tokens, d]`, rows grouped by example.
    ///
    /// Query/key weight rows of each head are sliced by `qk` (one shared
    /// selection), value rows by `v`, and the feed-forward hidden units by
    /// `ffn`. The output projection reads the matching columns.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Element, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        tokens: usize,
        cfg: &AttentionSliceConfig,
        v_plan: &GroupPlan,
        ffn: &GroupPlan,
        rng: &mut R,
    ) -> Result<Var> {
        cfg.check()?;
        let (d, hd) = (self.d, self.head_dim());
        if cfg.d != d || cfg.heads != self.heads {
            return Err(Error::Shape(format!("config for d={}, {} heads on block d={d}, {} heads", cfg.d, cfg.heads, self.heads)));
        }
        let rows = g.shape(x)[0];
        if tokens == 0 || rows % tokens != 0 {
            return Err(Error::Shape(format!("{rows} rows are not a whole number of {tokens}-token sequences")));
        }
        let batch = rows / tokens;
        let train = cfg.mode == Mode::Train;
        let (qk, vk) = if train { (cfg.q.clone(), cfg.v.clone()) } else { (Keep::All, Keep::All) };
        let v_norm = match (&cfg.v_factors, train) {
            (Some(f), true) => Normalizer::Factors(f.clone()),
            _ => Normalizer::None,
        };
        let alpha = cfg.alpha();
        let mut attn = None;
        for h in 0..self.heads {
            let qkeep = head_keep(&qk, h, hd, d);
            let vkeep = head_keep(&vk, h, hd, d);
            let q = self.wq.forward(g, store, x, &Keep::All, &qkeep, &Normalizer::None)?;
            let k = self.wk.forward(g, store, x, &Keep::All, &qkeep, &Normalizer::None)?;
            let mut v = self.wv.forward(g, store, x, &Keep::All, &vkeep, &v_norm)?;
            if train {
                v = maybe_mask(g, v, v_plan, rng)?;
            }
            let mut per_example = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = g.slice(q, 0, b * tokens, tokens)?;
                let kb = g.slice(k, 0, b * tokens, tokens)?;
                let vb = g.slice(v, 0, b * tokens, tokens)?;
                per_example.push(scaled_dot_attention(g, qb, kb, vb, alpha)?.0);
            }
            let o = if batch == 1 { per_example[0] } else { g.concat(&per_example, 0)? };
            let proj = self.wo.forward(g, store, o, &vkeep, &Keep::All, &Normalizer::None)?;
            attn = Some(match attn {
                None => proj,
                Some(acc) => g.add(acc, proj)?,
            });
        }
        let res = g.add(x, attn.expect("at least one head"))?;
        let (g1, b1) = (g.param(store.get(self.ln1.0)), g.param(store.get(self.ln1.1)));
        let h1 = g.layer_norm(res, g1, b1, 1e-5)?;
        let fkeep = if train { ffn.keep.clone() } else { Keep::All };
        let fnorm = match (&ffn.factors, train) {
            (Some(f), true) => Normalizer::Factors(f.clone()),
            _ => Normalizer::None,
        };
        let f = self.ffn1.forward(g, store, h1, &Keep::All, &fkeep, &fnorm)?;
        let mut f = g.relu(f);
        if train {
            f = maybe_mask(g, f, ffn, rng)?;
        }
        let f2 = self.ffn2.forward(g, store, f, &fkeep, &Keep::All, &Normalizer::None)?;
        let res2 = g.add(h1, f2)?;
        let (g2, b2) = (g.param(store.get(self.ln2.0)), g.param(store.get(self.ln2.1)));
        g.layer_norm(res2, g2, b2, 1e-5)
    }
}
