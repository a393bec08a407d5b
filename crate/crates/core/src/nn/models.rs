use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    group_width, he_normal, maybe_mask, patch_window, AttentionBlock, AttentionSliceConfig, ChannelSlices,
    DenseSliceLayer, GroupDesc, GroupPlan, Keep, Mode, Normalizer, Placement, ResidualBlock, ResidualBlockConfig,
};
use crate::error::{Error, Result};
use crate::slicing::{SchemeKind, SliceScheme};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Var};

/// A trainable classifier over flat `[batch, input_dim]` inputs.
pub trait Network<T: Element> {
    fn store(&self) -> &ParamStore<T>;

    fn input_dim(&self) -> usize;

    fn classes(&self) -> usize;

    /// Droppable unit groups and their kept widths under `scheme`.
    fn groups(&self, scheme: &SliceScheme) -> Result<Vec<GroupDesc>>;

    /// Builds the logits. In training mode `plans` holds one entry per group;
    /// evaluation always runs the full network.
    fn forward(&mut self, g: &mut Graph<T>, x: Var, plans: &[GroupPlan], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var>;
}

fn check_plans(plans: &[GroupPlan], groups: usize, mode: Mode) -> Result<()> {
    if mode == Mode::Train && plans.len() != groups {
        return Err(Error::Alignment(format!("{} group plans for {groups} groups", plans.len())));
    }
    Ok(())
}

fn check_input<T: Element>(g: &Graph<T>, x: Var, dim: usize) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != dim {
        return Err(Error::Shape(format!("expected [batch, {dim}] input, got {s:?}")));
    }
    Ok(s[0])
}

fn normalizer(plan: &GroupPlan) -> Normalizer {
    plan.factors.clone().map_or(Normalizer::None, Normalizer::Factors)
}

/// Multi-layer perceptron with dropout on every hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp<T: Element> {
    pub store: ParamStore<T>,
    pub layers: Vec<DenseSliceLayer>,
    pub dims: Vec<usize>,
}

impl<T: Element> Mlp<T> {
    /// `dims` lists input, hidden widths, and class count.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseSliceLayer::new(&mut store, &format!("fc{i}"), w[0], w[1], true, &mut rng))
            .collect();
        Ok(Mlp { store, layers, dims: dims.to_vec() })
    }
}

impl<T: Element> Network<T> for Mlp<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn groups(&self, scheme: &SliceScheme) -> Result<Vec<GroupDesc>> {
        self.dims[1..self.dims.len() - 1]
            .iter()
            .map(|&m| Ok(GroupDesc { m, width: group_width(scheme, m)? }))
            .collect()
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, plans: &[GroupPlan], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        check_input(g, x, self.dims[0])?;
        let hidden = self.layers.len() - 1;
        check_plans(plans, hidden, mode)?;
        let train = mode == Mode::Train;
        let mut h = x;
        let mut prev = Keep::All;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == hidden {
                h = layer.forward(g, &self.store, h, &prev, &Keep::All, &Normalizer::None)?;
                break;
            }
            let (keep, norm) = if train {
                (plans[i].keep.clone(), normalizer(&plans[i]))
            } else {
                (Keep::All, Normalizer::None)
            };
            let y = layer.forward(g, &self.store, h, &prev, &keep, &norm)?;
            let mut y = g.relu(y);
            if train {
                y = maybe_mask(g, y, &plans[i], rng)?;
            }
            h = y;
            prev = keep;
        }
        Ok(h)
    }
}

/// Small residual CNN: stem convolution, residual blocks, global average
/// pooling and a linear classifier.
#[derive(Clone, Debug)]
pub struct ResNet<T: Element> {
    pub store: ParamStore<T>,
    pub image: [usize; 3],
    pub channels: usize,
    pub stem: ParamId,
    pub blocks: Vec<ResidualBlock>,
    pub head: DenseSliceLayer,
    pub classes: usize,
    pub placement: Placement,
}

impl<T: Element> ResNet<T> {
    pub fn new(image: [usize; 3], channels: usize, blocks: usize, classes: usize, block: ResidualBlockConfig, seed: u64) -> Result<Self> {
        if image.contains(&0) || channels == 0 || classes < 2 {
            return Err(Error::Config(format!("invalid resblock model: image {image:?}, {channels} channels, {classes} classes")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = store.add("stem", he_normal(&[channels, image[0], 3, 3], image[0] * 9, &mut rng));
        let cfg = ResidualBlockConfig { channels, ..block };
        let blocks = (0..blocks)
            .map(|i| ResidualBlock::new(&mut store, &format!("block{i}"), cfg, &mut rng))
            .collect();
        let head = DenseSliceLayer::new(&mut store, "head", channels, classes, true, &mut rng);
        Ok(ResNet { store, image, channels, stem, blocks, head, classes, placement: cfg.placement })
    }
}

impl<T: Element> Network<T> for ResNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn input_dim(&self) -> usize {
        self.image.iter().product()
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn groups(&self, scheme: &SliceScheme) -> Result<Vec<GroupDesc>> {
        let s = scheme.effective();
        let mut out = Vec::new();
        match self.placement {
            Placement::FirstConv => {
                for _ in &self.blocks {
                    out.push(GroupDesc { m: self.channels, width: group_width(&s, self.channels)? });
                }
            }
            Placement::InputPatch => {
                if s.kind == SchemeKind::Controlled {
                    return Err(Error::Config("controlled dropout needs channel placement".into()));
                }
                let (mut h, mut w) = (self.image[1], self.image[2]);
                for _ in &self.blocks {
                    let (ph, pw) = if s.kind == SchemeKind::SliceOut { patch_window(h, w, s.rate)? } else { (h, w) };
                    out.push(GroupDesc { m: h, width: ph });
                    out.push(GroupDesc { m: w, width: pw });
                    (h, w) = (ph, pw);
                }
            }
        }
        Ok(out)
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, plans: &[GroupPlan], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let batch = check_input(g, x, self.input_dim())?;
        let per_block = match self.placement {
            Placement::FirstConv => 1,
            Placement::InputPatch => 2,
        };
        check_plans(plans, per_block * self.blocks.len(), mode)?;
        let [c, h, w] = self.image;
        let img = g.reshape(x, &[batch, c, h, w])?;
        let k = g.param(self.store.get(self.stem));
        let s = g.conv2d(img, k, 1, 1)?;
        let mut a = g.relu(s);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            a = match (self.placement, mode) {
                (_, Mode::Eval) => block.forward_channels(g, &self.store, a, &ChannelSlices::shared(Keep::All), None, None, mode, rng)?,
                (Placement::FirstConv, Mode::Train) => {
                    let p = &plans[i];
                    let slices = ChannelSlices::shared(p.keep.clone());
                    block.forward_channels(g, &self.store, a, &slices, p.factors.as_deref(), p.mask_rate, mode, rng)?
                }
                (Placement::InputPatch, Mode::Train) => {
                    block.forward_patch(g, &self.store, a, &plans[2 * i], &plans[2 * i + 1], mode, rng)?
                }
            };
        }
        let sh = g.shape(a).to_vec();
        let flat = g.reshape(a, &[sh[0], sh[1], sh[2] * sh[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        self.head.forward(g, &self.store, pooled, &Keep::All, &Keep::All, &Normalizer::None)
    }
}

/// Sequence classifier: a flat input is split into `tokens` rows, embedded,
/// passed through one attention block, mean-pooled and classified.
#[derive(Clone, Debug)]
pub struct AttentionNet<T: Element> {
    pub store: ParamStore<T>,
    pub tokens: usize,
    pub d_in: usize,
    pub embed: DenseSliceLayer,
    pub block: AttentionBlock,
    pub head: DenseSliceLayer,
    pub classes: usize,
}

impl<T: Element> AttentionNet<T> {
    pub fn new(input_dim: usize, tokens: usize, d_model: usize, heads: usize, ffn_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if tokens == 0 || input_dim % tokens != 0 {
            return Err(Error::Config(format!("input width {input_dim} is not divisible into {tokens} tokens")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d_in = input_dim / tokens;
        let embed = DenseSliceLayer::new(&mut store, "embed", d_in, d_model, true, &mut rng);
        let block = AttentionBlock::new(&mut store, "attn", d_model, heads, ffn_dim, &mut rng)?;
        let head = DenseSliceLayer::new(&mut store, "head", d_model, classes, true, &mut rng);
        Ok(AttentionNet { store, tokens, d_in, embed, block, head, classes })
    }
}

impl<T: Element> Network<T> for AttentionNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn input_dim(&self) -> usize {
        self.tokens * self.d_in
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn groups(&self, scheme: &SliceScheme) -> Result<Vec<GroupDesc>> {
        let hd = self.block.head_dim();
        let f = self.block.ffn_dim;
        Ok(vec![
            GroupDesc { m: hd, width: group_width(scheme, hd)? },
            GroupDesc { m: hd, width: group_width(scheme, hd)? },
            GroupDesc { m: f, width: group_width(scheme, f)? },
        ])
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, plans: &[GroupPlan], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let batch = check_input(g, x, self.input_dim())?;
        check_plans(plans, 3, mode)?;
        let rows = g.reshape(x, &[batch * self.tokens, self.d_in])?;
        let e = self.embed.forward(g, &self.store, rows, &Keep::All, &Keep::All, &Normalizer::None)?;
        let (d, heads) = (self.block.d, self.block.heads);
        let (cfg, v_plan, ffn) = match mode {
            Mode::Train => (
                AttentionSliceConfig {
                    d,
                    heads,
                    q: plans[0].keep.clone(),
                    k: plans[0].keep.clone(),
                    v: plans[1].keep.clone(),
                    v_factors: plans[1].factors.clone(),
                    mode,
                },
                plans[1].clone(),
                plans[2].clone(),
            ),
            Mode::Eval => (
                AttentionSliceConfig::unsliced(d, heads, mode),
                GroupPlan::full(self.block.head_dim()),
                GroupPlan::full(self.block.ffn_dim),
            ),
        };
        let h = self.block.forward(g, &self.store, e, self.tokens, &cfg, &v_plan, &ffn, rng)?;
        let seq = g.reshape(h, &[batch, self.tokens, d])?;
        let pooled = g.mean_axis(seq, 1)?;
        self.head.forward(g, &self.store, pooled, &Keep::All, &Keep::All, &Normalizer::None)
    }
}

/// Serializable model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        hidden: Vec<usize>,
    },
    Resblock {
        /// `[channels, height, width]` of the input images.
        image: [usize; 3],
        channels: usize,
        #[serde(default = "one")]
        blocks: usize,
        #[serde(default)]
        placement: Placement,
        #[serde(default)]
        delayed: bool,
        #[serde(default = "yes")]
        batch_norm: bool,
    },
    Attention {
        tokens: usize,
        d_model: usize,
        heads: usize,
        ffn: usize,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    pub fn build<T: Element>(&self, input_dim: usize, classes: usize, seed: u64, delayed_override: bool) -> Result<Box<dyn Network<T>>> {
        Ok(match self {
            ModelSpec::Mlp { hidden } => {
                let mut dims = vec![input_dim];
                dims.extend(hidden);
                dims.push(classes);
                Box::new(Mlp::new(&dims, seed)?)
            }
            ModelSpec::Resblock { image, channels, blocks, placement, delayed, batch_norm } => {
                if image.iter().product::<usize>() != input_dim {
                    return Err(Error::Config(format!("image {image:?} does not match input width {input_dim}")));
                }
                let cfg = ResidualBlockConfig {
                    channels: *channels,
                    delayed_normalization: *delayed || delayed_override,
                    placement: *placement,
                    batch_norm: *batch_norm,
                };
                Box::new(ResNet::new(*image, *channels, *blocks, classes, cfg, seed)?)
            }
            ModelSpec::Attention { tokens, d_model, heads, ffn } => {
                Box::new(AttentionNet::new(input_dim, *tokens, *d_model, *heads, *ffn, classes, seed)?)
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Mlp { .. } => "mlp",
            ModelSpec::Resblock { .. } => "resblock",
            ModelSpec::Attention { .. } => "attention",
        }
    }
}
