use super::dense::Tensor;
use super::element::Element;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with a dense gradient buffer of the same shape.
///
/// Sliced ops accumulate into the matching window of `grad`; everything
/// outside that window stays zero.
#[derive(Clone, Debug)]
pub struct Parameter<T: Element = f64> {
    pub name: String,
    pub id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Selection along one parameter axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AxisSel {
    Range { start: usize, len: usize },
    Index(Vec<usize>),
}

impl AxisSel {
    pub fn len(&self) -> usize {
        match self {
            AxisSel::Range { len, .. } => *len,
            AxisSel::Index(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> usize {
        match self {
            AxisSel::Range { start, .. } => start + i,
            AxisSel::Index(v) => v[i],
        }
    }

    pub(crate) fn narrow(&self, start: usize, width: usize) -> AxisSel {
        match self {
            AxisSel::Range { start: s, .. } => AxisSel::Range { start: s + start, len: width },
            AxisSel::Index(v) => AxisSel::Index(v[start..start + width].to_vec()),
        }
    }

    pub(crate) fn pick(&self, idx: &[usize]) -> AxisSel {
        AxisSel::Index(idx.iter().map(|&i| self.get(i)).collect())
    }
}

/// Hyper-rectangle (or index grid) of a parameter, in parameter coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub axes: Vec<AxisSel>,
}

impl Region {
    pub fn full(shape: &[usize]) -> Self {
        Region {
            axes: shape.iter().map(|&d| AxisSel::Range { start: 0, len: d }).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.axes.iter().map(AxisSel::len).product()
    }

    /// Row-major offsets (into a contiguous tensor of `shape`) of every
    /// element in the region.
    pub fn for_each_offset(&self, shape: &[usize], mut f: impl FnMut(usize)) {
        debug_assert_eq!(shape.len(), self.axes.len());
        let strides = super::dense::row_major_strides(shape);
        let rank = self.axes.len();
        if rank == 0 {
            f(0);
            return;
        }
        if self.axes.iter().any(AxisSel::is_empty) {
            return;
        }
        let mut idx = vec![0usize; rank];
        loop {
            let o: usize = idx
                .iter()
                .zip(&self.axes)
                .zip(&strides)
                .map(|((&i, sel), &s)| sel.get(i) * s)
                .sum();
            f(o);
            let mut axis = rank;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < self.axes[axis].len() {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }

    /// Whether a row-major multi-index lies inside the region.
    pub fn contains(&self, index: &[usize]) -> bool {
        index.iter().zip(&self.axes).all(|(&i, sel)| match sel {
            AxisSel::Range { start, len } => i >= *start && i < start + len,
            AxisSel::Index(v) => v.binary_search(&i).is_ok(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f64> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.params.len());
        let value = value.contiguous();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), id, value, grad });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Deep copy of every parameter value, in id order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.deep_copy()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn restore(&self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::State(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter().zip(values) {
            p.value.assign(v)?;
        }
        Ok(())
    }
}
