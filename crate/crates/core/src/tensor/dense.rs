use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;

use super::counters;
use super::element::Element;
use crate::error::{Error, Result};

type Storage<T> = Arc<RwLock<Vec<T>>>;

/// Dense n-dimensional array over a shared buffer.
///
/// A tensor is a `(offset, shape, strides)` window onto a reference-counted
/// buffer. Views created by [`Tensor::slice_view`], [`Tensor::transpose`] and
/// [`Tensor::reshape`] share the parent's buffer; writing through a view
/// mutates the parent.
#[derive(Clone)]
pub struct Tensor<T: Element = f64> {
    storage: Storage<T>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Calls `f` with the buffer offset of every element in row-major order.
pub(crate) fn for_each_offset(
    shape: &[usize],
    strides: &[usize],
    offset: usize,
    mut f: impl FnMut(usize),
) {
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    if shape.is_empty() {
        f(offset);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = offset;
    loop {
        let mut o = base;
        for _ in 0..inner {
            f(o);
            o += inner_stride;
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            base -= strides[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "{} elements do not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Self::from_parts(data, shape))
    }

    pub(crate) fn from_parts(data: Vec<T>, shape: &[usize]) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            storage: Arc::new(RwLock::new(data)),
            strides: row_major_strides(shape),
            shape: shape.to_vec(),
            offset: 0,
        }
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| T::from_f64(x)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], &[])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * T::BYTES
    }

    pub fn is_contiguous(&self) -> bool {
        let mut expected = 1;
        for (&d, &s) in self.shape.iter().zip(&self.strides).rev() {
            if d != 1 && s != expected {
                return false;
            }
            expected *= d;
        }
        true
    }

    /// True when both tensors are windows onto the same buffer.
    pub fn shares_storage(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.storage, &other.storage)
    }

    fn linear_offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Index(format!(
                "index of rank {} for tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut o = self.offset;
        for ((&i, &d), &s) in index.iter().zip(&self.shape).zip(&self.strides) {
            if i >= d {
                return Err(Error::Index(format!("index {index:?} out of shape {:?}", self.shape)));
            }
            o += i * s;
        }
        Ok(o)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        let o = self.linear_offset(index)?;
        Ok(self.storage.read_recursive()[o])
    }

    pub fn set(&self, index: &[usize], value: T) -> Result<()> {
        let o = self.linear_offset(index)?;
        self.storage.write()[o] = value;
        Ok(())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.storage.read_recursive()[self.offset]
    }

    /// Elements in logical row-major order.
    pub fn to_vec(&self) -> Vec<T> {
        let data = self.storage.read_recursive();
        if self.is_contiguous() {
            return data[self.offset..self.offset + self.numel()].to_vec();
        }
        let mut out = Vec::with_capacity(self.numel());
        for_each_offset(&self.shape, &self.strides, self.offset, |o| out.push(data[o]));
        out
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.to_vec().into_iter().map(Element::to_f64).collect()
    }

    /// Runs `f` on the elements in logical order, borrowing the buffer when
    /// the layout is already contiguous.
    pub(crate) fn with_logical<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        if self.is_contiguous() {
            let data = self.storage.read_recursive();
            f(&data[self.offset..self.offset + self.numel()])
        } else {
            f(&self.to_vec())
        }
    }

    /// `self[i] += src[i]` in logical order, through the view.
    pub(crate) fn add_logical(&self, src: &[T]) {
        debug_assert_eq!(src.len(), self.numel());
        let mut data = self.storage.write();
        if self.is_contiguous() {
            let dst = &mut data[self.offset..self.offset + src.len()];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        } else {
            let mut it = src.iter();
            for_each_offset(&self.shape, &self.strides, self.offset, |o| {
                data[o] = data[o] + *it.next().unwrap();
            });
        }
    }

    /// Overwrites every element through the view.
    pub fn fill(&self, value: T) {
        let mut data = self.storage.write();
        for_each_offset(&self.shape, &self.strides, self.offset, |o| data[o] = value);
    }

    /// Copies `src` element-wise into this view. Shapes must match.
    pub fn assign(&self, src: &Tensor<T>) -> Result<()> {
        if src.shape != self.shape {
            return Err(Error::Shape(format!(
                "cannot assign {:?} into {:?}",
                src.shape, self.shape
            )));
        }
        let values = src.to_vec();
        let mut data = self.storage.write();
        let mut it = values.into_iter();
        for_each_offset(&self.shape, &self.strides, self.offset, |o| data[o] = it.next().unwrap());
        Ok(())
    }

    /// Zero-copy view of `width` entries along `axis` starting at `start`.
    pub fn slice_view(&self, axis: usize, start: usize, width: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::Axis { axis, rank: self.ndim() });
        }
        let len = self.shape[axis];
        if width == 0 || start + width > len {
            return Err(Error::Bounds { start, width, len });
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Tensor {
            storage: Arc::clone(&self.storage),
            shape,
            strides: self.strides.clone(),
            offset: self.offset + start * self.strides[axis],
        })
    }

    /// Zero-copy transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D, got {:?}", self.shape)));
        }
        Ok(Tensor {
            storage: Arc::clone(&self.storage),
            shape: vec![self.shape[1], self.shape[0]],
            strides: vec![self.strides[1], self.strides[0]],
            offset: self.offset,
        })
    }

    /// Zero-copy reshape; the tensor must be contiguous.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        if !self.is_contiguous() {
            return Err(Error::Shape(format!(
                "cannot reshape non-contiguous view {:?} without a copy",
                self.shape
            )));
        }
        Ok(Tensor {
            storage: Arc::clone(&self.storage),
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            offset: self.offset,
        })
    }

    /// Fresh contiguous copy with its own buffer.
    pub fn deep_copy(&self) -> Tensor<T> {
        Self::from_parts(self.to_vec(), &self.shape)
    }

    /// Contiguous tensor with the same values: `self` when it already is one.
    pub fn contiguous(&self) -> Tensor<T> {
        if self.is_contiguous() {
            self.clone()
        } else {
            self.deep_copy()
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.with_logical(|src| src.iter().map(|&x| f(x)).collect());
        Self::from_parts(data, &self.shape)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(&a, b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn allclose(&self, other: &Tensor<T>, tol: f64) -> bool {
        self.shape == other.shape && self.max_abs_diff(other) <= tol
    }

    /// Converts to another element type (always copies).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.to_vec().into_iter().map(|x| U::from_f64(x.to_f64())).collect(),
            &self.shape,
        )
    }

    /// Gathers the selected rows and columns of a 2-D tensor into a newly
    /// allocated buffer. Index lists must be strictly increasing; `None`
    /// keeps every row (or column).
    pub fn gather2d(&self, rows: Option<&[usize]>, cols: Option<&[usize]>) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!("gather needs 2-D, got {:?}", self.shape)));
        }
        self.gather(&[rows, cols])
    }

    /// Copies the index grid `picks[0] × picks[1] × ...` into a new buffer.
    /// `None` keeps a whole axis. Counts the copy.
    pub fn gather(&self, picks: &[Option<&[usize]>]) -> Result<Tensor<T>> {
        if picks.len() != self.ndim() {
            return Err(Error::Shape(format!(
                "{} index lists for tensor of rank {}",
                picks.len(),
                self.ndim()
            )));
        }
        let mut lists = Vec::with_capacity(picks.len());
        for (axis, (pick, &len)) in picks.iter().zip(&self.shape).enumerate() {
            check_sorted_indices(*pick, len, &format!("axis-{axis}"))?;
            lists.push(pick.map(<[usize]>::to_vec).unwrap_or_else(|| (0..len).collect()));
        }
        let shape: Vec<usize> = lists.iter().map(Vec::len).collect();
        // buffer offsets of the selected entries along each axis
        let offs: Vec<Vec<usize>> = lists
            .iter()
            .zip(&self.strides)
            .map(|(l, &s)| l.iter().map(|&i| i * s).collect())
            .collect();
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        {
            let data = self.storage.read_recursive();
            let mut idx = vec![0usize; shape.len()];
            for _ in 0..n {
                let o: usize = self.offset + idx.iter().zip(&offs).map(|(&i, l)| l[i]).sum::<usize>();
                out.push(data[o]);
                for axis in (0..shape.len()).rev() {
                    idx[axis] += 1;
                    if idx[axis] < shape[axis] {
                        break;
                    }
                    idx[axis] = 0;
                }
            }
        }
        counters::record_reads(n);
        counters::record_writes(n);
        counters::record_copy(n * T::BYTES);
        Ok(Self::from_parts(out, &shape))
    }

    pub(crate) fn read_guard(&self) -> parking_lot::RwLockReadGuard<'_, Vec<T>> {
        self.storage.read_recursive()
    }

    /// View with an explicit layout over the same buffer. The caller is
    /// responsible for keeping the layout inside the buffer.
    pub(crate) fn strided_view(&self, shape: Vec<usize>, strides: Vec<usize>, offset: usize) -> Tensor<T> {
        debug_assert_eq!(shape.len(), strides.len());
        Tensor { storage: Arc::clone(&self.storage), shape, strides, offset }
    }

    pub(crate) fn write_guard(&self) -> parking_lot::RwLockWriteGuard<'_, Vec<T>> {
        self.storage.write()
    }
}

pub(crate) fn check_sorted_indices(idx: Option<&[usize]>, len: usize, what: &str) -> Result<()> {
    let Some(idx) = idx else { return Ok(()) };
    if idx.is_empty() {
        return Err(Error::Index(format!("empty {what} index list")));
    }
    for w in idx.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Index(format!(
                "{what} indices must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&last) = idx.last() {
        if last >= len {
            return Err(Error::Index(format!("{what} index {last} out of range 0..{len}")));
        }
    }
    Ok(())
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values = self.to_vec();
        let shown = values.len().min(16);
        write!(f, "Tensor<{}>{:?} {:?}", T::NAME, self.shape, &values[..shown])?;
        if values.len() > shown {
            write!(f, " ...")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arange(n: usize) -> Tensor<f64> {
        Tensor::from_vec((0..n).map(|x| x as f64).collect(), &[n]).unwrap()
    }

    #[test]
    fn full_range_slice_is_identical_view() {
        let t = arange(10);
        let v = t.slice_view(0, 0, 10).unwrap();
        assert!(v.shares_storage(&t));
        assert_eq!(v.to_vec(), t.to_vec());
    }

    #[test]
    fn slice_records_no_copy() {
        let t = arange(10);
        let before = counters::snapshot().copy_bytes_allocated;
        let v = t.slice_view(0, 3, 4).unwrap();
        assert_eq!(v.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(counters::snapshot().copy_bytes_allocated, before);
    }

    #[test]
    fn write_through_view_mutates_parent() {
        let t = Tensor::<f64>::zeros(&[4, 6]);
        let v = t.slice_view(1, 2, 3).unwrap();
        assert_eq!(v.shape(), &[4, 3]);
        v.set(&[0, 0], 99.0).unwrap();
        assert_eq!(t.get(&[0, 2]).unwrap(), 99.0);
    }

    #[test]
    fn slice_errors() {
        let t = Tensor::<f64>::zeros(&[4, 6]);
        assert!(matches!(t.slice_view(2, 0, 1), Err(Error::Axis { axis: 2, rank: 2 })));
        assert!(matches!(t.slice_view(1, 4, 3), Err(Error::Bounds { .. })));
        assert!(matches!(t.slice_view(1, 0, 0), Err(Error::Bounds { .. })));
    }

    #[test]
    fn nested_views_and_transpose() {
        let t = Tensor::<f64>::from_vec((0..24).map(f64::from).collect(), &[4, 6]).unwrap();
        let v = t.slice_view(0, 1, 2).unwrap().slice_view(1, 3, 2).unwrap();
        assert_eq!(v.to_vec(), vec![9.0, 10.0, 15.0, 16.0]);
        let tr = v.transpose().unwrap();
        assert_eq!(tr.to_vec(), vec![9.0, 15.0, 10.0, 16.0]);
        assert!(!tr.is_contiguous());
        assert!(tr.reshape(&[4]).is_err());
        assert_eq!(tr.contiguous().reshape(&[4]).unwrap().to_vec(), vec![9.0, 15.0, 10.0, 16.0]);
    }

    #[test]
    fn gather_copies_and_counts() {
        let w = Tensor::<f64>::from_vec((0..12).map(f64::from).collect(), &[3, 4]).unwrap();
        let before = counters::snapshot();
        let g = w.gather2d(Some(&[0, 2]), Some(&[1, 3])).unwrap();
        let after = counters::snapshot();
        assert_eq!(g.to_vec(), vec![1.0, 3.0, 9.0, 11.0]);
        assert!(!g.shares_storage(&w));
        assert_eq!(after.copy_bytes_allocated - before.copy_bytes_allocated, 4 * 8);
        assert!(w.gather2d(Some(&[2, 0]), None).is_err());
        assert!(w.gather2d(Some(&[1, 1]), None).is_err());
        assert!(w.gather2d(None, Some(&[4])).is_err());
    }

    #[test]
    fn offsets_cover_strided_layout() {
        let mut seen = vec![];
        for_each_offset(&[2, 3], &[10, 2], 1, |o| seen.push(o));
        assert_eq!(seen, vec![1, 3, 5, 11, 13, 15]);
    }
}
