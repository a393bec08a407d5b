//! 2-D cross-correlation via im2col + gemm.

use super::counters;
use super::dense::Tensor;
use super::element::Element;
use super::graph::{Graph, Op, Var};
use super::ops::gemm_into;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::Shape(format!("conv2d needs 4-D input and kernel, got {x:?} and {k:?}")));
        }
        if x[1] != k[1] {
            return Err(Error::Shape(format!(
                "conv2d: input has {} channels, kernel expects {}",
                x[1], k[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        Ok(Geometry {
            n: x[0],
            c: x[1],
            h,
            w,
            o: k[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + t) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }

    fn im2col<T: Element>(&self, x: &[T], n: usize) -> Tensor<T> {
        let (p, s) = (self.patch(), self.spatial());
        let mut cols = vec![T::zero(); p * s];
        let img = &x[n * self.c * self.h * self.w..(n + 1) * self.c * self.h * self.w];
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * s;
                    for oy in 0..self.oh {
                        let Some(y) = self.src(oy, i, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(xx) = self.src(ox, j, self.w) {
                                cols[row + oy * self.ow + ox] = img[(c * self.h + y) * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(cols, &[p, s])
    }

    fn col2im<T: Element>(&self, cols: &[T], gx: &mut [T], n: usize) {
        let s = self.spatial();
        let img = &mut gx[n * self.c * self.h * self.w..(n + 1) * self.c * self.h * self.w];
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * s;
                    for oy in 0..self.oh {
                        let Some(y) = self.src(oy, i, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(xx) = self.src(ox, j, self.w) {
                                let d = &mut img[(c * self.h + y) * self.w + xx];
                                *d = *d + cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, C, kh, kw]` kernel viewed as an `[O, C·kh·kw]` matrix without
/// copying, when its trailing three axes are jointly contiguous.
fn kernel_matrix<T: Element>(k: &Tensor<T>) -> Option<Tensor<T>> {
    let (s, d) = (k.strides(), k.shape());
    let collapsible = s[3] == 1 && s[2] == d[3] && s[1] == d[2] * d[3];
    collapsible.then(|| k.strided_view(vec![d[0], d[1] * d[2] * d[3]], vec![s[0], 1], k.offset()))
}

fn kernel_matrix_or_copy<T: Element>(k: &Tensor<T>) -> Tensor<T> {
    kernel_matrix(k).unwrap_or_else(|| {
        let d = k.shape();
        k.deep_copy().reshape(&[d[0], d[1] * d[2] * d[3]]).expect("contiguous")
    })
}

impl<T: Element> Graph<T> {
    /// Cross-correlation of `x: [N, C, H, W]` with `k: [O, C, kh, kw]`.
    ///
    /// The kernel may be a channel slice of a larger parameter; it is read in
    /// place.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = Geometry::new(self.shape(x), self.shape(k), stride, pad)?;
        let xs = self.value(x).to_vec();
        let km = kernel_matrix_or_copy(self.value(k));
        let s = g.spatial();
        let out = Tensor::zeros(&[g.n, g.o, g.oh, g.ow]);
        for n in 0..g.n {
            let cols = g.im2col(&xs, n);
            let dst = out.strided_view(vec![g.o, s], vec![s, 1], n * g.o * s);
            gemm_into(T::one(), &km, &cols, T::zero(), &dst);
        }
        let macs = g.n * g.o * g.patch() * s;
        counters::record_macs(macs);
        counters::record_reads(2 * macs);
        counters::record_writes(out.numel());
        let bytes = out.nbytes();
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, out, bytes))
    }

    pub(crate) fn conv2d_backward(&mut self, x: Var, k: Var, stride: usize, pad: usize, gy: &Tensor<T>) -> Result<()> {
        let g = Geometry::new(self.shape(x), self.shape(k), stride, pad)?;
        let s = g.spatial();
        let gy = gy.contiguous();
        let xs = self.value(x).to_vec();
        let km = kernel_matrix_or_copy(self.value(k));
        let want_k = self.requires_grad(k);
        let want_x = self.requires_grad(x);
        let (gk_target, gk_direct) = if want_k {
            let buf = self.grad_buffer(k);
            match kernel_matrix(&buf) {
                Some(m) => (Some(m), true),
                None => (Some(Tensor::zeros(&[g.o, g.patch()])), false),
            }
        } else {
            (None, false)
        };
        let mut gx = if want_x { vec![T::zero(); xs.len()] } else { Vec::new() };
        let gcols = Tensor::zeros(&[g.patch(), s]);
        for n in 0..g.n {
            let gy_n = gy.strided_view(vec![g.o, s], vec![s, 1], gy.offset() + n * g.o * s);
            if let Some(gk) = &gk_target {
                let cols = g.im2col(&xs, n);
                gemm_into(T::one(), &gy_n, &cols.transpose()?, T::one(), gk);
                counters::record_backward_macs(g.o * g.patch() * s);
            }
            if want_x {
                gemm_into(T::one(), &km.transpose()?, &gy_n, T::zero(), &gcols);
                gcols.with_logical(|c| g.col2im(c, &mut gx, n));
                counters::record_backward_macs(g.o * g.patch() * s);
            }
        }
        if let (Some(tmp), false) = (&gk_target, gk_direct) {
            let buf = self.grad_buffer(k);
            tmp.with_logical(|d| buf.add_logical(d));
        }
        if want_x {
            self.grad_buffer(x).add_logical(&gx);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = g.input(Tensor::from_vec(data.clone(), &[1, 1, 3, 3]).unwrap());
        let k = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).to_vec(), data);
    }

    #[test]
    fn all_ones_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 2, 3, 3], 1.0));
        let k = g.input(Tensor::full(&[1, 3, 3, 3], 1.0));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_slices_of_kernel_are_views() {
        let k = Tensor::<f64>::zeros(&[8, 6, 3, 3]);
        let out_slice = k.slice_view(0, 2, 4).unwrap();
        let in_slice = k.slice_view(1, 1, 3).unwrap();
        assert!(kernel_matrix(&out_slice).is_some());
        assert!(kernel_matrix(&in_slice).is_some());
        assert_eq!(kernel_matrix(&in_slice).unwrap().shape(), &[8, 27]);
    }
}
