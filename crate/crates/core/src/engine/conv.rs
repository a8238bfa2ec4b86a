//! 2-D convolution via im2col and a dense GEMM.
//!
//! Each sample is lowered to a `(Cin*k*k) x (Hout*Wout)` column matrix; the
//! kernel viewed as `Cout x (Cin*k*k)` multiplies it. The backward pass
//! recomputes the columns instead of caching them, and accumulates the kernel
//! gradient sample by sample in batch order so reductions are reproducible.

use crate::array::{gemm, DenseArray, MatRef, Scalar};
use crate::error::{Error, Result};

/// Static geometry of one convolution applied to one input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::config("conv kernel and stride must be positive"));
        }
        if in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return Err(Error::config(format!(
                "conv kernel {kernel} larger than padded input {in_h}x{in_w} (pad {padding})"
            )));
        }
        Ok(ConvGeom {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Lower one `(Cin, H, W)` sample into its column matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let (oh, ow) = (g.out_h, g.out_w);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a column matrix back onto a `(Cin, H, W)` gradient buffer.
pub fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let (oh, ow) = (g.out_h, g.out_w);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched forward: `x` is `(N, Cin, H, W)`, `kernel` is `(Cout, Cin, k, k)`.
pub fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    x: &DenseArray<T>,
    kernel: &DenseArray<T>,
    bias: Option<&DenseArray<T>>,
) -> DenseArray<T> {
    let n = x.shape()[0];
    let mut out = DenseArray::zeros(&[n, g.out_channels, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    let w = MatRef::new(kernel.data(), g.out_channels, g.col_rows());
    for i in 0..n {
        let xi = x.item(i);
        let col_ref = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols[..]
        };
        let yi = out.item_mut(i);
        gemm(
            w,
            MatRef::new(col_ref, g.col_rows(), g.col_cols()),
            T::zero(),
            yi,
        );
        if let Some(b) = bias {
            let hw = g.col_cols();
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut yi[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(grad_input, grad_kernel, grad_bias)`.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &DenseArray<T>,
    kernel: &DenseArray<T>,
    dy: &DenseArray<T>,
    with_bias: bool,
    need_input_grad: bool,
) -> (DenseArray<T>, DenseArray<T>, Option<DenseArray<T>>) {
    let n = x.shape()[0];
    let mut dx = DenseArray::zeros(x.shape());
    let mut dk = DenseArray::zeros(kernel.shape());
    let mut db = with_bias.then(|| DenseArray::zeros(&[g.out_channels]));
    let rows = g.col_rows();
    let hw = g.col_cols();
    let mut cols = vec![T::zero(); rows * hw];
    let mut dcols = vec![T::zero(); rows * hw];
    let w = MatRef::new(kernel.data(), g.out_channels, rows);
    for i in 0..n {
        let xi = x.item(i);
        let dyi = dy.item(i);
        let col_ref: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols
        };
        // dK += dY_i * cols_i^T
        gemm(
            MatRef::new(dyi, g.out_channels, hw),
            MatRef::new(col_ref, rows, hw).t(),
            T::one(),
            dk.data_mut(),
        );
        if let Some(db) = db.as_mut() {
            for (co, slot) in db.data_mut().iter_mut().enumerate() {
                *slot += dyi[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if need_input_grad {
            let dxi = dx.item_mut(i);
            if g.is_pointwise() {
                gemm(w.t(), MatRef::new(dyi, g.out_channels, hw), T::zero(), dxi);
            } else {
                gemm(
                    w.t(),
                    MatRef::new(dyi, g.out_channels, hw),
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(g, &dcols, dxi);
            }
        }
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_geometry() {
        let g = ConvGeom::new(2, 4, 3, 1, 1, 56, 56).unwrap();
        assert_eq!((g.out_h, g.out_w), (56, 56));
        let g = ConvGeom::new(2, 4, 3, 2, 1, 56, 56).unwrap();
        assert_eq!((g.out_h, g.out_w), (28, 28));
        let g = ConvGeom::new(2, 4, 7, 2, 3, 224, 224).unwrap();
        assert_eq!((g.out_h, g.out_w), (112, 112));
        let g = ConvGeom::new(2, 4, 1, 2, 0, 56, 56).unwrap();
        assert_eq!((g.out_h, g.out_w), (28, 28));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c
        let g = ConvGeom::new(2, 1, 3, 2, 1, 5, 4).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&g, &c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
