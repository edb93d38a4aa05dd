//! Conv / dense / activation / pooling layers with explicit backward passes.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, Ix2, Ix4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{join_name, ParamVisitor, Parameterized};
use crate::error::{KfError, Result};
use crate::exec;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    move || rng.gen_range(-bound..bound)
}

/// 2-D convolution, NCHW layout, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>, // (out_c, in_c, kh, kw)
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
}

impl Conv2d {
    pub fn init(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let mut draw = fan_in_uniform(rng, fan_in);
        let w = Array4::from_shape_simple_fn((out_c, in_c, kernel, kernel), &mut draw);
        let b = Array1::from_shape_simple_fn(out_c, &mut draw);
        Self {
            dw: Array4::zeros(w.raw_dim()),
            db: Array1::zeros(out_c),
            w,
            b,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.w.dim().2;
        let oh = (h + 2 * self.pad).checked_sub(k).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.pad).checked_sub(k).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(KfError::invalid(format!(
                "conv input {h}x{w} too small for kernel {k} stride {} pad {}",
                self.stride, self.pad
            ))),
        }
    }

    /// Unfold `x` into the (batch * oh * ow, in_c * k * k) patch matrix.
    fn im2col(&self, x: &Array4<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let k = self.w.dim().2;
        let (stride, pad) = (self.stride as isize, self.pad as isize);
        let row_len = c * k * k;
        let mut col = Array2::zeros((n * oh * ow, row_len));
        {
            let x_slice = x.as_slice().expect("contiguous input");
            let col_slice = col.as_slice_mut().expect("contiguous col");
            // One chunk per sample; samples are independent.
            exec::for_each_chunk_mut(col_slice, oh * ow * row_len, |s, chunk| {
                let base = s * c * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row0 = (oy * ow + ox) * row_len;
                        for ci in 0..c {
                            for ky in 0..k as usize {
                                let iy = oy as isize * stride + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k as usize {
                                    let ix = ox as isize * stride + kx as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    chunk[row0 + (ci * k + ky) * k + kx] = x_slice
                                        [base + ((ci * h) + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            });
        }
        col
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        if c != self.w.dim().1 {
            return Err(KfError::shape(format!(
                "conv expects {} input channels, got {c}",
                self.w.dim().1
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let out_c = self.w.dim().0;
        let col = self.im2col(x, oh, ow);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((out_c, c * self.w.dim().2 * self.w.dim().3))
            .expect("conv weight reshape");
        // (n*oh*ow, out_c)
        let mut y_mat = col.dot(&w_mat.t());
        for mut row in y_mat.rows_mut() {
            row += &self.b;
        }
        // (n, oh, ow, out_c) -> (n, out_c, oh, ow)
        let y = y_mat
            .into_shape_with_order((n, oh, ow, out_c))
            .expect("conv output reshape")
            .permuted_axes([0, 3, 1, 2]);
        Ok(y.as_standard_layout().to_owned())
    }

    /// Accumulate dw/db and return the gradient with respect to `x`.
    pub fn backward(&mut self, x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (_, out_c, oh, ow) = dy.dim();
        let k = self.w.dim().2;
        let col = self.im2col(x, oh, ow);
        // (n, out_c, oh, ow) -> (n*oh*ow, out_c)
        let dy_mat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((n * oh * ow, out_c))
            .expect("dy reshape")
            .to_owned();
        let dw_mat = dy_mat.t().dot(&col); // (out_c, c*k*k)
        self.dw += &dw_mat
            .into_shape_with_order((out_c, c, k, k))
            .expect("dw reshape");
        self.db += &dy_mat.sum_axis(ndarray::Axis(0));
        // col2im scatter
        let dcol = dy_mat.dot(
            &self
                .w
                .view()
                .into_shape_with_order((out_c, c * k * k))
                .expect("w reshape"),
        );
        let mut dx = Array4::zeros((n, c, h, w));
        let (stride, pad) = (self.stride as isize, self.pad as isize);
        let row_len = c * k * k;
        {
            let dcol_slice = dcol.as_slice().expect("contiguous dcol");
            let dx_slice = dx.as_slice_mut().expect("contiguous dx");
            exec::for_each_chunk_mut(dx_slice, c * h * w, |s, chunk| {
                let col_base = s * oh * ow * row_len;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row0 = col_base + (oy * ow + ox) * row_len;
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = oy as isize * stride + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ox as isize * stride + kx as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    chunk[((ci * h) + iy as usize) * w + ix as usize] +=
                                        dcol_slice[row0 + (ci * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            });
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join_name(prefix, "w"), self.w.view_mut().into_dyn(), self.dw.view_mut().into_dyn());
        f(&join_name(prefix, "b"), self.b.view_mut().into_dyn(), self.db.view_mut().into_dyn());
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join_name(prefix, "w"), self.w.view().into_dyn());
        f(&join_name(prefix, "b"), self.b.view().into_dyn());
    }
}

/// Fully connected layer, y = x W^T + b.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>, // (out, in)
    pub b: Array1<f64>,
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl Dense {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = fan_in_uniform(rng, in_dim);
        let w = Array2::from_shape_simple_fn((out_dim, in_dim), &mut draw);
        let b = Array1::from_shape_simple_fn(out_dim, &mut draw);
        Self { dw: Array2::zeros(w.raw_dim()), db: Array1::zeros(out_dim), w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.w.dim().0
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(KfError::shape(format!(
                "dense expects {} inputs, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.w.t());
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.dw += &dy.t().dot(x);
        self.db += &dy.sum_axis(ndarray::Axis(0));
        dy.dot(&self.w)
    }
}

impl Parameterized for Dense {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join_name(prefix, "w"), self.w.view_mut().into_dyn(), self.dw.view_mut().into_dyn());
        f(&join_name(prefix, "b"), self.b.view_mut().into_dyn(), self.db.view_mut().into_dyn());
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join_name(prefix, "w"), self.w.view().into_dyn());
        f(&join_name(prefix, "b"), self.b.view().into_dyn());
    }
}

pub fn relu(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| v.max(0.0))
}

/// dL/dx for y = relu(x), using the convention relu'(0) = 0.
pub fn relu_backward(x: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Mean over spatial positions: (n, c, h, w) -> (n, c).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ci in 0..c {
            out[[i, ci]] = x.slice(ndarray::s![i, ci, .., ..]).sum() * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(x_dim: (usize, usize, usize, usize), dy: &Array2<f64>) -> Array4<f64> {
    let (n, c, h, w) = x_dim;
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            dx.slice_mut(ndarray::s![i, ci, .., ..]).fill(dy[[i, ci]] * scale);
        }
    }
    dx
}

/// Coerce a dynamic tensor into 4-D, erroring with context on mismatch.
pub fn as4(x: &ArrayD<f64>) -> Result<ndarray::ArrayView4<'_, f64>> {
    x.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| KfError::shape(format!("expected 4-D tensor, got {:?}", x.shape())))
}

/// Coerce a dynamic tensor into 2-D.
pub fn as2(x: &ArrayD<f64>) -> Result<ndarray::ArrayView2<'_, f64>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| KfError::shape(format!("expected 2-D tensor, got {:?}", x.shape())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn conv_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::init(2, 3, 4, 2, 1, &mut rng);
        let x = Array4::from_shape_simple_fn((2, 2, 6, 6), || rng.gen_range(-1.0..1.0));
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 3, 3, 3));
        // Direct dot product at one output location.
        let (n, oc, oy, ox) = (1usize, 2usize, 1usize, 2usize);
        let mut expect = conv.b[oc];
        for ci in 0..2 {
            for ky in 0..4usize {
                for kx in 0..4usize {
                    let iy = oy as isize * 2 + ky as isize - 1;
                    let ix = ox as isize * 2 + kx as isize - 1;
                    if iy >= 0 && iy < 6 && ix >= 0 && ix < 6 {
                        expect += conv.w[[oc, ci, ky, kx]] * x[[n, ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
        assert_abs_diff_eq!(y[[n, oc, oy, ox]], expect, epsilon = 1e-12);
    }

    #[test]
    fn dense_forward_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dense = Dense::init(3, 2, &mut rng);
        let x = ndarray::array![[1.0, -2.0, 0.5]];
        let y = dense.forward(&x).unwrap();
        for o in 0..2 {
            let expect: f64 =
                (0..3).map(|i| dense.w[[o, i]] * x[[0, i]]).sum::<f64>() + dense.b[o];
            assert_abs_diff_eq!(y[[0, o]], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn gap_and_backward_shapes() {
        let x = Array4::from_elem((1, 2, 3, 3), 2.0);
        let y = global_avg_pool(&x);
        assert_abs_diff_eq!(y[[0, 0]], 2.0, epsilon = 1e-15);
        let dy = ndarray::array![[9.0, 18.0]];
        let dx = global_avg_pool_backward((1, 2, 3, 3), &dy);
        assert_abs_diff_eq!(dx[[0, 0, 1, 1]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dx[[0, 1, 2, 0]], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn conv_rejects_too_small_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::init(1, 1, 4, 2, 1, &mut rng);
        let x = Array4::zeros((1, 1, 1, 1));
        assert!(conv.forward(&x).is_err());
    }
}
