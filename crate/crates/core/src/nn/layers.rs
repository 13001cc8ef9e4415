use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Params;

const LN_EPS: f64 = 1e-5;

fn normal_init<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Affine map `y = x W^T + b` with `W: [out, in]`, inputs `[batch, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_vec((out_dim, in_dim), normal_init(rng, out_dim * in_dim, std))
            .unwrap();
        Linear {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, gout: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w += &gout.t().dot(x);
        g.b += &gout.sum_axis(Axis(0));
        gout.dot(&self.w)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice().unwrap());
        f(self.b.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_slice_mut().unwrap());
        f(self.b.as_slice_mut().unwrap());
    }
}

/// 2D convolution over `[batch, in_c, h, w]`, square kernel, zero padding.
/// Implemented via im2col so the inner loop is a matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = Array4::from_shape_vec(
            (out_c, in_c, kernel, kernel),
            normal_init(rng, out_c * fan_in, std),
        )
        .unwrap();
        Conv2d {
            w,
            b: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array4::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let oc = self.out_channels();
        let k = self.kernel();
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, self.in_channels() * k * k))
            .unwrap();
        let mut out = Array4::zeros((n, oc, oh, ow));
        for i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), i), k, self.stride, self.pad);
            let mut o = w_mat.dot(&cols); // [oc, oh*ow]
            for (mut row, &bias) in o.rows_mut().into_iter().zip(self.b.iter()) {
                row += bias;
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&o.into_shape_with_order((oc, oh, ow)).unwrap());
        }
        out
    }

    pub fn backward(&self, x: &Array4<f64>, gout: &Array4<f64>, g: &mut Conv2d) -> Array4<f64> {
        let (n, ic, h, w) = x.dim();
        let (_, oc, oh, ow) = gout.dim();
        let k = self.kernel();
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .unwrap();
        let mut gx = Array4::zeros((n, ic, h, w));
        let mut gw_mat = Array2::<f64>::zeros((oc, ic * k * k));
        for i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), i), k, self.stride, self.pad);
            let go = gout
                .index_axis(Axis(0), i)
                .into_shape_with_order((oc, oh * ow))
                .unwrap();
            gw_mat += &go.dot(&cols.t());
            g.b += &go.sum_axis(Axis(1));
            let gcols = w_mat.t().dot(&go); // [ic*k*k, oh*ow]
            let gxi = col2im(&gcols, ic, h, w, k, self.stride, self.pad);
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
        }
        g.w += &gw_mat.into_shape_with_order((oc, ic, k, k)).unwrap();
        gx
    }
}

impl Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice().unwrap());
        f(self.b.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_slice_mut().unwrap());
        f(self.b.as_slice_mut().unwrap());
    }
}

fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (ic, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((ic * k * k, oh * ow));
    for c in 0..ic {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * ow + oj)] = x[(c, yi as usize, xj as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    ic: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Array3::zeros((ic, h, w));
    for c in 0..ic {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        out[(c, yi as usize, xj as usize)] += cols[(row, oi * ow + oj)];
                    }
                }
            }
        }
    }
    out
}

/// Layer normalization over the feature axis of `[batch, dim]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (v, (&g, &b)) in row
                .iter_mut()
                .zip(self.gamma.iter().zip(self.beta.iter()))
            {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }

    pub fn backward(&self, x: &Array2<f64>, gout: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        let mut gx = Array2::zeros(x.raw_dim());
        for ((row_x, row_go), mut row_gx) in x
            .rows()
            .into_iter()
            .zip(gout.rows())
            .zip(gx.rows_mut())
        {
            let d = row_x.len() as f64;
            let mean = row_x.sum() / d;
            let var = row_x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            // xhat = (x - mean) * inv; gxhat = gout * gamma
            let mut sum_gxhat = 0.0;
            let mut sum_gxhat_xhat = 0.0;
            for i in 0..row_x.len() {
                let xhat = (row_x[i] - mean) * inv;
                let gxhat = row_go[i] * self.gamma[i];
                sum_gxhat += gxhat;
                sum_gxhat_xhat += gxhat * xhat;
                g.gamma[i] += row_go[i] * xhat;
                g.beta[i] += row_go[i];
            }
            for i in 0..row_x.len() {
                let xhat = (row_x[i] - mean) * inv;
                let gxhat = row_go[i] * self.gamma[i];
                row_gx[i] = inv * (gxhat - sum_gxhat / d - xhat * sum_gxhat_xhat / d);
            }
        }
        gx
    }
}

impl Params for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.gamma.as_slice().unwrap());
        f(self.beta.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.gamma.as_slice_mut().unwrap());
        f(self.beta.as_slice_mut().unwrap());
    }
}

/// Layer normalization across the channel axis of `[batch, c, h, w]` feature
/// maps, applied independently at every spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormChan {
    pub inner: LayerNorm,
}

impl LayerNormChan {
    pub fn new(channels: usize) -> Self {
        LayerNormChan {
            inner: LayerNorm::new(channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNormChan {
            inner: self.inner.zeros_like(),
        }
    }

    fn to_rows(x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        // [n,c,h,w] -> [n*h*w, c]
        let mut rows = Array2::zeros((n * h * w, c));
        for i in 0..n {
            for y in 0..h {
                for z in 0..w {
                    for ch in 0..c {
                        rows[((i * h + y) * w + z, ch)] = x[(i, ch, y, z)];
                    }
                }
            }
        }
        rows
    }

    fn from_rows(rows: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        let mut out = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for y in 0..h {
                for z in 0..w {
                    for ch in 0..c {
                        out[(i, ch, y, z)] = rows[((i * h + y) * w + z, ch)];
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let rows = Self::to_rows(x);
        let out = self.inner.forward(&rows);
        Self::from_rows(&out, n, c, h, w)
    }

    pub fn backward(
        &self,
        x: &Array4<f64>,
        gout: &Array4<f64>,
        g: &mut LayerNormChan,
    ) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let rows = Self::to_rows(x);
        let grows = Self::to_rows(gout);
        let gx = self.inner.backward(&rows, &grows, &mut g.inner);
        Self::from_rows(&gx, n, c, h, w)
    }
}

impl Params for LayerNormChan {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.inner.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.inner.visit_mut(f);
    }
}

pub fn silu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_backward<D: Dimension>(
    x: &ndarray::Array<f64, D>,
    gout: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = gout.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

pub fn upsample_nearest2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for z in 0..w {
                    let v = x[(i, ch, y, z)];
                    out[(i, ch, 2 * y, 2 * z)] = v;
                    out[(i, ch, 2 * y + 1, 2 * z)] = v;
                    out[(i, ch, 2 * y, 2 * z + 1)] = v;
                    out[(i, ch, 2 * y + 1, 2 * z + 1)] = v;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(gout: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = gout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for z in 0..w {
                    gx[(i, ch, y, z)] = gout[(i, ch, 2 * y, 2 * z)]
                        + gout[(i, ch, 2 * y + 1, 2 * z)]
                        + gout[(i, ch, 2 * y, 2 * z + 1)]
                        + gout[(i, ch, 2 * y + 1, 2 * z + 1)];
                }
            }
        }
    }
    gx
}

pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn global_avg_pool_backward(gout: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = gout.dim();
    let mut gx = Array4::zeros((n, c, h, w));
    let scale = 1.0 / (h * w) as f64;
    for i in 0..n {
        for ch in 0..c {
            let v = gout[(i, ch)] * scale;
            gx.slice_mut(ndarray::s![i, ch, .., ..]).fill(v);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{finite_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        normal_init(rng, n, 1.0)
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let layer = Linear::new(&mut rng, 3, 5);
        let x = Array2::from_shape_vec((2, 3), randn(&mut rng, 6)).unwrap();
        // loss = sum(forward^2)/2 so gout = forward output
        let mut g = layer.zeros_like();
        let y = layer.forward(&x);
        let gx = layer.backward(&x, &y, &mut g);

        let mut probe = layer.clone();
        let flat = probe.to_flat();
        let num = finite_diff(&flat, 1e-6, |p| {
            probe.assign_flat(p);
            probe.forward(&x).mapv(|v| v * v).sum() / 2.0
        });
        assert!(max_rel_err(&g.to_flat(), &num) < 1e-5);

        let num_x = finite_diff(x.as_slice().unwrap(), 1e-6, |p| {
            let xp = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
            layer.forward(&xp).mapv(|v| v * v).sum() / 2.0
        });
        assert!(max_rel_err(gx.as_slice().unwrap(), &num_x) < 1e-5);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let mut rng = ChaCha20Rng::seed_from_u64(7);
            let layer = Conv2d::new(&mut rng, 2, 3, k, stride, pad);
            let x = Array4::from_shape_vec((2, 2, 6, 6), randn(&mut rng, 144)).unwrap();
            let y = layer.forward(&x);
            let mut g = layer.zeros_like();
            let gx = layer.backward(&x, &y, &mut g);

            let mut probe = layer.clone();
            let flat = probe.to_flat();
            let num = finite_diff(&flat, 1e-6, |p| {
                probe.assign_flat(p);
                probe.forward(&x).mapv(|v| v * v).sum() / 2.0
            });
            assert!(max_rel_err(&g.to_flat(), &num) < 1e-4, "params s{stride} p{pad} k{k}");

            let num_x = finite_diff(x.as_slice().unwrap(), 1e-6, |p| {
                let xp = Array4::from_shape_vec((2, 2, 6, 6), p.to_vec()).unwrap();
                layer.forward(&xp).mapv(|v| v * v).sum() / 2.0
            });
            assert!(max_rel_err(gx.as_slice().unwrap(), &num_x) < 1e-4, "input s{stride} p{pad} k{k}");
        }
    }

    #[test]
    fn conv2d_output_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let layer = Conv2d::new(&mut rng, 1, 4, 3, 2, 1);
        let x = Array4::zeros((1, 1, 16, 16));
        assert_eq!(layer.forward(&x).dim(), (1, 4, 8, 8));
    }

    #[test]
    fn layernorm_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut layer = LayerNorm::new(4);
        // non-trivial gamma/beta
        layer.gamma = Array1::from_vec(randn(&mut rng, 4));
        layer.beta = Array1::from_vec(randn(&mut rng, 4));
        let x = Array2::from_shape_vec((3, 4), randn(&mut rng, 12)).unwrap();
        let y = layer.forward(&x);
        let mut g = layer.zeros_like();
        let gx = layer.backward(&x, &y, &mut g);

        let mut probe = layer.clone();
        let flat = probe.to_flat();
        let num = finite_diff(&flat, 1e-6, |p| {
            probe.assign_flat(p);
            probe.forward(&x).mapv(|v| v * v).sum() / 2.0
        });
        assert!(max_rel_err(&g.to_flat(), &num) < 1e-4);

        let num_x = finite_diff(x.as_slice().unwrap(), 1e-6, |p| {
            let xp = Array2::from_shape_vec((3, 4), p.to_vec()).unwrap();
            layer.forward(&xp).mapv(|v| v * v).sum() / 2.0
        });
        assert!(max_rel_err(gx.as_slice().unwrap(), &num_x) < 1e-4);
    }

    #[test]
    fn channel_layernorm_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let layer = LayerNormChan::new(3);
        let x = Array4::from_shape_vec((2, 3, 2, 2), randn(&mut rng, 24)).unwrap();
        let y = layer.forward(&x);
        let mut g = layer.zeros_like();
        let gx = layer.backward(&x, &y, &mut g);

        let num_x = finite_diff(x.as_slice().unwrap(), 1e-6, |p| {
            let xp = Array4::from_shape_vec((2, 3, 2, 2), p.to_vec()).unwrap();
            layer.forward(&xp).mapv(|v| v * v).sum() / 2.0
        });
        assert!(max_rel_err(gx.as_slice().unwrap(), &num_x) < 1e-4);

        let mut probe = LayerNormChan::new(3);
        let flat = probe.to_flat();
        let num = finite_diff(&flat, 1e-6, |p| {
            probe.assign_flat(p);
            probe.forward(&x).mapv(|v| v * v).sum() / 2.0
        });
        // grads were computed at gamma=1, beta=0 (the fresh layer state)
        assert!(max_rel_err(&g.to_flat(), &num) < 1e-4);
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = Array1::from_vec(randn(&mut rng, 8));
        let y = silu(&x);
        let gx = silu_backward(&x, &y);
        let num = finite_diff(x.as_slice().unwrap(), 1e-6, |p| {
            let xp = Array1::from_vec(p.to_vec());
            silu(&xp).mapv(|v| v * v).sum() / 2.0
        });
        assert!(max_rel_err(gx.as_slice().unwrap(), &num) < 1e-5);
    }

    #[test]
    fn upsample_and_pool_are_adjoint_shaped() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = Array4::from_shape_vec((1, 2, 3, 3), randn(&mut rng, 18)).unwrap();
        let up = upsample_nearest2(&x);
        assert_eq!(up.dim(), (1, 2, 6, 6));
        let g = upsample_nearest2_backward(&up);
        // each input pixel fans out to four copies
        assert!((g[(0, 0, 0, 0)] - 4.0 * x[(0, 0, 0, 0)]).abs() < 1e-12);

        let pooled = global_avg_pool(&x);
        assert_eq!(pooled.dim(), (1, 2));
        assert!((pooled[(0, 0)] - x.slice(ndarray::s![0, 0, .., ..]).mean().unwrap()).abs() < 1e-12);
        let gp = global_avg_pool_backward(&pooled, 3, 3);
        assert_eq!(gp.dim(), (1, 2, 3, 3));
        assert!((gp[(0, 0, 1, 1)] - pooled[(0, 0)] / 9.0).abs() < 1e-12);
    }
}
