//! Layer implementations with explicit forward/backward passes.
//! Convolutions run as chunked-batch im2col + GEMM; backward recomputes
//! the column matrix from the cached input instead of holding it.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView3, Axis, Dimension, Ix1, Ix2};

use super::init::Initializer;
use super::{Float, Module, Param};
use crate::error::{Error, Result};

fn conv_out(dim: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - kernel) / stride + 1
}

/// Samples per GEMM chunk, capping the column matrix at ~64 MB of f32
/// so the batched convolution keeps a bounded working set.
fn conv_chunk(n: usize, k: usize, hw: usize) -> usize {
    const MAX_COL_ELEMS: usize = 16 * 1024 * 1024;
    (MAX_COL_ELEMS / (k * hw).max(1)).clamp(1, n.max(1))
}

/// Valid output-column range for one kernel offset: oj such that
/// 0 <= oj*stride + k - pad < dim.
fn valid_out_range(dim: usize, k: usize, stride: usize, pad: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = (dim + pad).saturating_sub(k).div_ceil(stride).min(out);
    (lo.min(hi_excl), hi_excl)
}

/// Fill one sample's columns into `col_rows[row][sample block]`. The
/// inner loops run over contiguous slices so the copies vectorize.
fn im2col_into<F: Float>(
    x: &ArrayView3<F>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
    col: &mut Array2<F>,
    col_offset: usize,
) {
    let (cin, h, w) = x.dim();
    let (kh, kw) = kernel;
    let (hout, wout) = out;
    let xs = x.as_slice().expect("input is standard layout");
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut col_row = col.row_mut(row);
                let dst = col_row.as_slice_mut().expect("col row is contiguous");
                let (oj_lo, oj_hi) = valid_out_range(w, kj, stride, pad, wout);
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_base = (c * h + ii as usize) * w;
                    let dst_base = col_offset + oi * wout;
                    if stride == 1 {
                        let jj0 = oj_lo + kj - pad;
                        dst[dst_base + oj_lo..dst_base + oj_hi]
                            .copy_from_slice(&xs[src_base + jj0..src_base + jj0 + (oj_hi - oj_lo)]);
                    } else {
                        for oj in oj_lo..oj_hi {
                            let jj = oj * stride + kj - pad;
                            dst[dst_base + oj] = xs[src_base + jj];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of one sample's column block back onto an input-shaped
/// tensor.
fn col2im_add<F: Float>(
    dcol: &Array2<F>,
    dx: &mut ndarray::ArrayViewMut3<F>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
    col_offset: usize,
) {
    let (cin, h, w) = dx.dim();
    let (kh, kw) = kernel;
    let (hout, wout) = out;
    let dxs = dx.as_slice_mut().expect("dx is standard layout");
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dcol_row = dcol.row(row);
                let src = dcol_row.as_slice().expect("dcol row is contiguous");
                let (oj_lo, oj_hi) = valid_out_range(w, kj, stride, pad, wout);
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_base = (c * h + ii as usize) * w;
                    let src_base = col_offset + oi * wout;
                    for oj in oj_lo..oj_hi {
                        let jj = oj * stride + kj - pad;
                        dxs[dst_base + jj] = dxs[dst_base + jj] + src[src_base + oj];
                    }
                }
            }
        }
    }
}

pub struct Conv2d<F: Float> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub stride: usize,
    pub padding: usize,
    kernel: (usize, usize),
    in_channels: usize,
    out_channels: usize,
    cache: Option<Array4<F>>,
}

impl<F: Float> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(init.variance_scaled(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
        ));
        let bias = bias.then(|| Param::new(ArrayD::zeros(ndarray::IxDyn(&[out_channels]))));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            kernel: (kernel, kernel),
            in_channels,
            out_channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array4<F>> {
        let (n, cin, h, w) = x.dim();
        if cin != self.in_channels {
            return Err(Error::Argument(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels
            )));
        }
        let hout = conv_out(h, self.kernel.0, self.stride, self.padding);
        let wout = conv_out(w, self.kernel.1, self.stride, self.padding);
        let k = self.in_channels * self.kernel.0 * self.kernel.1;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .expect("weight is contiguous");
        let hw = hout * wout;
        let cout = self.out_channels;
        let mut y = Array4::zeros((n, cout, hout, wout));
        let chunk = conv_chunk(n, k, hw);
        for base in (0..n).step_by(chunk) {
            let m = chunk.min(n - base);
            let mut col = Array2::zeros((k, m * hw));
            for i in 0..m {
                im2col_into(
                    &x.index_axis(Axis(0), base + i),
                    self.kernel,
                    self.stride,
                    self.padding,
                    (hout, wout),
                    &mut col,
                    i * hw,
                );
            }
            let y_mat = wmat.dot(&col); // (cout, m*hw)
            let ym = y_mat.as_slice().expect("gemm output is contiguous");
            let ys = y.as_slice_mut().expect("output is standard layout");
            for i in 0..m {
                for co in 0..cout {
                    let dst = ((base + i) * cout + co) * hw;
                    let src = co * (m * hw) + i * hw;
                    ys[dst..dst + hw].copy_from_slice(&ym[src..src + hw]);
                }
            }
        }
        if let Some(b) = &self.bias {
            let bv = b.value.view().into_dimensionality::<Ix1>().unwrap();
            for c in 0..self.out_channels {
                y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bv[c]);
            }
        }
        self.cache = train.then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let x = self.cache.take().expect("conv backward without forward");
        let (n, _, h, w) = x.dim();
        let (_, _, hout, wout) = dy.dim();
        let k = self.in_channels * self.kernel.0 * self.kernel.1;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .unwrap();
        let hw = hout * wout;
        let cout = self.out_channels;
        let mut dwmat = Array2::<F>::zeros((cout, k));
        let mut dx = Array4::zeros(x.raw_dim());
        let chunk = conv_chunk(n, k, hw);
        for base in (0..n).step_by(chunk) {
            let m = chunk.min(n - base);
            let mut col = Array2::zeros((k, m * hw));
            let mut dy_mat = Array2::zeros((cout, m * hw));
            {
                let dm = dy_mat.as_slice_mut().unwrap();
                let ds = dy.as_slice().expect("dy is standard layout");
                for i in 0..m {
                    im2col_into(
                        &x.index_axis(Axis(0), base + i),
                        self.kernel,
                        self.stride,
                        self.padding,
                        (hout, wout),
                        &mut col,
                        i * hw,
                    );
                    for co in 0..cout {
                        let src = ((base + i) * cout + co) * hw;
                        let dst = co * (m * hw) + i * hw;
                        dm[dst..dst + hw].copy_from_slice(&ds[src..src + hw]);
                    }
                }
            }
            dwmat = dwmat + dy_mat.dot(&col.t());
            let dcol = wmat.t().dot(&dy_mat); // (k, m*hw)
            for i in 0..m {
                col2im_add(
                    &dcol,
                    &mut dx.index_axis_mut(Axis(0), base + i),
                    self.kernel,
                    self.stride,
                    self.padding,
                    (hout, wout),
                    i * hw,
                );
            }
        }
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_channels, k))
                .unwrap();
            gw += &dwmat;
        }
        if let Some(b) = &mut self.bias {
            let mut gb = b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for c in 0..self.out_channels {
                gb[c] = gb[c] + dy.slice(s![.., c, .., ..]).sum();
            }
        }
        let _ = (h, w);
        dx
    }
}

impl<F: Float> Module<F> for Conv2d<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub struct BatchNorm2d<F: Float> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub momentum: F,
    pub eps: F,
    channels: usize,
    cache: Option<(Array4<F>, Array1<F>)>, // (x_hat, inv_std)
}

impl<F: Float> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(ndarray::IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(ndarray::IxDyn(&[channels])),
            running_var: ArrayD::ones(ndarray::IxDyn(&[channels])),
            momentum: F::from_f64(0.1).unwrap(),
            eps: F::from_f64(1e-5).unwrap(),
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array4<F>> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Argument(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let count = F::from_usize(n * h * w).unwrap();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array4::zeros(x.raw_dim());
        if train {
            let mut x_hat = Array4::zeros(x.raw_dim());
            let mut inv_stds = Array1::zeros(c);
            let rm = self.running_mean.view_mut().into_dimensionality::<Ix1>().unwrap();
            let rv = self.running_var.view_mut().into_dimensionality::<Ix1>().unwrap();
            let (mut rm, mut rv) = (rm, rv);
            for ch in 0..c {
                let plane = x.slice(s![.., ch, .., ..]);
                let mean = plane.sum() / count;
                let var = plane.mapv(|v| (v - mean) * (v - mean)).sum() / count;
                let inv_std = F::one() / (var + self.eps).sqrt();
                inv_stds[ch] = inv_std;
                rm[ch] = rm[ch] * (F::one() - self.momentum) + mean * self.momentum;
                rv[ch] = rv[ch] * (F::one() - self.momentum) + var * self.momentum;
                let xh = plane.mapv(|v| (v - mean) * inv_std);
                x_hat.slice_mut(s![.., ch, .., ..]).assign(&xh);
                y.slice_mut(s![.., ch, .., ..])
                    .assign(&xh.mapv(|v| v * gamma[ch] + beta[ch]));
            }
            self.cache = Some((x_hat, inv_stds));
        } else {
            let rm = self.running_mean.view().into_dimensionality::<Ix1>().unwrap();
            let rv = self.running_var.view().into_dimensionality::<Ix1>().unwrap();
            for ch in 0..c {
                let inv_std = F::one() / (rv[ch] + self.eps).sqrt();
                let (m, g, b) = (rm[ch], gamma[ch], beta[ch]);
                y.slice_mut(s![.., ch, .., ..])
                    .assign(&x.slice(s![.., ch, .., ..]).mapv(|v| (v - m) * inv_std * g + b));
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (x_hat, inv_stds) = self.cache.take().expect("batchnorm backward without forward");
        let (n, c, h, w) = dy.dim();
        let count = F::from_usize(n * h * w).unwrap();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut dgamma = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        let mut dbeta = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let dy_c = dy.slice(s![.., ch, .., ..]);
            let xh_c = x_hat.slice(s![.., ch, .., ..]);
            let sum_dy = dy_c.sum();
            let sum_dy_xh = (&dy_c * &xh_c).sum();
            dgamma[ch] = dgamma[ch] + sum_dy_xh;
            dbeta[ch] = dbeta[ch] + sum_dy;
            let scale = gamma[ch] * inv_stds[ch] / count;
            let dxc = ndarray::Zip::from(&dy_c).and(&xh_c).map_collect(|&dyv, &xhv| {
                scale * (count * dyv - sum_dy - xhv * sum_dy_xh)
            });
            dx.slice_mut(s![.., ch, .., ..]).assign(&dxc);
        }
        dx
    }
}

impl<F: Float> Module<F> for BatchNorm2d<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ArrayD<F>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Rectifier over any array dimensionality.
pub struct Relu<F: Float, D: Dimension> {
    mask: Option<ndarray::Array<bool, D>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Float, D: Dimension> Default for Relu<F, D> {
    fn default() -> Self {
        Relu {
            mask: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Float, D: Dimension> Relu<F, D> {
    pub fn forward(&mut self, x: &ndarray::Array<F, D>, train: bool) -> ndarray::Array<F, D> {
        if train {
            self.mask = Some(x.mapv(|v| v > F::zero()));
        }
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn backward(&mut self, dy: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        let mask = self.mask.take().expect("relu backward without forward");
        ndarray::Zip::from(dy)
            .and(&mask)
            .map_collect(|&d, &m| if m { d } else { F::zero() })
    }
}

pub struct MaxPool2d<F: Float> {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(ndarray::Ix4, Array4<usize>)>, // input dims, argmax (flattened h*w index)
    _marker: std::marker::PhantomData<F>,
}

impl<F: Float> MaxPool2d<F> {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array4<F>> {
        let (n, c, h, w) = x.dim();
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Argument(format!(
                "pooling window {} larger than padded input {h}x{w}",
                self.kernel
            )));
        }
        let hout = conv_out(h, self.kernel, self.stride, self.padding);
        let wout = conv_out(w, self.kernel, self.stride, self.padding);
        let mut y = Array4::zeros((n, c, hout, wout));
        let mut argmax = Array4::zeros((n, c, hout, wout));
        for i in 0..n {
            for ch in 0..c {
                let plane = x.slice(s![i, ch, .., ..]);
                for oi in 0..hout {
                    for oj in 0..wout {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for ki in 0..self.kernel {
                            let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let v = plane[[ii as usize, jj as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = ii as usize * w + jj as usize;
                                }
                            }
                        }
                        y[[i, ch, oi, oj]] = best;
                        argmax[[i, ch, oi, oj]] = best_idx;
                    }
                }
            }
        }
        self.cache = train.then_some((ndarray::Ix4(n, c, h, w), argmax));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (in_dim, argmax) = self.cache.take().expect("maxpool backward without forward");
        let (_, _, h, w) = (in_dim[0], in_dim[1], in_dim[2], in_dim[3]);
        let mut dx = Array4::zeros((in_dim[0], in_dim[1], in_dim[2], in_dim[3]));
        let (n, c, hout, wout) = dy.dim();
        for i in 0..n {
            for ch in 0..c {
                for oi in 0..hout {
                    for oj in 0..wout {
                        let idx = argmax[[i, ch, oi, oj]];
                        let (ii, jj) = (idx / w, idx % w);
                        dx[[i, ch, ii, jj]] = dx[[i, ch, ii, jj]] + dy[[i, ch, oi, oj]];
                    }
                }
            }
        }
        let _ = h;
        dx
    }
}

/// Global average pooling: (n, c, h, w) -> (n, c).
pub struct GlobalAvgPool<F: Float> {
    cache: Option<ndarray::Ix4>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Float> Default for GlobalAvgPool<F> {
    fn default() -> Self {
        GlobalAvgPool {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Float> GlobalAvgPool<F> {
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array2<F> {
        let (n, c, h, w) = x.dim();
        let scale = F::one() / F::from_usize(h * w).unwrap();
        let mut y = Array2::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                y[[i, ch]] = x.slice(s![i, ch, .., ..]).sum() * scale;
            }
        }
        if train {
            self.cache = Some(ndarray::Ix4(n, c, h, w));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array4<F> {
        let dim = self.cache.take().expect("gap backward without forward");
        let (n, c, h, w) = (dim[0], dim[1], dim[2], dim[3]);
        let scale = F::one() / F::from_usize(h * w).unwrap();
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                dx.slice_mut(s![i, ch, .., ..]).fill(dy[[i, ch]] * scale);
            }
        }
        dx
    }
}

pub struct Linear<F: Float> {
    pub weight: Param<F>, // [out, in]
    pub bias: Param<F>,   // [out]
    in_features: usize,
    out_features: usize,
    cache: Option<Array2<F>>,
}

impl<F: Float> Linear<F> {
    pub fn new(init: &mut Initializer, in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Param::new(init.variance_scaled(&[out_features, in_features], in_features)),
            bias: Param::new(ArrayD::zeros(ndarray::IxDyn(&[out_features]))),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, train: bool) -> Result<Array2<F>> {
        if x.ncols() != self.in_features {
            return Err(Error::Argument(format!(
                "linear expects {} input features, got {}",
                self.in_features,
                x.ncols()
            )));
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        self.cache = train.then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("linear backward without forward");
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw += &dy.t().dot(&x);
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &dy.sum_axis(Axis(0));
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        dy.dot(&w)
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }
}

impl<F: Float> Module<F> for Linear<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Flatten (n, c, h, w) -> (n, c*h*w) and back.
pub struct Flatten<F: Float> {
    cache: Option<ndarray::Ix4>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Float> Default for Flatten<F> {
    fn default() -> Self {
        Flatten {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Float> Flatten<F> {
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array2<F> {
        let dim = x.raw_dim();
        if train {
            self.cache = Some(ndarray::Ix4(dim[0], dim[1], dim[2], dim[3]));
        }
        x.to_owned()
            .into_shape_with_order((dim[0], dim[1] * dim[2] * dim[3]))
            .expect("standard layout")
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array4<F> {
        let dim = self.cache.take().expect("flatten backward without forward");
        dy.to_owned()
            .into_shape_with_order((dim[0], dim[1], dim[2], dim[3]))
            .expect("standard layout")
    }
}
