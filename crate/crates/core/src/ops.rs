//! Differentiable tensor kernels that candle either lacks or runs slowly on CPU.
//!
//! Convolution is im2col + GEMM in both directions, processed in column chunks
//! so that full-resolution decoder convolutions never materialize the whole
//! unfolded input. Max pooling supports padding. Bilinear resizing is expressed
//! as two matrix products so its gradient comes from matmul.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Error, Result};

/// Maximum number of unfolded elements held at once by the convolution kernels.
const COLUMN_CHUNK_ELEMS: usize = 1 << 22;

pub(crate) trait Elem: WithDType + Copy + PartialOrd + std::ops::AddAssign {
    const NEG_INF: Self;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Elem for f32 {
    const NEG_INF: Self = f32::NEG_INFINITY;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Elem for f64 {
    const NEG_INF: Self = f64::NEG_INFINITY;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Output side length of a strided window: `floor((len + 2p - k) / s) + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("kernel and stride must be positive".into()));
    }
    let padded = len + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "input side {len} with padding {padding} is smaller than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn out_len(&self) -> usize {
        self.oh * self.ow
    }
    fn chunk(&self) -> usize {
        (COLUMN_CHUNK_ELEMS / self.rows().max(1)).clamp(1, self.out_len())
    }
}

fn im2col<T: Elem>(x: &[T], g: &ConvGeom, l0: usize, lc: usize, cols: &mut [T]) {
    let zero = T::from_f64(0.0);
    let hw = g.h * g.w;
    for ci in 0..g.cin_g() {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * lc..(row + 1) * lc];
                for (idx, d) in dst.iter_mut().enumerate() {
                    let l = l0 + idx;
                    let iy = (l / g.ow * g.stride + ky) as isize - g.pad as isize;
                    let ix = (l % g.ow * g.stride + kx) as isize - g.pad as isize;
                    *d = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize]
                    } else {
                        zero
                    };
                }
            }
        }
    }
}

fn col2im_add<T: Elem>(cols: &[T], g: &ConvGeom, l0: usize, lc: usize, dx: &mut [T]) {
    let hw = g.h * g.w;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * lc..(row + 1) * lc];
                for (idx, &v) in src.iter().enumerate() {
                    let l = l0 + idx;
                    let iy = (l / g.ow * g.stride + ky) as isize - g.pad as isize;
                    let ix = (l % g.ow * g.stride + kx) as isize - g.pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize] += v;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Elem>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let out_len = g.out_len();
    let rows = g.rows();
    let chunk = g.chunk();
    let mut out = vec![T::from_f64(0.0); g.batch * g.cout * out_len];
    let mut cols = vec![T::from_f64(0.0); rows * chunk];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let x_off = (n * g.cin + grp * g.cin_g()) * g.h * g.w;
            let xg = &x[x_off..x_off + g.cin_g() * g.h * g.w];
            let wg = &w[grp * g.cout_g() * rows..(grp + 1) * g.cout_g() * rows];
            let o_off = (n * g.cout + grp * g.cout_g()) * out_len;
            let mut l0 = 0;
            while l0 < out_len {
                let lc = chunk.min(out_len - l0);
                im2col(xg, g, l0, lc, &mut cols);
                // out[cout_g, l0..l0+lc] = wg[cout_g, rows] * cols[rows, lc]
                unsafe {
                    T::gemm(
                        g.cout_g(),
                        rows,
                        lc,
                        wg.as_ptr(),
                        rows as isize,
                        1,
                        cols.as_ptr(),
                        lc as isize,
                        1,
                        T::from_f64(0.0),
                        out.as_mut_ptr().add(o_off + l0),
                        out_len as isize,
                        1,
                    );
                }
                l0 += lc;
            }
        }
    }
    out
}

fn conv_backward<T: Elem>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let out_len = g.out_len();
    let rows = g.rows();
    let chunk = g.chunk();
    let zero = T::from_f64(0.0);
    let mut dx = vec![zero; x.len()];
    let mut dw = vec![zero; w.len()];
    let mut cols = vec![zero; rows * chunk];
    let mut dcols = vec![zero; rows * chunk];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let x_off = (n * g.cin + grp * g.cin_g()) * g.h * g.w;
            let x_len = g.cin_g() * g.h * g.w;
            let xg = &x[x_off..x_off + x_len];
            let w_off = grp * g.cout_g() * rows;
            let wg = &w[w_off..w_off + g.cout_g() * rows];
            let o_off = (n * g.cout + grp * g.cout_g()) * out_len;
            let mut l0 = 0;
            while l0 < out_len {
                let lc = chunk.min(out_len - l0);
                im2col(xg, g, l0, lc, &mut cols);
                unsafe {
                    // dw[cout_g, rows] += dy[cout_g, lc] * cols^T[lc, rows]
                    T::gemm(
                        g.cout_g(),
                        lc,
                        rows,
                        dy.as_ptr().add(o_off + l0),
                        out_len as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        lc as isize,
                        T::from_f64(1.0),
                        dw.as_mut_ptr().add(w_off),
                        rows as isize,
                        1,
                    );
                    // dcols[rows, lc] = wg^T[rows, cout_g] * dy[cout_g, lc]
                    T::gemm(
                        rows,
                        g.cout_g(),
                        lc,
                        wg.as_ptr(),
                        1,
                        rows as isize,
                        dy.as_ptr().add(o_off + l0),
                        out_len as isize,
                        1,
                        zero,
                        dcols.as_mut_ptr(),
                        lc as isize,
                        1,
                    );
                }
                col2im_add(&dcols, g, l0, lc, &mut dx[x_off..x_off + x_len]);
                l0 += lc;
            }
        }
    }
    (dx, dw)
}

fn contiguous_slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom kernel requires contiguous input"),
    }
}

fn host_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geom;
        let shape = Shape::from((g.batch, g.cout, g.oh, g.ow));
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(conv_forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?, g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(conv_forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?, g))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = &self.geom;
        let (dx, dw) = match x.dtype() {
            DType::F32 => {
                let (dx, dw) = conv_backward(
                    &host_vec::<f32>(x)?,
                    &host_vec::<f32>(w)?,
                    &host_vec::<f32>(grad)?,
                    g,
                );
                (
                    Tensor::from_vec(dx, x.shape(), x.device())?,
                    Tensor::from_vec(dw, w.shape(), w.device())?,
                )
            }
            DType::F64 => {
                let (dx, dw) = conv_backward(
                    &host_vec::<f64>(x)?,
                    &host_vec::<f64>(w)?,
                    &host_vec::<f64>(grad)?,
                    g,
                );
                (
                    Tensor::from_vec(dx, x.shape(), x.device())?,
                    Tensor::from_vec(dw, w.shape(), w.device())?,
                )
            }
            dt => candle_core::bail!("conv2d backward unsupported for {dt:?}"),
        };
        Ok((Some(dx), Some(dw)))
    }
}

/// 2D convolution over `B×Cin×H×W` with a `Cout×(Cin/groups)×K×K` kernel.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (batch, cin, h, w) = x.dims4()?;
    let (cout, cin_g, kh, kw) = weight.dims4()?;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
        return Err(Error::Config(format!(
            "conv2d channel mismatch: input {cin}, kernel {cin_g}x{groups} groups, output {cout}"
        )));
    }
    let oh = conv_out_len(h, kh, stride, padding)?;
    let ow = conv_out_len(w, kw, stride, padding)?;
    let geom = ConvGeom {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad: padding,
        groups,
        oh,
        ow,
    };
    let out = x
        .contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { geom })?;
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, cout, 1, 1))?)?),
        None => Ok(out),
    }
}

struct MaxPoolOp {
    kernel: usize,
    stride: usize,
    pad: usize,
    dims: (usize, usize, usize, usize),
    out: (usize, usize),
}

impl MaxPoolOp {
    /// Index into the input plane of the maximum for each output cell, or `None`
    /// when the window only covers padding.
    fn argmax<T: Elem>(&self, x: &[T]) -> Vec<Option<usize>> {
        let (b, c, h, w) = self.dims;
        let (oh, ow) = self.out;
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(usize, T)> = None;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let at = base + iy as usize * w + ix as usize;
                            let v = x[at];
                            if best.map_or(true, |(_, bv)| v > bv) {
                                best = Some((at, v));
                            }
                        }
                    }
                    idx.push(best.map(|(at, _)| at));
                }
            }
        }
        idx
    }

    fn forward<T: Elem>(&self, x: &[T]) -> Vec<T> {
        self.argmax(x)
            .into_iter()
            .map(|i| i.map_or(T::NEG_INF, |i| x[i]))
            .collect()
    }

    fn backward<T: Elem>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::from_f64(0.0); x.len()];
        for (o, i) in self.argmax(x).into_iter().enumerate() {
            if let Some(i) = i {
                dx[i] += dy[o];
            }
        }
        dx
    }
}

impl CustomOp1 for MaxPoolOp {
    fn name(&self) -> &'static str {
        "padded-max-pool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, _, _) = self.dims;
        let shape = Shape::from((b, c, self.out.0, self.out.1));
        let storage = match s {
            CpuStorage::F32(x) => CpuStorage::F32(self.forward(contiguous_slice(x, l)?)),
            CpuStorage::F64(x) => CpuStorage::F64(self.forward(contiguous_slice(x, l)?)),
            _ => candle_core::bail!("max_pool2d supports f32 or f64"),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dx = match x.dtype() {
            DType::F32 => Tensor::from_vec(
                self.backward(&host_vec::<f32>(x)?, &host_vec::<f32>(grad)?),
                x.shape(),
                x.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                self.backward(&host_vec::<f64>(x)?, &host_vec::<f64>(grad)?),
                x.shape(),
                x.device(),
            )?,
            dt => candle_core::bail!("max_pool2d backward unsupported for {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// Max pooling with symmetric padding (padding cells never win).
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let dims = x.dims4()?;
    if padding * 2 > kernel {
        return Err(Error::Config(format!(
            "max_pool2d padding {padding} exceeds half the kernel {kernel}"
        )));
    }
    let out = (
        conv_out_len(dims.2, kernel, stride, padding)?,
        conv_out_len(dims.3, kernel, stride, padding)?,
    );
    Ok(x.contiguous()?.apply_op1(MaxPoolOp {
        kernel,
        stride,
        pad: padding,
        dims,
        out,
    })?)
}

/// Row-stochastic `out×in` matrix for 1D linear resampling with half-pixel
/// centres (the `align_corners = false` convention).
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

/// Bilinear resize of a `B×C×H×W` map to `B×C×out_h×out_w`.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let mw = Tensor::from_vec(bilinear_weights(w, out_w), (out_w, w), dev)?.to_dtype(dt)?;
    let mh = Tensor::from_vec(bilinear_weights(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    let rows = x.contiguous()?.reshape((b * c * h, w))?.matmul(&mw.t()?)?;
    let cols = rows
        .reshape((b, c, h, out_w))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&mh.t()?)?;
    Ok(cols
        .reshape((b, c, out_w, out_h))?
        .transpose(2, 3)?
        .contiguous()?)
}

/// Normalization over the last axis with affine parameters.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centred.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}
