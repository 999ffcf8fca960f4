//! Raw numeric kernels over flat row-major buffers.
//!
//! The convolution is lowered to im2col + GEMM and parallelised over batch
//! elements. [`conv2d_naive`] is the direct seven-loop reference kept for
//! tests and benchmarks.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
        let (&[batch, in_ch, height, width], &[out_ch, w_in, kh, kw]) = (input, weight) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        };
        if in_ch != w_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if ph < kh || pw < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw} (input {input:?}, weight {weight:?})"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Rows of the im2col matrix, `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, with optional
/// transposition of either operand expressed through strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides address exactly m×k, k×n, m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one image `[C,H,W]` into `[C·kh·kw, OH·OW]`.
pub fn im2col(g: &ConvGeometry, image: &[f64], col: &mut [f64]) {
    let p = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image buffer.
pub fn col2im(g: &ConvGeometry, col: &[f64], image: &mut [f64]) {
    let p = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// im2col + GEMM convolution, parallel over the batch.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_ch] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: b.shape().to_vec(),
                right: vec![g.out_ch],
            });
        }
    }
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * g.positions();
    let mut out = vec![0.0; g.batch * out_len];
    let x = input.data();
    let w = weight.data();
    par::for_each_chunk(&mut out, out_len, |b, dst| {
        let image = &x[b * in_len..(b + 1) * in_len];
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                dst[oc * g.positions()..(oc + 1) * g.positions()].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(
                g.out_ch,
                g.patch_len(),
                g.positions(),
                w,
                false,
                image,
                false,
                beta,
                dst,
            );
        } else {
            let mut col = vec![0.0; g.patch_len() * g.positions()];
            im2col(&g, image, &mut col);
            gemm(g.out_ch, g.patch_len(), g.positions(), w, false, &col, false, beta, dst);
        }
    });
    Ok(Tensor::from_parts(g.output_shape(), out))
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d_forward`]. Per-image weight gradients are
/// summed in batch order, so the result does not depend on thread count.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: grad_out.shape().to_vec(),
            right: g.output_shape(),
        });
    }
    let in_len = g.in_ch * g.height * g.width;
    let p = g.positions();
    let out_len = g.out_ch * p;
    let k = g.patch_len();
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();

    let per_image: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = par::map_range(g.batch, |b| {
        let image = &x[b * in_len..(b + 1) * in_len];
        let gout = &go[b * out_len..(b + 1) * out_len];
        let mut gw = vec![0.0; g.out_ch * k];
        let mut gin = vec![0.0; in_len];
        let gb: Vec<f64> = gout.chunks(p).map(|row| row.iter().sum()).collect();
        if g.is_pointwise() {
            gemm(g.out_ch, p, k, gout, false, image, true, 0.0, &mut gw);
            gemm(k, g.out_ch, p, w, true, gout, false, 0.0, &mut gin);
        } else {
            let mut col = vec![0.0; k * p];
            im2col(&g, image, &mut col);
            gemm(g.out_ch, p, k, gout, false, &col, true, 0.0, &mut gw);
            gemm(k, g.out_ch, p, w, true, gout, false, 0.0, &mut col);
            col2im(&g, &col, &mut gin);
        }
        (gin, gw, gb)
    });

    let mut gin = Vec::with_capacity(g.batch * in_len);
    let mut gw = vec![0.0; g.out_ch * k];
    let mut gb = vec![0.0; g.out_ch];
    for (i, w_part, b_part) in per_image {
        gin.extend_from_slice(&i);
        gw.iter_mut().zip(&w_part).for_each(|(a, v)| *a += v);
        gb.iter_mut().zip(&b_part).for_each(|(a, v)| *a += v);
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gin),
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![g.out_ch], gb),
    })
}

/// Direct-summation convolution. Slow; used as the reference kernel.
pub fn conv2d_naive(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let mut out = Tensor::zeros(&g.output_shape());
    for b in 0..g.batch {
        for oc in 0..g.out_ch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for c in 0..g.in_ch {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += input.at(&[b, c, iy as usize, ix as usize]) * weight.at(&[oc, c, ky, kx]);
                            }
                        }
                    }
                    let off = out.offset(&[b, oc, oy, ox]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat input index that produced it (first maximum in row-major order).
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "kernel and stride must be positive"));
    }
    if h < kernel || w < kernel {
        return Err(Error::invalid(
            "max_pool2d",
            format!("spatial extent {h}x{w} smaller than kernel {kernel}"),
        ));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, c, oh, ow], out), arg))
}
