//! Valid stride-1 convolution and its adjoint (full transposed convolution).
//!
//! Both are lowered to matrix products through `im2col`/`col2im`, one sample
//! at a time.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, rand_normal, Tensor};

/// Unfolds one `[c, h, w]` image into `[c·kh·kw, oh·ow]` patch columns,
/// with `oh = h − kh + 1`, `ow = w − kw + 1`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let src = &plane[(i + di) * w + dj..(i + di) * w + dj + ow];
                    dst[i * ow..(i + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into `[c, h, w]`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let dst = &mut plane[(i + di) * w + dj..(i + di) * w + dj + ow];
                    for (d, s) in dst.iter_mut().zip(&src[i * ow..(i + 1) * ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_kernel_shape(kernels: &Tensor, bias: &Tensor, bias_axis: usize) -> Result<()> {
    kernels.expect_rank(4, "convolution kernels")?;
    let s = kernels.shape();
    if s[2].is_multiple_of(2) || s[3].is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "kernel sizes must be odd, got {}x{}",
            s[2], s[3]
        )));
    }
    if bias.shape() != [s[bias_axis]] {
        return Err(Error::Dimension(format!(
            "bias shape {:?} does not match kernels {:?}",
            bias.shape(),
            s
        )));
    }
    Ok(())
}

fn he_kernels(rng: &mut Rng, shape: [usize; 4], fan_in: usize) -> Tensor {
    rand_normal(rng, &shape, 0.0, (2.0 / fan_in as f64).sqrt()).expect("std is positive")
}

/// Gradients of a convolution-like layer.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub(crate) struct PartialConvGrads {
    pub input: Option<Tensor>,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Valid, stride-1 cross-correlation. Kernels are `[out, in, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        check_kernel_shape(&kernels, &bias, 0)?;
        Ok(ConvLayer { kernels, bias })
    }

    /// He-normal kernels, zero bias.
    pub fn init(in_ch: usize, out_ch: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let kernels = he_kernels(rng, [out_ch, in_ch, k, k], in_ch * k * k);
        ConvLayer::new(kernels, Tensor::zeros(&[out_ch]))
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        if h < kh || w < kw {
            return Err(Error::Dimension(format!(
                "input {h}x{w} is smaller than the {kh}x{kw} kernel"
            )));
        }
        Ok((h - kh + 1, w - kw + 1))
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        input.expect_rank(4, "conv2d")?;
        let s = input.shape();
        if s[1] != self.in_channels() {
            return Err(Error::Dimension(format!(
                "conv2d expects {} input channels, got shape {s:?}",
                self.in_channels()
            )));
        }
        Ok((s[0], s[2], s[3]))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (batch, h, w) = self.check_input(input)?;
        let (oh, ow) = self.output_hw(h, w)?;
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let (kh, kw) = self.kernel_size();
        let patch = cin * kh * kw;
        let mut cols = vec![0.0; patch * oh * ow];
        let mut out = vec![0.0; batch * cout * oh * ow];
        for (x, y) in input
            .data()
            .chunks(cin * h * w)
            .zip(out.chunks_mut(cout * oh * ow))
        {
            im2col(x, cin, h, w, kh, kw, &mut cols);
            for (plane, b) in y.chunks_mut(oh * ow).zip(self.bias.data()) {
                plane.fill(*b);
            }
            gemm(cout, patch, oh * ow, self.kernels.data(), false, &cols, false, y, 1.0);
        }
        Tensor::new(vec![batch, cout, oh, ow], out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let g = self.backward_impl(input, grad_out, true)?;
        Ok(ConvGrads {
            input: g.input.expect("input gradient requested"),
            kernels: g.kernels,
            bias: g.bias,
        })
    }

    /// Backward pass that can skip the input gradient (first layer of a net).
    pub(crate) fn backward_impl(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        want_input: bool,
    ) -> Result<PartialConvGrads> {
        let (batch, h, w) = self.check_input(input)?;
        let (oh, ow) = self.output_hw(h, w)?;
        let (cin, cout) = (self.in_channels(), self.out_channels());
        if grad_out.shape() != [batch, cout, oh, ow] {
            return Err(Error::Dimension(format!(
                "conv2d backward: grad shape {:?}, forward output is {:?}",
                grad_out.shape(),
                [batch, cout, oh, ow]
            )));
        }
        let (kh, kw) = self.kernel_size();
        let patch = cin * kh * kw;
        let mut cols = vec![0.0; patch * oh * ow];
        let mut gcols = vec![0.0; patch * oh * ow];
        let mut gx = vec![0.0; input.len()];
        let mut gk = vec![0.0; self.kernels.len()];
        let mut gb = vec![0.0; cout];
        for ((x, gy), gxs) in input
            .data()
            .chunks(cin * h * w)
            .zip(grad_out.data().chunks(cout * oh * ow))
            .zip(gx.chunks_mut(cin * h * w))
        {
            for (b, plane) in gb.iter_mut().zip(gy.chunks(oh * ow)) {
                *b += plane.iter().sum::<f64>();
            }
            im2col(x, cin, h, w, kh, kw, &mut cols);
            gemm(cout, oh * ow, patch, gy, false, &cols, true, &mut gk, 1.0);
            if want_input {
                gemm(patch, cout, oh * ow, self.kernels.data(), true, gy, false, &mut gcols, 0.0);
                col2im(&gcols, cin, h, w, kh, kw, gxs);
            }
        }
        Ok(PartialConvGrads {
            input: if want_input {
                Some(Tensor::new(input.shape().to_vec(), gx)?)
            } else {
                None
            },
            kernels: Tensor::new(self.kernels.shape().to_vec(), gk)?,
            bias: Tensor::new(vec![cout], gb)?,
        })
    }
}

/// Full-correlation transposed convolution, the exact adjoint of a valid
/// convolution with the same kernel tensor. Kernels are `[in, out, kh, kw]`,
/// i.e. the shape of the encoder convolution it mirrors; `[B, in, h, w]`
/// maps to `[B, out, h + kh − 1, w + kw − 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTransposeLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvTransposeLayer {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        check_kernel_shape(&kernels, &bias, 1)?;
        Ok(ConvTransposeLayer { kernels, bias })
    }

    pub fn init(in_ch: usize, out_ch: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let kernels = he_kernels(rng, [in_ch, out_ch, k, k], in_ch * k * k);
        ConvTransposeLayer::new(kernels, Tensor::zeros(&[out_ch]))
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel_size();
        (h + kh - 1, w + kw - 1)
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        input.expect_rank(4, "transposed conv2d")?;
        let s = input.shape();
        if s[1] != self.in_channels() {
            return Err(Error::Dimension(format!(
                "transposed conv2d expects {} input channels, got shape {s:?}",
                self.in_channels()
            )));
        }
        Ok((s[0], s[2], s[3]))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (batch, h, w) = self.check_input(input)?;
        let (oh, ow) = self.output_hw(h, w);
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let (kh, kw) = self.kernel_size();
        let patch = cout * kh * kw;
        let mut cols = vec![0.0; patch * h * w];
        let mut out = vec![0.0; batch * cout * oh * ow];
        for (x, y) in input
            .data()
            .chunks(cin * h * w)
            .zip(out.chunks_mut(cout * oh * ow))
        {
            gemm(patch, cin, h * w, self.kernels.data(), true, x, false, &mut cols, 0.0);
            for (plane, b) in y.chunks_mut(oh * ow).zip(self.bias.data()) {
                plane.fill(*b);
            }
            col2im(&cols, cout, oh, ow, kh, kw, y);
        }
        Tensor::new(vec![batch, cout, oh, ow], out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let (batch, h, w) = self.check_input(input)?;
        let (oh, ow) = self.output_hw(h, w);
        let (cin, cout) = (self.in_channels(), self.out_channels());
        if grad_out.shape() != [batch, cout, oh, ow] {
            return Err(Error::Dimension(format!(
                "transposed conv2d backward: grad shape {:?}, forward output is {:?}",
                grad_out.shape(),
                [batch, cout, oh, ow]
            )));
        }
        let (kh, kw) = self.kernel_size();
        let patch = cout * kh * kw;
        let mut cols = vec![0.0; patch * h * w];
        let mut gx = vec![0.0; input.len()];
        let mut gk = vec![0.0; self.kernels.len()];
        let mut gb = vec![0.0; cout];
        for ((x, gy), gxs) in input
            .data()
            .chunks(cin * h * w)
            .zip(grad_out.data().chunks(cout * oh * ow))
            .zip(gx.chunks_mut(cin * h * w))
        {
            for (b, plane) in gb.iter_mut().zip(gy.chunks(oh * ow)) {
                *b += plane.iter().sum::<f64>();
            }
            im2col(gy, cout, oh, ow, kh, kw, &mut cols);
            gemm(cin, patch, h * w, self.kernels.data(), false, &cols, false, gxs, 0.0);
            gemm(cin, h * w, patch, x, false, &cols, true, &mut gk, 1.0);
        }
        Ok(ConvGrads {
            input: Tensor::new(input.shape().to_vec(), gx)?,
            kernels: Tensor::new(self.kernels.shape().to_vec(), gk)?,
            bias: Tensor::new(vec![cout], gb)?,
        })
    }
}
