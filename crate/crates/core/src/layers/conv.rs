use crate::error::{Error, Result};
use crate::Tensor;

/// Geometry of a 2-D convolution (cross-correlation, no kernel flip).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, zero padding that preserves spatial extent.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.fan_in() + 1)
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
        {
            return Err(Error::shape(format!("degenerate convolution {self:?}")));
        }
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(format!(
                "kernel {}x{} does not fit padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub(crate) fn check(&self, input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize, usize)> {
        let (c, h, w) = input.chw()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "input {:?} has {c} channels, convolution expects {}",
                input.shape(),
                self.in_channels
            )));
        }
        if weights.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "weights {:?} do not match {:?} for input {:?}",
                weights.shape(),
                self.weight_shape(),
                input.shape()
            )));
        }
        if let Some(bias) = bias {
            if bias.shape() != [self.out_channels] {
                return Err(Error::shape(format!(
                    "bias {:?} does not match [{}]",
                    bias.shape(),
                    self.out_channels
                )));
            }
        }
        let (oh, ow) = self.output_extent(h, w)?;
        Ok((h, w, oh, ow))
    }
}

/// Output rows `oy` whose tap `k` lands inside the input, as a half-open range.
#[inline]
pub(crate) fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, oh, ow) = spec.check(input, weights, Some(bias))?;
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.pad);
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    for oc in 0..spec.out_channels {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(bias.data()[oc]);
        for ic in 0..spec.in_channels {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ki in 0..kh {
                let (y0, y1) = valid_range(ki, p, s, h, oh);
                for kj in 0..kw {
                    let (x0, x1) = valid_range(kj, p, s, w, ow);
                    let wv = wt[((oc * spec.in_channels + ic) * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * s + ki - p;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[spec.out_channels, oh, ow], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, spec: &ConvSpec, weights: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (h, w, oh, ow) = spec.check(input, weights, None)?;
    grad_out.expect_shape(&[spec.out_channels, oh, ow])?;
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.pad);
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; spec.out_channels];
    for oc in 0..spec.out_channels {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] = gplane.iter().sum();
        for ic in 0..spec.in_channels {
            let base = ic * h * w;
            for ki in 0..kh {
                let (y0, y1) = valid_range(ki, p, s, h, oh);
                for kj in 0..kw {
                    let (x0, x1) = valid_range(kj, p, s, w, ow);
                    let widx = ((oc * spec.in_channels + ic) * kh + ki) * kw + kj;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ki - p;
                        for ox in x0..x1 {
                            let xi = base + iy * w + ox * s + kj - p;
                            let gv = gplane[oy * ow + ox];
                            acc += gv * x[xi];
                            gx[xi] += gv * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weights: Tensor::from_vec(weights.shape(), gw)?,
        bias: Tensor::vector(gb),
    })
}
