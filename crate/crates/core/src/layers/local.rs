use super::conv::valid_range;
use super::ConvSpec;
use crate::error::{Error, Result};
use crate::Tensor;

/// Convolution geometry with an independent weight bank per output location.
///
/// Weights are `[out_h, out_w, C', C, kh, kw]`, biases `[C', out_h, out_w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalSpec {
    pub geometry: ConvSpec,
    pub in_h: usize,
    pub in_w: usize,
}

impl LocalSpec {
    pub fn new(geometry: ConvSpec, in_h: usize, in_w: usize) -> Result<Self> {
        geometry.output_extent(in_h, in_w)?;
        Ok(Self { geometry, in_h, in_w })
    }

    pub fn output_extent(&self) -> (usize, usize) {
        self.geometry
            .output_extent(self.in_h, self.in_w)
            .expect("validated at construction")
    }

    pub fn weight_shape(&self) -> [usize; 6] {
        let (oh, ow) = self.output_extent();
        let g = &self.geometry;
        [oh, ow, g.out_channels, g.in_channels, g.kernel_h, g.kernel_w]
    }

    pub fn bias_shape(&self) -> [usize; 3] {
        let (oh, ow) = self.output_extent();
        [self.geometry.out_channels, oh, ow]
    }

    pub fn param_count(&self) -> usize {
        let (oh, ow) = self.output_extent();
        oh * ow * self.geometry.param_count()
    }

    fn check(&self, input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<()> {
        let expected = [self.geometry.in_channels, self.in_h, self.in_w];
        if input.shape() != expected {
            return Err(Error::shape(format!(
                "input {:?} does not match locally-connected input {expected:?}",
                input.shape()
            )));
        }
        if weights.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "weight bank {:?} does not match {:?}",
                weights.shape(),
                self.weight_shape()
            )));
        }
        if let Some(bias) = bias {
            if bias.shape() != self.bias_shape() {
                return Err(Error::shape(format!(
                    "bias {:?} does not match {:?}",
                    bias.shape(),
                    self.bias_shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn locally_connected_forward(input: &Tensor, spec: &LocalSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    spec.check(input, weights, Some(bias))?;
    let g = &spec.geometry;
    let (h, w) = (spec.in_h, spec.in_w);
    let (oh, ow) = spec.output_extent();
    let (cin, cout, kh, kw, s, p) = (g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.stride, g.pad);
    let x = input.data();
    let wt = weights.data();
    let bank = cout * cin * kh * kw;
    let mut out = bias.data().to_vec();
    for oy in 0..oh {
        for ox in 0..ow {
            let wbase = (oy * ow + ox) * bank;
            for oc in 0..cout {
                let mut acc = 0.0;
                for ic in 0..cin {
                    for ki in 0..kh {
                        let (y0, y1) = valid_range(ki, p, s, h, oh);
                        if oy < y0 || oy >= y1 {
                            continue;
                        }
                        let iy = oy * s + ki - p;
                        for kj in 0..kw {
                            let (x0, x1) = valid_range(kj, p, s, w, ow);
                            if ox < x0 || ox >= x1 {
                                continue;
                            }
                            let ix = ox * s + kj - p;
                            acc += wt[wbase + ((oc * cin + ic) * kh + ki) * kw + kj] * x[(ic * h + iy) * w + ix];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] += acc;
            }
        }
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

#[derive(Clone, Debug)]
pub struct LocalGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn locally_connected_backward(input: &Tensor, spec: &LocalSpec, weights: &Tensor, grad_out: &Tensor) -> Result<LocalGrads> {
    spec.check(input, weights, None)?;
    grad_out.expect_shape(&spec.bias_shape())?;
    let g = &spec.geometry;
    let (h, w) = (spec.in_h, spec.in_w);
    let (oh, ow) = spec.output_extent();
    let (cin, cout, kh, kw, s, p) = (g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.stride, g.pad);
    let x = input.data();
    let wt = weights.data();
    let go = grad_out.data();
    let bank = cout * cin * kh * kw;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let wbase = (oy * ow + ox) * bank;
            for oc in 0..cout {
                let gv = go[(oc * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for ic in 0..cin {
                    for ki in 0..kh {
                        let (y0, y1) = valid_range(ki, p, s, h, oh);
                        if oy < y0 || oy >= y1 {
                            continue;
                        }
                        let iy = oy * s + ki - p;
                        for kj in 0..kw {
                            let (x0, x1) = valid_range(kj, p, s, w, ow);
                            if ox < x0 || ox >= x1 {
                                continue;
                            }
                            let ix = ox * s + kj - p;
                            let wi = wbase + ((oc * cin + ic) * kh + ki) * kw + kj;
                            let xi = (ic * h + iy) * w + ix;
                            gw[wi] += gv * x[xi];
                            gx[xi] += gv * wt[wi];
                        }
                    }
                }
            }
        }
    }
    Ok(LocalGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weights: Tensor::from_vec(weights.shape(), gw)?,
        bias: grad_out.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{conv2d_forward, fully_connected};
    use crate::tensor::{finite_diff_grad, max_relative_error, uniform_tensor, Rng, DEFAULT_FD_EPS};

    pub(crate) fn tie_weights(spec: &LocalSpec, conv_w: &Tensor, conv_b: &Tensor) -> (Tensor, Tensor) {
        let (oh, ow) = spec.output_extent();
        let mut w = Vec::new();
        for _ in 0..oh * ow {
            w.extend_from_slice(conv_w.data());
        }
        let mut b = Vec::new();
        for &v in conv_b.data() {
            b.extend(std::iter::repeat_n(v, oh * ow));
        }
        (
            Tensor::from_vec(&spec.weight_shape(), w).unwrap(),
            Tensor::from_vec(&spec.bias_shape(), b).unwrap(),
        )
    }

    fn random_spec(rng: &mut Rng) -> LocalSpec {
        let geometry = ConvSpec {
            in_channels: 1 + rng.below(3),
            out_channels: 1 + rng.below(3),
            kernel_h: 1 + rng.below(3),
            kernel_w: 1 + rng.below(3),
            stride: 1 + rng.below(2),
            pad: rng.below(2),
        };
        LocalSpec::new(geometry, 3 + rng.below(4), 3 + rng.below(4)).unwrap()
    }

    #[test]
    fn tied_banks_equal_convolution() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let spec = random_spec(&mut rng);
            let g = spec.geometry;
            let x = uniform_tensor(&[g.in_channels, spec.in_h, spec.in_w], -1.0, 1.0, &mut rng).unwrap();
            let cw = uniform_tensor(&g.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
            let cb = uniform_tensor(&[g.out_channels], -1.0, 1.0, &mut rng).unwrap();
            let (lw, lb) = tie_weights(&spec, &cw, &cb);
            let a = locally_connected_forward(&x, &spec, &lw, &lb).unwrap();
            let b = conv2d_forward(&x, &g, &cw, &cb).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_location_is_fully_connected() {
        let mut rng = Rng::new(23);
        let geometry = ConvSpec { in_channels: 2, out_channels: 3, kernel_h: 3, kernel_w: 4, stride: 1, pad: 0 };
        let spec = LocalSpec::new(geometry, 3, 4).unwrap();
        assert_eq!(spec.output_extent(), (1, 1));
        let x = uniform_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng).unwrap();
        let w = uniform_tensor(&spec.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
        let b = uniform_tensor(&spec.bias_shape(), -1.0, 1.0, &mut rng).unwrap();
        let local = locally_connected_forward(&x, &spec, &w, &b).unwrap();
        let fc_w = w.clone().reshape(&[3, 24]).unwrap();
        let fc = fully_connected(&x.clone().flatten(), &fc_w, &b.clone().flatten()).unwrap();
        for (u, v) in local.data().iter().zip(fc.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_per_location_dot_products() {
        let mut rng = Rng::new(29);
        for _ in 0..10 {
            let spec = random_spec(&mut rng);
            let g = spec.geometry;
            let x = uniform_tensor(&[g.in_channels, spec.in_h, spec.in_w], -1.0, 1.0, &mut rng).unwrap();
            let w = uniform_tensor(&spec.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
            let b = uniform_tensor(&spec.bias_shape(), -1.0, 1.0, &mut rng).unwrap();
            let y = locally_connected_forward(&x, &spec, &w, &b).unwrap();
            let (oh, ow) = spec.output_extent();
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..g.out_channels {
                        // gather the zero-padded receptive field and dot it with this location's bank
                        let mut acc = b.data()[(oc * oh + oy) * ow + ox];
                        for ic in 0..g.in_channels {
                            for ki in 0..g.kernel_h {
                                for kj in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    let xv = if iy >= 0 && ix >= 0 && (iy as usize) < spec.in_h && (ix as usize) < spec.in_w {
                                        x.data()[(ic * spec.in_h + iy as usize) * spec.in_w + ix as usize]
                                    } else {
                                        0.0
                                    };
                                    let wi = ((((oy * ow + ox) * g.out_channels + oc) * g.in_channels + ic) * g.kernel_h + ki) * g.kernel_w + kj;
                                    acc += w.data()[wi] * xv;
                                }
                            }
                        }
                        assert!((acc - y.data()[(oc * oh + oy) * ow + ox]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn param_count_formula() {
        let spec = LocalSpec::new(ConvSpec::same(3, 5, 3), 4, 6).unwrap();
        assert_eq!(spec.param_count(), 4 * 6 * 5 * (3 * 3 * 3 + 1));
        let w: usize = spec.weight_shape().iter().product();
        let b: usize = spec.bias_shape().iter().product();
        assert_eq!(w + b, spec.param_count());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let spec = random_spec(&mut rng);
            let g = spec.geometry;
            let x = uniform_tensor(&[g.in_channels, spec.in_h, spec.in_w], -1.0, 1.0, &mut rng).unwrap();
            let w = uniform_tensor(&spec.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
            let b = uniform_tensor(&spec.bias_shape(), -1.0, 1.0, &mut rng).unwrap();
            let y = locally_connected_forward(&x, &spec, &w, &b).unwrap();
            let probe = uniform_tensor(y.shape(), -1.0, 1.0, &mut rng).unwrap();
            let grads = locally_connected_backward(&x, &spec, &w, &probe).unwrap();
            let nx = finite_diff_grad(|t| locally_connected_forward(t, &spec, &w, &b)?.dot(&probe), &x, DEFAULT_FD_EPS).unwrap();
            let nw = finite_diff_grad(|t| locally_connected_forward(&x, &spec, t, &b)?.dot(&probe), &w, DEFAULT_FD_EPS).unwrap();
            let nb = finite_diff_grad(|t| locally_connected_forward(&x, &spec, &w, t)?.dot(&probe), &b, DEFAULT_FD_EPS).unwrap();
            assert!(max_relative_error(&grads.input, &nx, 1e-6) < 1e-4);
            assert!(max_relative_error(&grads.weights, &nw, 1e-6) < 1e-4);
            assert!(max_relative_error(&grads.bias, &nb, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn shape_errors() {
        let spec = LocalSpec::new(ConvSpec::same(1, 1, 3), 4, 4).unwrap();
        let x = Tensor::zeros(&[1, 5, 4]).unwrap();
        let w = Tensor::zeros(&spec.weight_shape()).unwrap();
        let b = Tensor::zeros(&spec.bias_shape()).unwrap();
        assert!(locally_connected_forward(&x, &spec, &w, &b).is_err());
        assert!(LocalSpec::new(ConvSpec { pad: 0, ..ConvSpec::same(1, 1, 5) }, 4, 4).is_err());
    }
}
