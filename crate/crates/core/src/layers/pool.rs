use crate::error::{Error, Result};
use crate::Tensor;

/// Pooled values plus, for each output cell, the flat input index it came from.
#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Max-pooling without padding. Ties go to the lowest flat index.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<PoolOutput> {
    maxpool2d_padded(input, window, stride, 0)
}

/// Max-pooling where padded cells never win.
pub fn maxpool2d_padded(input: &Tensor, window: usize, stride: usize, pad: usize) -> Result<PoolOutput> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    if pad >= window {
        return Err(Error::shape(format!("pool padding {pad} must be below window {window}")));
    }
    if window > h + 2 * pad || window > w + 2 * pad {
        return Err(Error::shape(format!(
            "pool window {window} exceeds input extent {h}x{w} of {:?}",
            input.shape()
        )));
    }
    let oh = (h + 2 * pad - window) / stride + 1;
    let ow = (w + 2 * pad - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let y0 = (oy * stride).saturating_sub(pad);
            let y1 = (oy * stride + window - pad).min(h);
            for ox in 0..ow {
                let x0 = (ox * stride).saturating_sub(pad);
                let x1 = (ox * stride + window - pad).min(w);
                let mut best = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * w + ix;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::from_vec(&[c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each output gradient to the input cell that won its window.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(format!(
            "pool gradient {:?} does not match {} stored indices",
            grad_out.shape(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        if idx >= g.len() {
            return Err(Error::Index { index: idx, len: g.len() });
        }
        g[idx] += v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error, uniform_tensor, Rng, DEFAULT_FD_EPS};

    #[test]
    fn single_window() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);
    }

    #[test]
    fn constant_input_takes_first_index() {
        let x = Tensor::filled(&[2, 4, 4], 0.25).unwrap();
        let p = maxpool2d(&x, 2, 2).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 0.25));
        assert_eq!(p.argmax, vec![0, 2, 8, 10, 16, 18, 24, 26]);
    }

    #[test]
    fn matches_brute_force_window_max() {
        let mut rng = Rng::new(21);
        let x = uniform_tensor(&[3, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        let p = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(p.output.shape(), &[3, 3, 3]);
        for c in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[(c * 6 + 2 * oy + dy) * 6 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(p.output.data()[(c * 3 + oy) * 3 + ox], m);
                }
            }
        }
    }

    #[test]
    fn window_larger_than_input_is_error() {
        let x = Tensor::zeros(&[1, 2, 3]).unwrap();
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn padded_same_pool_keeps_extent() {
        let mut rng = Rng::new(2);
        let x = uniform_tensor(&[2, 5, 4], -1.0, 1.0, &mut rng).unwrap();
        let p = maxpool2d_padded(&x, 3, 1, 1).unwrap();
        assert_eq!(p.output.shape(), x.shape());
        // every output is at least its own centre value
        for (o, v) in p.output.data().iter().zip(x.data()) {
            assert!(o >= v);
        }
    }

    #[test]
    fn backward_routes_one_unit_per_window() {
        let mut rng = Rng::new(4);
        let x = uniform_tensor(&[2, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        let p = maxpool2d(&x, 2, 2).unwrap();
        let ones = p.output.map(|_| 1.0);
        let g = maxpool2d_backward(x.shape(), &p.argmax, &ones).unwrap();
        assert_eq!(g.sum(), p.output.len() as f64);
        for (i, v) in g.data().iter().enumerate() {
            assert_eq!(*v != 0.0, p.argmax.contains(&i));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(13);
        for _ in 0..20 {
            let x = uniform_tensor(&[2, 6, 6], -1.0, 1.0, &mut rng).unwrap();
            let p = maxpool2d(&x, 2, 2).unwrap();
            let probe = uniform_tensor(p.output.shape(), -1.0, 1.0, &mut rng).unwrap();
            let g = maxpool2d_backward(x.shape(), &p.argmax, &probe).unwrap();
            let num = finite_diff_grad(|t| maxpool2d(t, 2, 2)?.output.dot(&probe), &x, DEFAULT_FD_EPS).unwrap();
            assert!(max_relative_error(&g, &num, 1e-6) < 1e-4);
        }
    }
}
