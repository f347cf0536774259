use super::{
    conv2d_backward, conv2d_forward, maxpool2d_backward, maxpool2d_padded, relu, relu_backward,
    ConvGrads, ConvParams, ConvSpec,
};
use crate::error::{Error, Result};
use crate::Tensor;

/// The six convolutions inside an inception block, in parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InceptionBranch {
    B1,
    B3Reduce,
    B3,
    B5Reduce,
    B5,
    PoolProj,
}

impl InceptionBranch {
    pub const ALL: [InceptionBranch; 6] = [
        InceptionBranch::B1,
        InceptionBranch::B3Reduce,
        InceptionBranch::B3,
        InceptionBranch::B5Reduce,
        InceptionBranch::B5,
        InceptionBranch::PoolProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InceptionBranch::B1 => "b1",
            InceptionBranch::B3Reduce => "b3_reduce",
            InceptionBranch::B3 => "b3",
            InceptionBranch::B5Reduce => "b5_reduce",
            InceptionBranch::B5 => "b5",
            InceptionBranch::PoolProj => "pool_proj",
        }
    }
}

/// Channel counts of a four-branch inception block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InceptionSpec {
    pub in_channels: usize,
    pub b1: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub b5_reduce: usize,
    pub b5: usize,
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub fn out_channels(&self) -> usize {
        self.b1 + self.b3 + self.b5 + self.pool_proj
    }

    /// Stride-1 same-padded convolution for one branch.
    pub fn conv(&self, branch: InceptionBranch) -> ConvSpec {
        match branch {
            InceptionBranch::B1 => ConvSpec::same(self.in_channels, self.b1, 1),
            InceptionBranch::B3Reduce => ConvSpec::same(self.in_channels, self.b3_reduce, 1),
            InceptionBranch::B3 => ConvSpec::same(self.b3_reduce, self.b3, 3),
            InceptionBranch::B5Reduce => ConvSpec::same(self.in_channels, self.b5_reduce, 1),
            InceptionBranch::B5 => ConvSpec::same(self.b5_reduce, self.b5, 5),
            InceptionBranch::PoolProj => ConvSpec::same(self.in_channels, self.pool_proj, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        InceptionBranch::ALL
            .iter()
            .map(|&b| self.conv(b).param_count())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for b in InceptionBranch::ALL {
            let c = self.conv(b);
            if c.in_channels == 0 || c.out_channels == 0 {
                return Err(Error::shape(format!(
                    "inception branch `{}` has zero channels in {self:?}",
                    b.name()
                )));
            }
        }
        Ok(())
    }
}

/// Borrowed parameters of the six convolutions, indexed like [`InceptionBranch::ALL`].
#[derive(Clone, Copy, Debug)]
pub struct InceptionParams<'a> {
    pub convs: [ConvParams<'a>; 6],
}

impl<'a> InceptionParams<'a> {
    fn get(&self, b: InceptionBranch) -> ConvParams<'a> {
        self.convs[b as usize]
    }
}

/// Intermediate activations needed for the backward pass.
#[derive(Clone, Debug)]
pub struct InceptionCache {
    input: Tensor,
    b1: Tensor,
    b3_mid: Tensor,
    b3: Tensor,
    b5_mid: Tensor,
    b5: Tensor,
    pooled: Tensor,
    pool_argmax: Vec<usize>,
    pool_proj: Tensor,
}

#[derive(Clone, Debug)]
pub struct InceptionGrads {
    pub input: Tensor,
    /// `(weights, bias)` gradients, indexed like [`InceptionBranch::ALL`].
    pub convs: Vec<(Tensor, Tensor)>,
}

fn branch_conv(spec: &InceptionSpec, branch: InceptionBranch, input: &Tensor, p: ConvParams<'_>) -> Result<Tensor> {
    conv2d_forward(input, &spec.conv(branch), p.weights, p.bias)
        .map(|t| relu(&t))
        .map_err(|e| Error::shape(format!("inception branch `{}`: {e}", branch.name())))
}

pub fn inception_forward(input: &Tensor, spec: &InceptionSpec, params: &InceptionParams<'_>) -> Result<Tensor> {
    inception_forward_cached(input, spec, params).map(|(out, _)| out)
}

pub fn inception_forward_cached(input: &Tensor, spec: &InceptionSpec, params: &InceptionParams<'_>) -> Result<(Tensor, InceptionCache)> {
    use InceptionBranch::*;
    spec.validate()?;
    let b1 = branch_conv(spec, B1, input, params.get(B1))?;
    let b3_mid = branch_conv(spec, B3Reduce, input, params.get(B3Reduce))?;
    let b3 = branch_conv(spec, B3, &b3_mid, params.get(B3))?;
    let b5_mid = branch_conv(spec, B5Reduce, input, params.get(B5Reduce))?;
    let b5 = branch_conv(spec, B5, &b5_mid, params.get(B5))?;
    let pool = maxpool2d_padded(input, 3, 1, 1)
        .map_err(|e| Error::shape(format!("inception branch `pool`: {e}")))?;
    let pool_proj = branch_conv(spec, PoolProj, &pool.output, params.get(PoolProj))?;
    let out = Tensor::concat_channels(&[&b1, &b3, &b5, &pool_proj])?;
    Ok((
        out,
        InceptionCache {
            input: input.clone(),
            b1,
            b3_mid,
            b3,
            b5_mid,
            b5,
            pooled: pool.output,
            pool_argmax: pool.argmax,
            pool_proj,
        },
    ))
}

fn relu_conv_backward(
    spec: &InceptionSpec,
    branch: InceptionBranch,
    params: &InceptionParams<'_>,
    input: &Tensor,
    output: &Tensor,
    grad: &Tensor,
) -> Result<ConvGrads> {
    let pre = relu_backward(output, grad)?;
    let p = params.get(branch);
    conv2d_backward(input, &spec.conv(branch), p.weights, &pre)
}

pub fn inception_backward(cache: &InceptionCache, spec: &InceptionSpec, params: &InceptionParams<'_>, grad_out: &Tensor) -> Result<InceptionGrads> {
    use InceptionBranch::*;
    let (_, h, w) = cache.input.chw()?;
    grad_out.expect_shape(&[spec.out_channels(), h, w])?;
    let g_b1 = grad_out.channel_slice(0, spec.b1)?;
    let g_b3 = grad_out.channel_slice(spec.b1, spec.b3)?;
    let g_b5 = grad_out.channel_slice(spec.b1 + spec.b3, spec.b5)?;
    let g_pp = grad_out.channel_slice(spec.b1 + spec.b3 + spec.b5, spec.pool_proj)?;

    let b1 = relu_conv_backward(spec, B1, params, &cache.input, &cache.b1, &g_b1)?;
    let b3 = relu_conv_backward(spec, B3, params, &cache.b3_mid, &cache.b3, &g_b3)?;
    let b3r = relu_conv_backward(spec, B3Reduce, params, &cache.input, &cache.b3_mid, &b3.input)?;
    let b5 = relu_conv_backward(spec, B5, params, &cache.b5_mid, &cache.b5, &g_b5)?;
    let b5r = relu_conv_backward(spec, B5Reduce, params, &cache.input, &cache.b5_mid, &b5.input)?;
    let pp = relu_conv_backward(spec, PoolProj, params, &cache.pooled, &cache.pool_proj, &g_pp)?;

    let mut g_in = b1.input.clone();
    g_in.add_scaled(&b3r.input, 1.0)?;
    g_in.add_scaled(&b5r.input, 1.0)?;
    g_in.add_scaled(&maxpool2d_backward(cache.input.shape(), &cache.pool_argmax, &pp.input)?, 1.0)?;

    let convs = [b1, b3r, b3, b5r, b5, pp]
        .into_iter()
        .map(|g| (g.weights, g.bias))
        .collect();
    Ok(InceptionGrads { input: g_in, convs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, init_he, max_relative_error, uniform_tensor, Rng, DEFAULT_FD_EPS};

    struct Owned {
        tensors: Vec<(Tensor, Tensor)>,
    }

    impl Owned {
        fn random(spec: &InceptionSpec, rng: &mut Rng) -> Self {
            let tensors = InceptionBranch::ALL
                .iter()
                .map(|&b| {
                    let c = spec.conv(b);
                    let w = init_he(&c.weight_shape(), c.fan_in(), rng).unwrap();
                    let bias = uniform_tensor(&[c.out_channels], 0.05, 0.2, rng).unwrap();
                    (w, bias)
                })
                .collect();
            Self { tensors }
        }

        fn zeros(spec: &InceptionSpec) -> Self {
            let tensors = InceptionBranch::ALL
                .iter()
                .map(|&b| {
                    let c = spec.conv(b);
                    (Tensor::zeros(&c.weight_shape()).unwrap(), Tensor::zeros(&[c.out_channels]).unwrap())
                })
                .collect();
            Self { tensors }
        }

        fn params(&self) -> InceptionParams<'_> {
            let p = |i: usize| ConvParams { weights: &self.tensors[i].0, bias: &self.tensors[i].1 };
            InceptionParams { convs: [p(0), p(1), p(2), p(3), p(4), p(5)] }
        }
    }

    fn spec(in_channels: usize) -> InceptionSpec {
        InceptionSpec { in_channels, b1: 2, b3_reduce: 2, b3: 3, b5_reduce: 1, b5: 1, pool_proj: 2 }
    }

    #[test]
    fn output_channels_and_extent() {
        let mut rng = Rng::new(1);
        let s = spec(3);
        let owned = Owned::random(&s, &mut rng);
        let x = uniform_tensor(&[3, 8, 8], -1.0, 1.0, &mut rng).unwrap();
        let y = inception_forward(&x, &s, &owned.params()).unwrap();
        assert_eq!(y.shape(), &[8, 8, 8]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let s = spec(2);
        let owned = Owned::zeros(&s);
        let x = Tensor::filled(&[2, 5, 5], 0.3).unwrap();
        let y = inception_forward(&x, &s, &owned.params()).unwrap();
        assert_eq!(y.shape(), &[8, 5, 5]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn channel_mismatch_names_branch() {
        let mut rng = Rng::new(2);
        let s = spec(3);
        let owned = Owned::random(&s, &mut rng);
        let x = Tensor::zeros(&[4, 6, 6]).unwrap();
        let err = inception_forward(&x, &s, &owned.params()).unwrap_err();
        assert!(err.to_string().contains("branch `b1`"), "{err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let s = spec(2);
            let mut owned = Owned::random(&s, &mut rng);
            let x = uniform_tensor(&[2, 5, 5], -1.0, 1.0, &mut rng).unwrap();
            let (y, cache) = inception_forward_cached(&x, &s, &owned.params()).unwrap();
            let probe = uniform_tensor(y.shape(), -1.0, 1.0, &mut rng).unwrap();
            let grads = inception_backward(&cache, &s, &owned.params(), &probe).unwrap();

            let nx = finite_diff_grad(|t| inception_forward(t, &s, &owned.params())?.dot(&probe), &x, DEFAULT_FD_EPS).unwrap();
            assert!(max_relative_error(&grads.input, &nx, 1e-6) < 1e-4);

            for i in 0..6 {
                let w0 = owned.tensors[i].0.clone();
                let nw = finite_diff_grad(
                    |t| {
                        owned.tensors[i].0 = t.clone();
                        inception_forward(&x, &s, &owned.params())?.dot(&probe)
                    },
                    &w0,
                    DEFAULT_FD_EPS,
                )
                .unwrap();
                owned.tensors[i].0 = w0;
                let err = max_relative_error(&grads.convs[i].0, &nw, 1e-6);
                assert!(err < 1e-4, "branch {} weights: {err}", InceptionBranch::ALL[i].name());
            }
        }
    }
}
