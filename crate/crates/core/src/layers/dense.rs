use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::Tensor;

/// Affine map `weights · input + bias` over the flattened input.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, inp) = fc_dims(input, weights)?;
    if bias.len() != out {
        return Err(Error::shape(format!(
            "bias {:?} does not match {out} outputs",
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let y = (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            bias.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Ok(Tensor::vector(y))
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    /// Gradient with respect to the input, in the input's original shape.
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    let (out, inp) = fc_dims(input, weights)?;
    if grad_out.len() != out {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match {out} outputs",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; inp];
    let mut gw = vec![0.0; out * inp];
    for o in 0..out {
        let go = g[o];
        if go == 0.0 {
            continue;
        }
        let row = &w[o * inp..(o + 1) * inp];
        let grow = &mut gw[o * inp..(o + 1) * inp];
        for i in 0..inp {
            grow[i] = go * x[i];
            gx[i] += go * row[i];
        }
    }
    Ok(FcGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weights: Tensor::from_vec(weights.shape(), gw)?,
        bias: Tensor::vector(g.to_vec()),
    })
}

fn fc_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    match weights.shape() {
        &[out, inp] if inp == input.len() => Ok((out, inp)),
        other => Err(Error::shape(format!(
            "weights {other:?} cannot take input {:?} ({} values)",
            input.shape(),
            input.len()
        ))),
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes gradient where the forward value was positive. Works with either
/// the pre-activation or the ReLU output, since both share a sign pattern.
pub fn relu_backward(forward: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if forward.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "relu gradient {:?} does not match {:?}",
            grad_out.shape(),
            forward.shape()
        )));
    }
    let data = forward
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(forward.shape(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout output and the per-unit scale applied (`None` when it was the identity).
#[derive(Clone, Debug)]
pub struct Dropout {
    pub output: Tensor,
    pub mask: Option<Vec<f64>>,
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at train time.
pub fn dropout(input: &Tensor, rate: f64, rng: &mut Rng, mode: Mode) -> Result<Dropout> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Dimension(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(Dropout {
            output: input.clone(),
            mask: None,
        });
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok(Dropout {
        output: Tensor::from_vec(input.shape(), data)?,
        mask: Some(mask),
    })
}

pub fn dropout_backward(mask: Option<&[f64]>, grad_out: &Tensor) -> Result<Tensor> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) if mask.len() == grad_out.len() => {
            let data = grad_out.data().iter().zip(mask).map(|(g, m)| g * m).collect();
            Tensor::from_vec(grad_out.shape(), data)
        }
        Some(mask) => Err(Error::shape(format!(
            "dropout mask of {} units for gradient {:?}",
            mask.len(),
            grad_out.shape()
        ))),
    }
}
