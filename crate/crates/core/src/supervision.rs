//! Joint identification-verification losses and the supervision heads that
//! attach them to intermediate and final layers.
//!
//! Identification is softmax cross-entropy over the training identities.
//! Verification is the contrastive form: `½‖f1 − f2‖²` for a genuine pair and
//! `½ max(0, m − ‖f1 − f2‖)²` for an impostor pair.

use crate::error::{Error, Result};
use crate::layers::{fully_connected, fully_connected_backward, relu, relu_backward};
use crate::params::{param, ParamStore};
use crate::tensor::{init_he, Rng};
use crate::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.05;

/// Loss and logit gradient of softmax cross-entropy.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::Dimension(format!("softmax needs at least 2 classes, got {k}")));
    }
    if label >= k {
        return Err(Error::Index { index: label, len: k });
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits.data()[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::vector(grad)))
}

#[derive(Clone, Debug)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_f1: Tensor,
    pub grad_f2: Tensor,
}

/// Contrastive verification loss between two feature vectors.
pub fn verification_loss(f1: &Tensor, f2: &Tensor, same: bool, margin: f64) -> Result<PairLoss> {
    if f1.len() != f2.len() {
        return Err(Error::shape(format!(
            "verification features {:?} and {:?} differ in dimension",
            f1.shape(),
            f2.shape()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::Dimension(format!("margin must be positive, got {margin}")));
    }
    let diff: Vec<f64> = f1.data().iter().zip(f2.data()).map(|(a, b)| a - b).collect();
    let dist_sq: f64 = diff.iter().map(|d| d * d).sum();
    let (loss, coeff) = if same {
        (0.5 * dist_sq, 1.0)
    } else {
        let dist = dist_sq.sqrt();
        if dist >= margin || dist == 0.0 {
            // at dist == 0 the direction is undefined; take the zero subgradient
            (if dist == 0.0 { 0.5 * margin * margin } else { 0.0 }, 0.0)
        } else {
            let gap = margin - dist;
            (0.5 * gap * gap, -gap / dist)
        }
    };
    let g1: Vec<f64> = diff.iter().map(|d| coeff * d).collect();
    let g2: Vec<f64> = g1.iter().map(|g| -g).collect();
    Ok(PairLoss {
        loss,
        grad_f1: Tensor::from_vec(f1.shape(), g1)?,
        grad_f2: Tensor::from_vec(f2.shape(), g2)?,
    })
}

/// Fully-connected projection from a flattened activation to a head feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Identification + verification supervision hung off one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionHead {
    pub name: String,
    /// Layer whose output feeds this head.
    pub attach_point: String,
    /// `None` means the attached activation is used as the feature directly.
    pub projection: Option<Projection>,
    pub feature_dim: usize,
    pub num_identities: usize,
    pub margin: f64,
    pub lambda: f64,
}

impl SupervisionHead {
    pub fn proj_weight(&self) -> String {
        format!("{}.proj.weight", self.name)
    }

    pub fn proj_bias(&self) -> String {
        format!("{}.proj.bias", self.name)
    }

    pub fn cls_weight(&self) -> String {
        format!("{}.cls.weight", self.name)
    }

    pub fn cls_bias(&self) -> String {
        format!("{}.cls.bias", self.name)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.projection.is_some() {
            names.push(self.proj_weight());
            names.push(self.proj_bias());
        }
        names.push(self.cls_weight());
        names.push(self.cls_bias());
        names
    }

    /// Freshly initialized head parameters.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        if let Some(p) = &self.projection {
            store.insert(self.proj_weight(), init_he(&[p.out_dim, p.in_dim], p.in_dim, rng)?);
            store.insert(self.proj_bias(), Tensor::zeros(&[p.out_dim])?);
        }
        store.insert(
            self.cls_weight(),
            init_he(&[self.num_identities, self.feature_dim], self.feature_dim, rng)?,
        );
        store.insert(self.cls_bias(), Tensor::zeros(&[self.num_identities])?);
        Ok(store)
    }

    /// The head feature of one attached activation (projection then ReLU).
    pub fn feature(&self, params: &ParamStore, act: &Tensor) -> Result<Tensor> {
        let flat = act.clone().flatten();
        match &self.projection {
            None => {
                if flat.len() != self.feature_dim {
                    return Err(Error::shape(format!(
                        "head `{}` expects {} features, activation {:?} has {}",
                        self.name,
                        self.feature_dim,
                        act.shape(),
                        flat.len()
                    )));
                }
                Ok(flat)
            }
            Some(_) => {
                let z = fully_connected(&flat, param(params, &self.proj_weight())?, param(params, &self.proj_bias())?)?;
                Ok(relu(&z))
            }
        }
    }
}

/// Everything one head contributes for one training pair.
#[derive(Clone, Debug)]
pub struct HeadLoss {
    pub loss: f64,
    pub identification: f64,
    pub verification: f64,
    /// Gradients for this head's own parameters.
    pub grads: ParamStore,
    /// Gradients with respect to the two attached activations (in their shapes).
    pub grad_act1: Tensor,
    pub grad_act2: Tensor,
}

/// Joint loss of one head on a pair:
/// `CE(f1, id1) + CE(f2, id2) + lambda · verification(f1, f2)`.
pub fn head_loss(head: &SupervisionHead, params: &ParamStore, act1: &Tensor, act2: &Tensor, id1: usize, id2: usize) -> Result<HeadLoss> {
    let f1 = head.feature(params, act1)?;
    let f2 = head.feature(params, act2)?;
    let wc = param(params, &head.cls_weight())?;
    let bc = param(params, &head.cls_bias())?;

    let mut grads = ParamStore::new();
    grads.insert(head.cls_weight(), wc.zeros_like());
    grads.insert(head.cls_bias(), bc.zeros_like());

    let mut ident = 0.0;
    let mut feature_grads = Vec::with_capacity(2);
    for (f, id) in [(&f1, id1), (&f2, id2)] {
        let logits = fully_connected(f, wc, bc)?;
        let (loss, g_logits) = softmax_cross_entropy(&logits, id)?;
        ident += loss;
        let g = fully_connected_backward(f, wc, &g_logits)?;
        grads.get_mut(&head.cls_weight()).unwrap().add_scaled(&g.weights, 1.0)?;
        grads.get_mut(&head.cls_bias()).unwrap().add_scaled(&g.bias, 1.0)?;
        feature_grads.push(g.input);
    }

    let verif = verification_loss(&f1, &f2, id1 == id2, head.margin)?;
    feature_grads[0].add_scaled(&verif.grad_f1, head.lambda)?;
    feature_grads[1].add_scaled(&verif.grad_f2, head.lambda)?;
    let g_f2 = feature_grads.pop().unwrap();
    let g_f1 = feature_grads.pop().unwrap();

    let (grad_act1, grad_act2) = match &head.projection {
        None => (g_f1.reshape(act1.shape())?, g_f2.reshape(act2.shape())?),
        Some(_) => {
            let wp = param(params, &head.proj_weight())?;
            let mut gw = wp.zeros_like();
            let mut gb = param(params, &head.proj_bias())?.zeros_like();
            let mut back = |act: &Tensor, f: &Tensor, g_f: &Tensor| -> Result<Tensor> {
                let g_pre = relu_backward(f, g_f)?;
                let g = fully_connected_backward(&act.clone().flatten(), wp, &g_pre)?;
                gw.add_scaled(&g.weights, 1.0)?;
                gb.add_scaled(&g.bias, 1.0)?;
                g.input.reshape(act.shape())
            };
            let a1 = back(act1, &f1, &g_f1)?;
            let a2 = back(act2, &f2, &g_f2)?;
            grads.insert(head.proj_weight(), gw);
            grads.insert(head.proj_bias(), gb);
            (a1, a2)
        }
    };

    Ok(HeadLoss {
        loss: ident + head.lambda * verif.loss,
        identification: ident,
        verification: verif.loss,
        grads,
        grad_act1,
        grad_act2,
    })
}
