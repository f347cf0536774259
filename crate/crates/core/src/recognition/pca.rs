use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::Tensor;

/// Principal subspace of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// Training mean, `[D]`.
    pub mean: Tensor,
    /// Orthonormal rows, `[p, D]`.
    pub components: Tensor,
    /// Variance along each component, non-increasing.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn to_tensors(&self, store: &mut ParamStore) {
        store.insert("pca.mean".into(), self.mean.clone());
        store.insert("pca.components".into(), self.components.clone());
        store.insert("pca.eigenvalues".into(), Tensor::vector(self.eigenvalues.clone()));
    }

    pub fn from_tensors(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(name)
                .cloned()
                .ok_or_else(|| Error::ModelInvalid(format!("missing tensor `{name}`")))
        };
        let mean = get("pca.mean")?;
        let components = get("pca.components")?;
        let eigenvalues = get("pca.eigenvalues")?.into_data();
        components.expect_shape(&[eigenvalues.len(), mean.len()])?;
        Ok(Self { mean, components, eigenvalues })
    }

    /// Maps a reduced vector back to input space.
    pub fn reconstruct(&self, y: &Tensor) -> Result<Tensor> {
        let (p, d) = (self.output_dim(), self.input_dim());
        y.expect_shape(&[p])?;
        let mut x = self.mean.clone();
        let c = self.components.data();
        for (k, &yk) in y.data().iter().enumerate() {
            for (xi, ci) in x.data_mut().iter_mut().zip(&c[k * d..(k + 1) * d]) {
                *xi += yk * ci;
            }
        }
        Ok(x)
    }
}

/// Fits the top-`p` principal components of `features` (covariance
/// normalised by `n − 1`).
pub fn pca_fit(features: &[Tensor], p: usize) -> Result<PcaModel> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Dimension(format!("PCA needs at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    for f in features {
        f.expect_shape(&[d])?;
    }
    if p == 0 || p > d.min(n - 1) {
        return Err(Error::Dimension(format!(
            "PCA target dimension {p} must lie in 1..={}",
            d.min(n - 1)
        )));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut centered = DMatrix::<f64>::zeros(d, n);
    for (j, f) in features.iter().enumerate() {
        for i in 0..d {
            centered[(i, j)] = f.data()[i] - mean[i];
        }
    }
    let mut cov = &centered * centered.transpose() / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(p * d);
    let mut eigenvalues = Vec::with_capacity(p);
    for &k in &order[..p] {
        let col = eig.eigenvectors.column(k);
        // fix the sign so the largest-magnitude entry is positive
        let pivot = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| sign * v));
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel {
        mean: Tensor::vector(mean),
        components: Tensor::from_vec(&[p, d], components)?,
        eigenvalues,
    })
}

/// `components · (x − mean)`.
pub fn pca_transform(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    let d = model.input_dim();
    x.expect_shape(&[d])?;
    let centered: Vec<f64> = x.data().iter().zip(model.mean.data()).map(|(a, m)| a - m).collect();
    let out = model
        .components
        .data()
        .chunks_exact(d)
        .map(|row| row.iter().zip(&centered).map(|(c, v)| c * v).sum())
        .collect();
    Ok(Tensor::vector(out))
}
