//! Independent numerical oracles shared by the integration tests. Nothing
//! here calls into the crate's linear algebra.
#![allow(dead_code)]

use deepid::{Rng, Tensor};

/// Square matrix stored row-major.
#[derive(Clone, Debug)]
pub struct Mat {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Self { n, a: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self { n: t.shape()[0], a: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.n, self.n], self.a.clone()).unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
    }

    pub fn frobenius(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        Mat { n: self.n, a: self.a.iter().zip(&other.a).map(|(x, y)| x - y).collect() }
    }

    /// Random symmetric positive definite matrix `B Bᵀ + floor·I`.
    pub fn random_spd(n: usize, floor: f64, rng: &mut Rng) -> Mat {
        let b: Vec<f64> = (0..n * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut m = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
                m.set(i, j, v + if i == j { floor } else { 0.0 });
            }
        }
        m
    }
}

/// Cyclic Jacobi eigenvalue iteration; eigenvalues sorted non-increasing.
pub fn jacobi_eigenvalues(m: &Mat) -> Vec<f64> {
    let n = m.n;
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a.at(i, j).powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a.at(i, i)).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Log-determinant and inverse-quadratic form `zᵀ Σ⁻¹ z` by Gaussian
/// elimination with partial pivoting.
pub fn log_det_and_quad(sigma: &Mat, z: &[f64]) -> (f64, f64) {
    let n = sigma.n;
    let mut a = sigma.a.clone();
    let mut b = z.to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        let d = a[col * n + col];
        assert!(d > 0.0 || d < 0.0, "singular covariance");
        log_det += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    (log_det, z.iter().zip(&x).map(|(u, v)| u * v).sum())
}

pub fn gaussian_log_density(sigma: &Mat, z: &[f64]) -> f64 {
    let (ld, q) = log_det_and_quad(sigma, z);
    -0.5 * (z.len() as f64 * (2.0 * std::f64::consts::PI).ln() + ld + q)
}

/// Joint covariance of `m` stacked samples sharing one identity.
pub fn identity_block_covariance(s_mu: &Mat, s_eps: &Mat, m: usize) -> Mat {
    let p = s_mu.n;
    let mut big = Mat::zeros(m * p);
    for a in 0..m {
        for b in 0..m {
            for i in 0..p {
                for j in 0..p {
                    let v = s_mu.at(i, j) + if a == b { s_eps.at(i, j) } else { 0.0 };
                    big.set(a * p + i, b * p + j, v);
                }
            }
        }
    }
    big
}

/// Log-likelihood of a labelled set evaluated on the full joint covariance
/// of every identity.
pub fn jb_log_likelihood_oracle(s_mu: &Mat, s_eps: &Mat, features: &[Tensor], identities: &[usize]) -> f64 {
    let p = s_mu.n;
    let n = features.len() as f64;
    let mut mean = vec![0.0; p];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v / n;
        }
    }
    let max_id = identities.iter().max().copied().unwrap_or(0);
    let mut total = 0.0;
    for id in 0..=max_id {
        let z: Vec<f64> = features
            .iter()
            .zip(identities)
            .filter(|(_, &i)| i == id)
            .flat_map(|(f, _)| f.data().iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
            .collect();
        if z.is_empty() {
            continue;
        }
        let cov = identity_block_covariance(s_mu, s_eps, z.len() / p);
        total += gaussian_log_density(&cov, &z);
    }
    total
}

/// Samples `ids × per_id` features from `x = μ + ε` with identity covariances.
pub fn sample_identity_model(p: usize, ids: usize, per_id: usize, rng: &mut Rng) -> (Vec<Tensor>, Vec<usize>) {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for id in 0..ids {
        let mu: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        for _ in 0..per_id {
            feats.push(Tensor::vector(mu.iter().map(|m| m + rng.normal()).collect()));
            labels.push(id);
        }
    }
    (feats, labels)
}
