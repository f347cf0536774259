use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::Tensor;

pub const DEFAULT_EM_ITERS: usize = 20;
/// Ridge added to `S_eps` after every M-step, relative to its mean eigenvalue.
pub const EM_RIDGE: f64 = 1e-6;

/// `x = μ + ε` with `μ ~ N(0, S_mu)` per identity and `ε ~ N(0, S_eps)` per image.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBayesianModel {
    pub s_mu: Tensor,
    pub s_eps: Tensor,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let p = t.shape()[0];
    DMatrix::from_row_slice(p, p, t.data())
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let p = m.nrows();
    let data = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    Tensor::from_vec(&[p, p], data).expect("non-empty square matrix")
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::ModelInvalid(format!("{what} is not positive definite")))
}

impl JointBayesianModel {
    /// Checks symmetry, `S_eps` positive definite and `S_mu` positive semidefinite.
    pub fn new(s_mu: Tensor, s_eps: Tensor) -> Result<Self> {
        let m = Self { s_mu, s_eps };
        m.validate()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.s_mu.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.s_mu.shape().first().copied().unwrap_or(0);
        self.s_mu.expect_shape(&[p, p])?;
        self.s_eps.expect_shape(&[p, p])?;
        for (name, t) in [("S_mu", &self.s_mu), ("S_eps", &self.s_eps)] {
            if !t.all_finite() {
                return Err(Error::ModelInvalid(format!("{name} has non-finite entries")));
            }
            let m = to_matrix(t);
            let scale = m.abs().max().max(1.0);
            if (&m - m.transpose()).abs().max() > 1e-10 * scale {
                return Err(Error::ModelInvalid(format!("{name} is not symmetric")));
            }
        }
        cholesky(&to_matrix(&self.s_eps), "S_eps")?;
        let mu = to_matrix(&self.s_mu);
        let scale = mu.abs().max().max(1.0);
        if SymmetricEigen::new(symmetrize(&mu)).eigenvalues.min() < -1e-10 * scale {
            return Err(Error::ModelInvalid("S_mu is not positive semidefinite".into()));
        }
        Ok(())
    }

    pub fn to_tensors(&self, store: &mut ParamStore) {
        store.insert("jb.s_mu".into(), self.s_mu.clone());
        store.insert("jb.s_eps".into(), self.s_eps.clone());
    }

    pub fn from_tensors(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(name)
                .cloned()
                .ok_or_else(|| Error::ModelInvalid(format!("missing tensor `{name}`")))
        };
        Self::new(get("jb.s_mu")?, get("jb.s_eps")?)
    }

    /// `Σ_I` for the stacked pair `[x1; x2]`.
    fn sigma_intra(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mu = to_matrix(&self.s_mu);
        let t = &mu + to_matrix(&self.s_eps);
        let mut s = DMatrix::zeros(2 * p, 2 * p);
        s.view_mut((0, 0), (p, p)).copy_from(&t);
        s.view_mut((p, p), (p, p)).copy_from(&t);
        s.view_mut((0, p), (p, p)).copy_from(&mu);
        s.view_mut((p, 0), (p, p)).copy_from(&mu);
        s
    }
}

/// Precomputed quadratic form of the log-likelihood ratio.
///
/// With `s = x1 + x2` and `d = x1 − x2` the ratio is
/// `−¼(sᵀ(P+Q)s + dᵀ(P−Q)d) + c`, which is exactly symmetric in its
/// arguments.
#[derive(Clone, Debug)]
pub struct JbScorer {
    p: usize,
    plus: DMatrix<f64>,
    minus: DMatrix<f64>,
    constant: f64,
}

impl JbScorer {
    pub fn new(model: &JointBayesianModel) -> Result<Self> {
        let p = model.dim();
        let intra = cholesky(&model.sigma_intra(), "Σ_I")?;
        let t = cholesky(&(to_matrix(&model.s_mu) + to_matrix(&model.s_eps)), "S_mu + S_eps")?;
        let inv_i = symmetrize(&intra.inverse());
        let inv_t = symmetrize(&t.inverse());
        let pm = inv_i.view((0, 0), (p, p)) - &inv_t;
        let q = symmetrize(&inv_i.view((0, p), (p, p)).into_owned());
        Ok(Self {
            p,
            plus: &pm + &q,
            minus: &pm - &q,
            constant: -0.5 * (log_det(&intra) - 2.0 * log_det(&t)),
        })
    }

    pub fn score(&self, x1: &Tensor, x2: &Tensor) -> Result<f64> {
        x1.expect_shape(&[self.p])?;
        x2.expect_shape(&[self.p])?;
        let s: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect();
        let d: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(a, b)| a - b).collect();
        let quad = |m: &DMatrix<f64>, v: &[f64]| {
            let mut acc = 0.0;
            for i in 0..self.p {
                for j in 0..self.p {
                    acc += v[i] * m[(i, j)] * v[j];
                }
            }
            acc
        };
        Ok(-0.25 * (quad(&self.plus, &s) + quad(&self.minus, &d)) + self.constant)
    }
}

/// Log-likelihood ratio of the same-identity against the different-identity
/// hypothesis; higher means more alike.
pub fn jb_score(model: &JointBayesianModel, x1: &Tensor, x2: &Tensor) -> Result<f64> {
    JbScorer::new(model)?.score(x1, x2)
}

fn gaussian_log_density(chol: &Cholesky<f64, Dyn>, z: &DVector<f64>) -> f64 {
    let n = z.len() as f64;
    let y = chol.l_dirty().solve_lower_triangular(z).expect("Cholesky factor is invertible");
    -0.5 * (n * (2.0 * PI).ln() + log_det(chol) + y.norm_squared())
}

/// The ratio evaluated directly from both `2p`-variate Gaussian densities.
pub fn jb_score_direct(model: &JointBayesianModel, x1: &Tensor, x2: &Tensor) -> Result<f64> {
    let p = model.dim();
    x1.expect_shape(&[p])?;
    x2.expect_shape(&[p])?;
    let z = DVector::from_iterator(2 * p, x1.data().iter().chain(x2.data()).copied());
    let intra = cholesky(&model.sigma_intra(), "Σ_I")?;
    let t = to_matrix(&model.s_mu) + to_matrix(&model.s_eps);
    let mut extra = DMatrix::zeros(2 * p, 2 * p);
    extra.view_mut((0, 0), (p, p)).copy_from(&t);
    extra.view_mut((p, p), (p, p)).copy_from(&t);
    let extra = cholesky(&extra, "Σ_E")?;
    Ok(gaussian_log_density(&intra, &z) - gaussian_log_density(&extra, &z))
}

#[derive(Clone, Debug)]
pub struct JbFit {
    pub model: JointBayesianModel,
    /// Training log-likelihood after each EM iteration, preceded by the
    /// value at the initial estimate.
    pub log_likelihood: Vec<f64>,
}

fn group(features: &[Tensor], identities: &[usize]) -> Result<(Vec<Vec<DVector<f64>>>, usize)> {
    if features.len() != identities.len() {
        return Err(Error::Dataset(format!("{} features but {} labels", features.len(), identities.len())));
    }
    let p = features.first().map_or(0, Tensor::len);
    if p == 0 {
        return Err(Error::Dataset("no features".into()));
    }
    let n = features.len() as f64;
    let mut mean = DVector::zeros(p);
    for f in features {
        f.expect_shape(&[p])?;
        mean += DVector::from_column_slice(f.data());
    }
    mean /= n;
    let mut ids: Vec<usize> = identities.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut groups = vec![Vec::new(); ids.len()];
    for (f, id) in features.iter().zip(identities) {
        let g = ids.binary_search(id).expect("id collected above");
        groups[g].push(DVector::from_column_slice(f.data()) - &mean);
    }
    if groups.len() < 2 {
        return Err(Error::Dataset("Joint Bayesian fitting needs at least two identities".into()));
    }
    if groups.iter().all(|g| g.len() < 2) {
        return Err(Error::Dataset("Joint Bayesian fitting needs an identity with two samples".into()));
    }
    Ok((groups, p))
}

fn add_ridge(s_eps: &mut DMatrix<f64>) {
    let p = s_eps.nrows();
    let trace = s_eps.trace();
    // all-zero residuals still need a positive floor
    let ridge = EM_RIDGE * if trace > 0.0 { trace / p as f64 } else { 1.0 };
    for i in 0..p {
        s_eps[(i, i)] += ridge;
    }
}

/// Training-set log-likelihood under the model, marginalising each
/// identity's shared `μ`.
pub fn jb_log_likelihood(model: &JointBayesianModel, features: &[Tensor], identities: &[usize]) -> Result<f64> {
    let (groups, p) = group(features, identities)?;
    if model.dim() != p {
        return Err(Error::shape(format!("model dimension {} but features have {p}", model.dim())));
    }
    log_likelihood(&groups, &to_matrix(&model.s_mu), &to_matrix(&model.s_eps))
}

fn log_likelihood(groups: &[Vec<DVector<f64>>], mu: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<f64> {
    let p = mu.nrows() as f64;
    let c = p * (2.0 * PI).ln();
    let eps_chol = cholesky(eps, "S_eps")?;
    let eps_log_det = log_det(&eps_chol);
    let mut total = 0.0;
    for g in groups {
        let m = g.len() as f64;
        let mean = g.iter().fold(DVector::zeros(mu.nrows()), |a, x| a + x) / m;
        // the scaled mean √m·x̄ is independent of the m − 1 within-identity contrasts
        let between = cholesky(&(mu * m + eps), "m·S_mu + S_eps")?;
        let scaled = &mean * m.sqrt();
        total += -0.5 * (c + log_det(&between) + scaled.dot(&between.solve(&scaled)));
        let mut within = 0.0;
        for x in g {
            let r = x - &mean;
            within += r.dot(&eps_chol.solve(&r));
        }
        total += -0.5 * ((m - 1.0) * (c + eps_log_det) + within);
    }
    Ok(total)
}

/// Fits both covariances by EM. Features are centred on their mean first.
pub fn jb_fit(features: &[Tensor], identities: &[usize], iters: usize) -> Result<JbFit> {
    if iters == 0 {
        return Err(Error::Dimension("EM needs at least one iteration".into()));
    }
    let (groups, p) = group(features, identities)?;
    let n_images: usize = groups.iter().map(Vec::len).sum();

    // between-identity covariance of means, pooled within-identity covariance
    let mut mu = DMatrix::zeros(p, p);
    let mut eps = DMatrix::zeros(p, p);
    for g in &groups {
        let mean = g.iter().fold(DVector::zeros(p), |a, x| a + x) / g.len() as f64;
        mu += &mean * mean.transpose();
        for x in g {
            let r = x - &mean;
            eps += &r * r.transpose();
        }
    }
    mu /= groups.len() as f64;
    eps /= n_images as f64;
    add_ridge(&mut eps);

    let mut history = vec![log_likelihood(&groups, &mu, &eps)?];
    for _ in 0..iters {
        let mut next_mu = DMatrix::zeros(p, p);
        let mut next_eps = DMatrix::zeros(p, p);
        for g in &groups {
            let m = g.len() as f64;
            let mean = g.iter().fold(DVector::zeros(p), |a, x| a + x) / m;
            // posterior of μ: gain K = S_mu (S_mu + S_eps/m)⁻¹
            let chol = cholesky(&(&mu + &eps / m), "S_mu + S_eps/m")?;
            let gain = chol.solve(&mu).transpose();
            let post_mean = &gain * &mean;
            let post_cov = symmetrize(&(&mu - &gain * &mu));
            next_mu += &post_mean * post_mean.transpose() + &post_cov;
            for x in g {
                let r = x - &post_mean;
                next_eps += &r * r.transpose() + &post_cov;
            }
        }
        mu = symmetrize(&(next_mu / groups.len() as f64));
        eps = symmetrize(&(next_eps / n_images as f64));
        add_ridge(&mut eps);
        history.push(log_likelihood(&groups, &mu, &eps)?);
    }
    Ok(JbFit {
        model: JointBayesianModel::new(to_tensor(&mu), to_tensor(&eps))?,
        log_likelihood: history,
    })
}
