//! Region ensembles, PCA and Joint Bayesian scoring.

mod ensemble;
mod joint_bayesian;
mod pca;

pub use ensemble::{crop_resize, ensemble_extract, mirror, EnsembleEntry, EnsembleSpec, Region};
pub use joint_bayesian::{
    jb_fit, jb_log_likelihood, jb_score, jb_score_direct, JbFit, JbScorer, JointBayesianModel, DEFAULT_EM_ITERS,
    EM_RIDGE,
};
pub use pca::{pca_fit, pca_transform, PcaModel};
