//! Pretraining losses over masked-position outputs: mean-squared
//! reconstruction, an InfoNCE term whose negatives are the other masked
//! positions of the same clip (raw dot products, no temperature), and their
//! weighted joint. Each loss is computed per clip; batch averaging is the
//! trainer's job.

use thiserror::Error;

use crate::model::{PretrainNodes, PretrainOutput};
use crate::nn::{Element, Graph, NnError, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight on the reconstruction term in the joint loss.
    pub lambda: f64,
    pub use_generative: bool,
    pub use_discriminative: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 10.0,
            use_generative: true,
            use_discriminative: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !self.use_generative && !self.use_discriminative {
            return Err(ObjectiveError::NoLossEnabled);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("at least one of the generative and discriminative losses must be enabled")]
    NoLossEnabled,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Scalar node ids for one clip's losses. `recon` and `nce` are always
/// evaluated so metrics can report both, but `total` is wired only through
/// the enabled branches — a disabled branch contributes no gradient.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub nce: NodeId,
}

pub fn loss_nodes<E: Element>(
    g: &mut Graph<E>,
    out: &PretrainNodes,
    cfg: &LossConfig,
) -> Result<LossNodes, ObjectiveError> {
    cfg.validate()?;
    let recon = g.mse(out.recon_pred, out.targets)?;
    let nce = g.info_nce_diag(out.class_pred, out.targets)?;
    let total = match (cfg.use_generative, cfg.use_discriminative) {
        (true, true) => {
            let scaled = g.scale(recon, cfg.lambda)?;
            g.add(nce, scaled)?
        }
        (true, false) => g.scale(recon, cfg.lambda)?,
        (false, true) => nce,
        (false, false) => unreachable!("validated above"),
    };
    Ok(LossNodes { total, recon, nce })
}

/// Mean squared error over all K·256 elements.
pub fn recon_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E, ObjectiveError> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let t = g.input(target.clone());
    let l = g.mse(p, t)?;
    Ok(g.scalar(l))
}

/// −(1/K)·Σ_i log( exp(c_i·x_i) / Σ_j exp(c_i·x_j) ); the other rows of the
/// same clip are the negatives, so K ≥ 2 is required.
pub fn infonce_loss<E: Element>(c: &Tensor<E>, x: &Tensor<E>) -> Result<E, ObjectiveError> {
    let mut g = Graph::new();
    let cn = g.input(c.clone());
    let xn = g.input(x.clone());
    let l = g.info_nce_diag(cn, xn)?;
    Ok(g.scalar(l))
}

/// (total, recon, nce) for one clip's outputs.
pub fn joint_loss<E: Element>(
    out: &PretrainOutput<E>,
    cfg: &LossConfig,
) -> Result<(E, E, E), ObjectiveError> {
    cfg.validate()?;
    let mut g = Graph::new();
    let nodes = PretrainNodes {
        recon_pred: g.input(out.recon_pred.clone()),
        class_pred: g.input(out.class_pred.clone()),
        targets: g.input(out.targets.clone()),
        assembled: g.input(Tensor::zeros(&[1, 1])), // unused by the losses
        enc_out: None,
    };
    let l = loss_nodes(&mut g, &nodes, cfg)?;
    Ok((g.scalar(l.total), g.scalar(l.recon), g.scalar(l.nce)))
}
