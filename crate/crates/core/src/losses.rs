//! Loss terms of the joint-matching objective.
//!
//! * adversarial data matching: hinge discriminator/generator losses;
//! * latent terms: encoder negative log-likelihood (scaled by `1/D`) and the
//!   cluster cross-entropy against the mixture membership;
//! * prior regularizer: mixture-weight entropy plus per-component Gaussian
//!   entropy (scaled by `1/J`), weighted by `lambda_p`.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::TrainConfig;
use crate::error::{Error, Result};

fn check_nonempty(g: &Graph, v: Var, op: &str) -> Result<()> {
    if g.value(v).is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty batch")));
    }
    Ok(())
}

/// `mean(max(0, 1 - o_real)) + mean(max(0, 1 + o_fake))`.
pub fn hinge_d_loss(g: &mut Graph, o_real: Var, o_fake: Var) -> Result<Var> {
    check_nonempty(g, o_real, "hinge_d_loss")?;
    check_nonempty(g, o_fake, "hinge_d_loss")?;
    let neg_real = g.neg(o_real);
    let real_margin = g.offset(neg_real, 1.0);
    let real_hinge = g.relu(real_margin);
    let real = g.mean(real_hinge);
    let fake_margin = g.offset(o_fake, 1.0);
    let fake_hinge = g.relu(fake_margin);
    let fake = g.mean(fake_hinge);
    g.add(real, fake)
}

/// `-mean(o_fake)`.
pub fn hinge_g_loss(g: &mut Graph, o_fake: Var) -> Result<Var> {
    check_nonempty(g, o_fake, "hinge_g_loss")?;
    let m = g.mean(o_fake);
    Ok(g.neg(m))
}

/// Gaussian negative log-likelihood of `z` under the encoder's diagonal
/// Gaussian, summed over latent dimensions, averaged over the batch and
/// divided by the data dimensionality `data_dim`.
pub fn encoder_nll(g: &mut Graph, mean: Var, log_var: Var, z: Var, data_dim: usize) -> Result<Var> {
    let shape = g.shape(mean).to_vec();
    for v in [log_var, z] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encoder_nll",
                lhs: shape,
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "encoder_nll",
            shape,
            reason: "expected n × J".into(),
        });
    }
    let n = shape[0] as f64;
    let diff = g.sub(z, mean)?;
    let sq = g.square(diff);
    let neg_lv = g.neg(log_var);
    let inv_var = g.exp(neg_lv);
    let quad = g.mul(sq, inv_var)?;
    let quad = g.scale(quad, 0.5);
    let half_lv = g.scale(log_var, 0.5);
    let per_dim = g.add(quad, half_lv)?;
    let per_dim = g.offset(per_dim, 0.5 * (2.0 * PI).ln());
    let total = g.sum(per_dim);
    Ok(g.scale(total, 1.0 / (n * data_dim as f64)))
}

/// Value-only form of [`encoder_nll`] taking variances; rejects `var <= 0`.
pub fn encoder_nll_value(mean: &[f64], var: &[f64], z: &[f64], j: usize, data_dim: usize) -> Result<f64> {
    if mean.len() != var.len() || mean.len() != z.len() || j == 0 || mean.len() % j != 0 {
        return Err(Error::ShapeMismatch {
            op: "encoder_nll",
            lhs: vec![mean.len()],
            rhs: vec![var.len(), z.len()],
        });
    }
    if let Some((index, &value)) = var.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::LogDomain {
            op: "encoder_nll",
            index,
            value,
        });
    }
    let n = (mean.len() / j) as f64;
    let total: f64 = mean
        .iter()
        .zip(var)
        .zip(z)
        .map(|((m, v), zz)| 0.5 * (2.0 * PI * v).ln() + (zz - m).powi(2) / (2.0 * v))
        .sum();
    Ok(total / (n * data_dim as f64))
}

/// `-mean_i log q(y = y_i | z_i)` from an `n × K` log-membership matrix.
pub fn cluster_ce(g: &mut Graph, y: &[usize], log_membership: Var) -> Result<Var> {
    let (n, k) = match g.shape(log_membership) {
        [n, k] => (*n, *k),
        other => {
            return Err(Error::InvalidShape {
                op: "cluster_ce",
                shape: other.to_vec(),
                reason: "expected n × K".into(),
            })
        }
    };
    if y.len() != n {
        return Err(Error::InvalidArgument(format!(
            "cluster_ce: {} labels for {n} rows",
            y.len()
        )));
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &label) in y.iter().enumerate() {
        if label >= k {
            return Err(Error::IndexOutOfRange {
                what: "cluster_ce label",
                index: label,
                bound: k,
            });
        }
        onehot[i * k + label] = 1.0;
    }
    let mask = g.constant(Tensor::matrix(n, k, onehot)?);
    let picked = g.mul(log_membership, mask)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// `cluster_ce + lambda_p * scaled_regularizer`.
pub fn prior_objective(g: &mut Graph, cluster_ce: Var, scaled_regularizer: Var, lambda_p: f64) -> Result<Var> {
    let weighted = g.scale(scaled_regularizer, lambda_p);
    g.add(cluster_ce, weighted)
}

/// Scalar losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    /// Encoder NLL, already scaled by `1/D`.
    pub enc_nll: f64,
    pub cluster_ce: f64,
    /// `lambda_p` times the `1/J`-scaled regularizer.
    pub prior_reg: f64,
}

/// Raw per-iteration values before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchPieces {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub enc_nll: f64,
    pub cluster_ce: f64,
    pub scaled_regularizer: f64,
}

impl LossBreakdown {
    pub fn assemble(config: &TrainConfig, pieces: BatchPieces) -> Self {
        Self {
            d_loss: pieces.d_loss,
            g_adv_loss: pieces.g_adv_loss,
            enc_nll: pieces.enc_nll,
            cluster_ce: pieces.cluster_ce,
            prior_reg: config.lambda_p * pieces.scaled_regularizer,
        }
    }

    /// Objective minimized by the prior update.
    pub fn prior_objective(&self) -> f64 {
        self.cluster_ce + self.prior_reg
    }

    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("d_loss", self.d_loss),
            ("g_adv_loss", self.g_adv_loss),
            ("enc_nll", self.enc_nll),
            ("cluster_ce", self.cluster_ce),
            ("prior_reg", self.prior_reg),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}
