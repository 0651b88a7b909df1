//! Learnable Gaussian-mixture prior `p(y) p(z|y)`.
//!
//! Mixture weights are fixed at `1/K`. Means and log standard deviations live
//! in the shared [`ParameterStore`] under `prior.mu` and `prior.log_sigma`
//! (both `K × J`), so the generator and prior optimizers can both write them.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{log_sum_exp, Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const MU_NAME: &str = "prior.mu";
pub const LOG_SIGMA_NAME: &str = "prior.log_sigma";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorInit {
    /// i.i.d. `N(0, 1)` means.
    #[default]
    Gaussian,
    /// Orthonormal rows (or columns, when `K > J`) of the mean matrix.
    Orthogonal,
}

/// One reparameterized draw `z = mu_y + sigma_y * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraw {
    pub y: usize,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
}

/// A batch of latent draws recorded on a graph.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub y: Vec<usize>,
    /// `n × J` standard-normal noise.
    pub eps: Tensor,
    /// `n × J` latents, differentiable in `mu` and `log_sigma`.
    pub z: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    k: usize,
    j: usize,
    phi: Vec<f64>,
    sigma_min: f64,
    log_sigma_floor: f64,
    mu: ParamId,
    log_sigma: ParamId,
}

impl GmmPrior {
    /// Registers fresh prior parameters: means per `init`, all `sigma = 1`.
    pub fn new(
        store: &mut ParameterStore,
        k: usize,
        j: usize,
        sigma_min: f64,
        init: PriorInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k == 0 || j == 0 {
            return Err(Error::InvalidArgument(format!(
                "prior needs K >= 1 and J >= 1, got K={k}, J={j}"
            )));
        }
        let mu = match init {
            PriorInit::Gaussian => rng::normals(rng, k * j),
            PriorInit::Orthogonal => orthogonal(k, j, rng),
        };
        store.add(MU_NAME, Tensor::matrix(k, j, mu)?)?;
        store.add(LOG_SIGMA_NAME, Tensor::zeros(&[k, j]))?;
        Self::attach(store, k, j, sigma_min)
    }

    /// Binds to prior parameters already present in `store`.
    pub fn attach(store: &ParameterStore, k: usize, j: usize, sigma_min: f64) -> Result<Self> {
        if !(sigma_min > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_min must be positive, got {sigma_min}"
            )));
        }
        let mu = store.id(MU_NAME)?;
        let log_sigma = store.id(LOG_SIGMA_NAME)?;
        for id in [mu, log_sigma] {
            if store.value(id).shape() != [k, j] {
                return Err(Error::ShapeMismatch {
                    op: "prior",
                    lhs: store.value(id).shape().to_vec(),
                    rhs: vec![k, j],
                });
            }
        }
        Ok(Self {
            k,
            j,
            phi: vec![1.0 / k as f64; k],
            sigma_min,
            log_sigma_floor: log_floor(sigma_min),
            mu,
            log_sigma,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn mu_id(&self) -> ParamId {
        self.mu
    }

    pub fn log_sigma_id(&self) -> ParamId {
        self.log_sigma
    }

    /// Both learnable arrays, the `theta_c` group minus the fixed weights.
    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.mu, self.log_sigma]
    }

    pub fn mu<'a>(&self, store: &'a ParameterStore) -> &'a [f64] {
        store.values(self.mu)
    }

    pub fn log_sigma<'a>(&self, store: &'a ParameterStore) -> &'a [f64] {
        store.values(self.log_sigma)
    }

    pub fn sigma(&self, store: &ParameterStore) -> Vec<f64> {
        self.log_sigma(store).iter().map(|l| l.exp()).collect()
    }

    pub fn min_sigma(&self, store: &ParameterStore) -> f64 {
        self.sigma(store).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// i.i.d. cluster indices from `Categorical(phi)`.
    pub fn sample_y(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample_y: n must be >= 1".into()));
        }
        Ok((0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, &p) in self.phi.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k;
                    }
                }
                self.k - 1
            })
            .collect())
    }

    fn check_indices(&self, y: &[usize]) -> Result<()> {
        match y.iter().find(|&&v| v >= self.k) {
            Some(&bad) => Err(Error::IndexOutOfRange {
                what: "cluster index",
                index: bad,
                bound: self.k,
            }),
            None => Ok(()),
        }
    }

    /// `z = mu_y + sigma_y * eps` on the graph, for given noise.
    pub fn latent_graph(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        y: &[usize],
        eps: &Tensor,
    ) -> Result<Var> {
        self.check_indices(y)?;
        if eps.shape() != [y.len(), self.j] {
            return Err(Error::ShapeMismatch {
                op: "latent",
                lhs: eps.shape().to_vec(),
                rhs: vec![y.len(), self.j],
            });
        }
        let mu = g.param(store, self.mu);
        let ls = g.param(store, self.log_sigma);
        let mu_y = g.index_rows(mu, y)?;
        let ls_y = g.index_rows(ls, y)?;
        let sigma_y = g.exp(ls_y);
        let e = g.constant(eps.clone());
        let scaled = g.mul(sigma_y, e)?;
        g.add(mu_y, scaled)
    }

    /// Draws fresh noise for `y` and records the reparameterized latents.
    pub fn sample_z_given_y(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        y: &[usize],
        rng: &mut impl Rng,
    ) -> Result<LatentBatch> {
        let eps = Tensor::matrix(y.len(), self.j, rng::normals(rng, y.len() * self.j))?;
        let z = self.latent_graph(g, store, y, &eps)?;
        Ok(LatentBatch {
            y: y.to_vec(),
            eps,
            z,
        })
    }

    /// Graph-free version of [`Self::latent_graph`].
    pub fn latent(&self, store: &ParameterStore, y: usize, eps: &[f64]) -> Result<LatentDraw> {
        self.check_indices(&[y])?;
        let (mu, ls) = (self.mu(store), self.log_sigma(store));
        let row = y * self.j..(y + 1) * self.j;
        let z = mu[row.clone()]
            .iter()
            .zip(&ls[row])
            .zip(eps)
            .map(|((m, l), e)| m + l.exp() * e)
            .collect();
        Ok(LatentDraw {
            y,
            eps: eps.to_vec(),
            z,
        })
    }

    pub fn sample_draws(
        &self,
        store: &ParameterStore,
        y: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Vec<LatentDraw>> {
        y.iter()
            .map(|&c| {
                let eps = rng::normals(rng, self.j);
                self.latent(store, c, &eps)
            })
            .collect()
    }

    /// Per-component diagonal Gaussian log densities at `z`.
    pub fn log_densities(&self, store: &ParameterStore, z: &[f64]) -> Vec<f64> {
        let (mu, ls) = (self.mu(store), self.log_sigma(store));
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        (0..self.k)
            .map(|k| {
                (0..self.j)
                    .map(|j| {
                        let (m, l) = (mu[k * self.j + j], ls[k * self.j + j]);
                        let u = (z[j] - m) * (-l).exp();
                        -half_log_2pi - l - 0.5 * u * u
                    })
                    .sum()
            })
            .collect()
    }

    /// `log q(y = m | z)` for every component `m`.
    pub fn log_membership(&self, store: &ParameterStore, z: &[f64]) -> Vec<f64> {
        let dens = self.log_densities(store, z);
        let norm = log_sum_exp(&dens);
        dens.into_iter().map(|d| d - norm).collect()
    }

    /// Row-wise log memberships of an `n × J` latent batch, as `n × K`.
    pub fn log_membership_graph(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        z: Var,
    ) -> Result<Var> {
        let (k, j) = (self.k, self.j);
        let n = match g.shape(z) {
            [n, w] if *w == j => *n,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "log_membership",
                    lhs: other.to_vec(),
                    rhs: vec![0, j],
                })
            }
        };
        let mu = g.param(store, self.mu);
        let ls = g.param(store, self.log_sigma);
        let mu_flat = g.reshape(mu, &[1, k * j])?;
        let ls_flat = g.reshape(ls, &[1, k * j])?;
        let z_rep = g.concat(&vec![z; k])?;
        let diff = g.sub(z_rep, mu_flat)?;
        let neg_ls = g.neg(ls_flat);
        let inv_sigma = g.exp(neg_ls);
        let u = g.mul(diff, inv_sigma)?;
        let u2 = g.square(u);
        let quad = g.scale(u2, -0.5);
        let per_dim = g.sub(quad, ls_flat)?;
        let cube = g.reshape(per_dim, &[n, k, j])?;
        let summed = g.sum_axis(cube, 2)?;
        let log_dens = g.offset(summed, -0.5 * j as f64 * (2.0 * PI).ln());
        let norm = g.log_sum_exp(log_dens);
        let norm_col = g.reshape(norm, &[n, 1])?;
        let norm_rep = g.concat(&vec![norm_col; k])?;
        g.sub(log_dens, norm_rep)
    }

    /// `sum_k phi_k [log phi_k - sum_j (1/2 + 1/2 log(2 pi sigma_kj^2))]`.
    pub fn prior_regularizer(&self, store: &ParameterStore) -> f64 {
        self.regularizer_value(store, 1.0)
    }

    /// As [`Self::prior_regularizer`] with the entropy sum divided by `J`.
    pub fn scaled_prior_regularizer(&self, store: &ParameterStore) -> f64 {
        self.regularizer_value(store, 1.0 / self.j as f64)
    }

    fn regularizer_value(&self, store: &ParameterStore, entropy_scale: f64) -> f64 {
        let ls = self.log_sigma(store);
        let c = 0.5 + 0.5 * (2.0 * PI).ln();
        self.phi
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let ent: f64 = ls[k * self.j..(k + 1) * self.j].iter().map(|l| c + l).sum();
                p * (p.ln() - entropy_scale * ent)
            })
            .sum()
    }

    /// Graph version of [`Self::scaled_prior_regularizer`].
    pub fn scaled_regularizer_graph(&self, g: &mut Graph, store: &ParameterStore) -> Result<Var> {
        let ls = g.param(store, self.log_sigma);
        let per_dim = g.offset(ls, 0.5 + 0.5 * (2.0 * PI).ln());
        let ent = g.sum_axis(per_dim, 1)?;
        let scaled = g.scale(ent, -1.0 / self.j as f64);
        let log_phi: Vec<f64> = self.phi.iter().map(|p| p.ln()).collect();
        let log_phi = g.constant(Tensor::new(vec![self.k], log_phi)?);
        let inner = g.add(scaled, log_phi)?;
        let phi = g.constant(Tensor::new(vec![self.k], self.phi.clone())?);
        let weighted = g.mul(inner, phi)?;
        Ok(g.sum(weighted))
    }

    /// Raises every `sigma < sigma_min` to exactly `sigma_min`. Returns the
    /// number of entries clamped.
    pub fn project_sigma_floor(&self, store: &mut ParameterStore) -> usize {
        let mut clamped = 0;
        for l in store.values_mut(self.log_sigma) {
            if l.exp() < self.sigma_min {
                *l = self.log_sigma_floor;
                clamped += 1;
            }
        }
        clamped
    }
}

/// Smallest `l` with `exp(l) >= sigma_min`, so a clamped entry reads back as
/// at least the floor.
fn log_floor(sigma_min: f64) -> f64 {
    let mut l = sigma_min.ln();
    while l.exp() < sigma_min {
        l = l.next_up();
    }
    l
}

fn orthogonal(k: usize, j: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Orthonormalize the shorter side; for K > J the columns end up orthonormal.
    let (count, len) = if k <= j { (k, j) } else { (j, k) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while vecs.len() < count {
        let mut v = rng::normals(rng, len);
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; k * j];
    for r in 0..k {
        for c in 0..j {
            out[r * j + c] = if k <= j { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}
