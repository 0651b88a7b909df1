//! Exact checks of the KL identities behind the objective, on finite
//! supports where every integral is a sum.
//!
//! Left-hand sides come from [`direct`], which only compares whole joint
//! tables; right-hand sides come from [`decomposed`], which owns every
//! marginalization. The two never share a helper.

pub mod decomposed;
pub mod direct;
pub mod joint;
pub mod mc;
pub mod structure;

pub use joint::{kl_discrete, DiscreteJoint, DiscreteJoint2};
pub use mc::{mc_estimate_check, GaussianPair, McReport, MC_DRAWS};

use rand::Rng;

use crate::error::Result;
use crate::rng;
use structure::{require_independent, Axis};

pub const DEFAULT_TOL: f64 = 1e-10;

/// One `lhs == rhs` comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: &'static str,
    pub lhs: f64,
    pub rhs: f64,
}

impl Check {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub tol: f64,
}

impl Report {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(Check::gap).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.gap() < self.tol)
    }
}

/// `KL(p(x,z,y) || q(x,z,y))` against the sum of the divergences of
/// `x | (z, y)`, `z | y` and `y`. `q` must satisfy `q(y|x,z) = q(y|z)`.
pub fn verify_three_var_reverse(p: &DiscreteJoint, q: &DiscreteJoint, tol: f64) -> Result<Report> {
    require_independent(q, Axis::Y, Axis::X, "inference joint")?;
    let lhs = direct::joint_kl(p, q)?;
    let rhs: f64 = decomposed::reverse_three(p, q)?.iter().sum();
    Ok(Report {
        name: "three_var_reverse",
        checks: vec![Check {
            label: "joint = conditionals + prior",
            lhs,
            rhs,
        }],
        tol,
    })
}

/// The divergence decomposition against the data-matching, latent and prior
/// loss groups evaluated termwise.
pub fn verify_loss_decomposition(p: &DiscreteJoint, q: &DiscreteJoint, tol: f64) -> Result<Report> {
    require_independent(q, Axis::Y, Axis::X, "inference joint")?;
    let kl_sum: f64 = decomposed::reverse_three(p, q)?.iter().sum();
    let losses: f64 = decomposed::clustering_losses(p, q)?.iter().sum();
    let joint = direct::joint_kl(p, q)?;
    Ok(Report {
        name: "loss_decomposition",
        checks: vec![
            Check {
                label: "divergence terms = loss groups",
                lhs: kl_sum,
                rhs: losses,
            },
            Check {
                label: "joint = loss groups",
                lhs: joint,
                rhs: losses,
            },
        ],
        tol,
    })
}

/// `KL(q(z,x) || p(z,x))` against the latent-conditional plus data-marginal
/// split and against `E_q[-ELBO] + E_q[log q(x)]`.
pub fn verify_two_var_forward(p: &DiscreteJoint2, q: &DiscreteJoint2, tol: f64) -> Result<Report> {
    let lhs = direct::joint_kl2(q, p)?;
    let (cond, marg) = decomposed::forward_two(q, p)?;
    let (neg_elbo, log_qx) = decomposed::forward_two_elbo(q, p)?;
    Ok(Report {
        name: "two_var_forward",
        checks: vec![
            Check {
                label: "joint = conditional + marginal",
                lhs,
                rhs: cond + marg,
            },
            Check {
                label: "joint = -ELBO + log q(x)",
                lhs,
                rhs: neg_elbo + log_qx,
            },
        ],
        tol,
    })
}

/// `KL(p(z,x) || q(z,x))` against the data-conditional plus latent-marginal
/// split, with the marginal also expanded into cross-entropy and entropy.
pub fn verify_two_var_reverse(p: &DiscreteJoint2, q: &DiscreteJoint2, tol: f64) -> Result<Report> {
    let lhs = direct::joint_kl2(p, q)?;
    let (cond, marg) = decomposed::reverse_two(p, q)?;
    let (cross, neg_ent) = decomposed::reverse_two_marginal_split(p, q)?;
    Ok(Report {
        name: "two_var_reverse",
        checks: vec![
            Check {
                label: "joint = conditional + marginal",
                lhs,
                rhs: cond + marg,
            },
            Check {
                label: "joint = conditional + cross-entropy - entropy",
                lhs,
                rhs: cond + cross + neg_ent,
            },
        ],
        tol,
    })
}

/// `KL(q(x,z,y) || p(x,z,y))` for the mixture-prior VAE structure
/// (`p(y) p(z|y) p(x|z)` against `q(x) q(z|x) q(y|x)`) against
/// `E_{q(x)}[log q(x) - L(x)]`, plus the cluster-posterior term in its
/// factor form.
pub fn verify_vade_identity(p: &DiscreteJoint, q: &DiscreteJoint, tol: f64) -> Result<Report> {
    require_independent(q, Axis::Y, Axis::Z, "inference joint")?;
    require_independent(p, Axis::X, Axis::Y, "generative joint")?;
    let lhs = direct::joint_kl(q, p)?;
    let terms = decomposed::forward_three(q, p)?;
    let (log_qx, bound) = decomposed::mixture_elbo(q, p)?;
    let posterior = decomposed::mixture_posterior_term(q, p)?;
    Ok(Report {
        name: "vade_identity",
        checks: vec![
            Check {
                label: "joint = log q(x) - bound",
                lhs,
                rhs: log_qx - bound,
            },
            Check {
                label: "joint = posterior + conditional + marginal",
                lhs,
                rhs: terms.iter().sum(),
            },
            Check {
                label: "posterior divergence = factor form",
                lhs: terms[0],
                rhs: posterior,
            },
        ],
        tol,
    })
}

/// Largest supports used for random instances.
pub const MAX_SUPPORT: (usize, usize, usize) = (5, 5, 3);

fn sizes(rng: &mut impl Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..=MAX_SUPPORT.0),
        rng.random_range(1..=MAX_SUPPORT.1),
        rng.random_range(1..=MAX_SUPPORT.2),
    )
}

/// Outcome of one identity over many random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySummary {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub worst: f64,
}

impl IdentitySummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub identities: Vec<IdentitySummary>,
    pub mc: Vec<McReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.identities.iter().all(IdentitySummary::passed) && self.mc.iter().all(McReport::passed)
    }
}

type Instance = fn(&mut rng::Stream, f64) -> Result<Report>;

fn instances() -> [(&'static str, Instance); 5] {
    [
        ("three_var_reverse", |r, tol| {
            let (nx, nz, ny) = sizes(r);
            let p = joint::random_generative(nx, nz, ny, r)?;
            let q = joint::random_inference(nx, nz, ny, r)?;
            verify_three_var_reverse(&p, &q, tol)
        }),
        ("loss_decomposition", |r, tol| {
            let (nx, nz, ny) = sizes(r);
            let p = joint::random_generative(nx, nz, ny, r)?;
            let q = joint::random_inference(nx, nz, ny, r)?;
            verify_loss_decomposition(&p, &q, tol)
        }),
        ("two_var_forward", |r, tol| {
            let (nx, nz, _) = sizes(r);
            let p = joint::random_generative2(nx, nz, r)?;
            let q = joint::random_inference2(nx, nz, r)?;
            verify_two_var_forward(&p, &q, tol)
        }),
        ("two_var_reverse", |r, tol| {
            let (nx, nz, _) = sizes(r);
            let p = joint::random_generative2(nx, nz, r)?;
            let q = joint::random_inference2(nx, nz, r)?;
            verify_two_var_reverse(&p, &q, tol)
        }),
        ("vade_identity", |r, tol| {
            let (nx, nz, ny) = sizes(r);
            let p = joint::random_mixture_generative(nx, nz, ny, r)?;
            let q = joint::random_mixture_inference(nx, nz, ny, r)?;
            verify_vade_identity(&p, &q, tol)
        }),
    ]
}

/// Runs every identity on `trials` random instances each, and the Monte
/// Carlo check on `mc_configs` random Gaussian pairs with `mc_draws` draws.
pub fn run_suite(trials: usize, tol: f64, mc_configs: usize, mc_draws: usize, seed: u64) -> Result<SuiteReport> {
    let mut identities = Vec::new();
    for (i, (name, run)) in instances().into_iter().enumerate() {
        let mut r = rng::derived(seed, i as u64);
        let mut summary = IdentitySummary {
            name,
            trials,
            failures: 0,
            worst: 0.0,
        };
        for _ in 0..trials {
            let rep = run(&mut r, tol)?;
            summary.worst = summary.worst.max(rep.worst());
            if !rep.passed() {
                summary.failures += 1;
            }
        }
        identities.push(summary);
    }
    let mut r = rng::derived(seed, 0x4D43);
    let mut mc = Vec::new();
    for _ in 0..mc_configs {
        let j = r.random_range(1..=4);
        let pair = GaussianPair::random(j, &mut r);
        mc.push(mc_estimate_check(&pair, mc_draws, &mut r)?);
    }
    Ok(SuiteReport { identities, mc })
}
