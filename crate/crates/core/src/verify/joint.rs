//! Probability tables and random structured instances.

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

fn validate(p: &[f64], expected_len: usize) -> Result<()> {
    if p.len() != expected_len {
        return Err(Error::ShapeMismatch {
            op: "discrete joint",
            lhs: vec![p.len()],
            rhs: vec![expected_len],
        });
    }
    if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "probability table entry {i} is {}",
            p[i]
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidArgument(format!("probability table sums to {s}")));
    }
    Ok(())
}

/// Joint table over `X × Z × Y`, stored with `y` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pub nx: usize,
    pub nz: usize,
    pub ny: usize,
    pub p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, nz: usize, ny: usize, p: Vec<f64>) -> Result<Self> {
        validate(&p, nx * nz * ny)?;
        Ok(Self { nx, nz, ny, p })
    }

    #[inline]
    pub fn index(&self, x: usize, z: usize, y: usize) -> usize {
        (x * self.nz + z) * self.ny + y
    }

    #[inline]
    pub fn at(&self, x: usize, z: usize, y: usize) -> f64 {
        self.p[self.index(x, z, y)]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.nx, self.nz, self.ny) != (other.nx, other.nz, other.ny) {
            return Err(Error::ShapeMismatch {
                op: "discrete joint",
                lhs: vec![self.nx, self.nz, self.ny],
                rhs: vec![other.nx, other.nz, other.ny],
            });
        }
        Ok(())
    }
}

/// Joint table over `X × Z`, stored with `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint2 {
    pub nx: usize,
    pub nz: usize,
    pub p: Vec<f64>,
}

impl DiscreteJoint2 {
    pub fn new(nx: usize, nz: usize, p: Vec<f64>) -> Result<Self> {
        validate(&p, nx * nz)?;
        Ok(Self { nx, nz, p })
    }

    #[inline]
    pub fn at(&self, x: usize, z: usize) -> f64 {
        self.p[x * self.nz + z]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.nx, self.nz) != (other.nx, other.nz) {
            return Err(Error::ShapeMismatch {
                op: "discrete joint",
                lhs: vec![self.nx, self.nz],
                rhs: vec![other.nx, other.nz],
            });
        }
        Ok(())
    }
}

/// `sum p log(p / q)` with `0 log(0 / q) = 0`.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_discrete",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let mut s = 0.0;
    for (cell, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::AbsoluteContinuity { cell, p: a });
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s)
}

/// A draw from the flat Dirichlet over `n` outcomes.
pub fn dirichlet_flat(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// `n_rows` independent flat-Dirichlet rows of length `n`.
fn rows(n_rows: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n_rows).map(|_| dirichlet_flat(n, rng)).collect()
}

/// Generative joint `p(y) p(z|y) p(x|z,y)`.
pub fn random_generative(nx: usize, nz: usize, ny: usize, rng: &mut impl Rng) -> Result<DiscreteJoint> {
    let py = dirichlet_flat(ny, rng);
    let pz_y = rows(ny, nz, rng);
    let px_zy = rows(nz * ny, nx, rng);
    let mut p = vec![0.0; nx * nz * ny];
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                p[(x * nz + z) * ny + y] = py[y] * pz_y[y][z] * px_zy[z * ny + y][x];
            }
        }
    }
    DiscreteJoint::new(nx, nz, ny, renormalize(p))
}

/// Inference joint `q(x) q(z|x) q(y|z)`.
pub fn random_inference(nx: usize, nz: usize, ny: usize, rng: &mut impl Rng) -> Result<DiscreteJoint> {
    let qx = dirichlet_flat(nx, rng);
    let qz_x = rows(nx, nz, rng);
    let qy_z = rows(nz, ny, rng);
    let mut q = vec![0.0; nx * nz * ny];
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                q[(x * nz + z) * ny + y] = qx[x] * qz_x[x][z] * qy_z[z][y];
            }
        }
    }
    DiscreteJoint::new(nx, nz, ny, renormalize(q))
}

/// Mixture-prior generative joint `p(y) p(z|y) p(x|z)`.
pub fn random_mixture_generative(nx: usize, nz: usize, ny: usize, rng: &mut impl Rng) -> Result<DiscreteJoint> {
    let py = dirichlet_flat(ny, rng);
    let pz_y = rows(ny, nz, rng);
    let px_z = rows(nz, nx, rng);
    let mut p = vec![0.0; nx * nz * ny];
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                p[(x * nz + z) * ny + y] = py[y] * pz_y[y][z] * px_z[z][x];
            }
        }
    }
    DiscreteJoint::new(nx, nz, ny, renormalize(p))
}

/// Inference joint `q(x) q(z|x) q(y|x)`.
pub fn random_mixture_inference(nx: usize, nz: usize, ny: usize, rng: &mut impl Rng) -> Result<DiscreteJoint> {
    let qx = dirichlet_flat(nx, rng);
    let qz_x = rows(nx, nz, rng);
    let qy_x = rows(nx, ny, rng);
    let mut q = vec![0.0; nx * nz * ny];
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                q[(x * nz + z) * ny + y] = qx[x] * qz_x[x][z] * qy_x[x][y];
            }
        }
    }
    DiscreteJoint::new(nx, nz, ny, renormalize(q))
}

/// Two-variable generative joint `p(z) p(x|z)`.
pub fn random_generative2(nx: usize, nz: usize, rng: &mut impl Rng) -> Result<DiscreteJoint2> {
    let pz = dirichlet_flat(nz, rng);
    let px_z = rows(nz, nx, rng);
    let mut p = vec![0.0; nx * nz];
    for x in 0..nx {
        for z in 0..nz {
            p[x * nz + z] = pz[z] * px_z[z][x];
        }
    }
    DiscreteJoint2::new(nx, nz, renormalize(p))
}

/// Two-variable inference joint `q(x) q(z|x)`.
pub fn random_inference2(nx: usize, nz: usize, rng: &mut impl Rng) -> Result<DiscreteJoint2> {
    let qx = dirichlet_flat(nx, rng);
    let qz_x = rows(nx, nz, rng);
    let mut q = vec![0.0; nx * nz];
    for x in 0..nx {
        for z in 0..nz {
            q[x * nz + z] = qx[x] * qz_x[x][z];
        }
    }
    DiscreteJoint2::new(nx, nz, renormalize(q))
}

/// Removes the rounding drift of a product of normalized factors.
fn renormalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}
