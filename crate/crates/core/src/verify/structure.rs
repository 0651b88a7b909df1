//! Conditional-independence checks on three-variable tables.

use super::joint::DiscreteJoint;
use crate::error::{Error, Result};

/// Axes of a [`DiscreteJoint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X = 0,
    Z = 1,
    Y = 2,
}

const CONDITIONAL_TOL: f64 = 1e-10;

/// Largest `|t(a | b, c) - t(a | c)|` over cells with `t(b, c) > 0`, where
/// `c` is the axis that is neither `a` nor `b`.
pub fn conditional_gap(t: &DiscreteJoint, a: Axis, b: Axis) -> f64 {
    assert_ne!(a, b, "conditional_gap needs two distinct axes");
    let c = 3 - a as usize - b as usize;
    let dims = [t.nx, t.nz, t.ny];
    let (na, nb, nc) = (dims[a as usize], dims[b as usize], dims[c]);
    let cell = |ia: usize, ib: usize, ic: usize| {
        let mut idx = [0usize; 3];
        idx[a as usize] = ia;
        idx[b as usize] = ib;
        idx[c] = ic;
        t.p[(idx[0] * t.nz + idx[1]) * t.ny + idx[2]]
    };
    let mut worst = 0.0f64;
    for ic in 0..nc {
        let mut pc = 0.0;
        let mut pac = vec![0.0; na];
        let mut pbc = vec![0.0; nb];
        for ia in 0..na {
            for ib in 0..nb {
                let v = cell(ia, ib, ic);
                pc += v;
                pac[ia] += v;
                pbc[ib] += v;
            }
        }
        if pc <= 0.0 {
            continue;
        }
        for ib in 0..nb {
            if pbc[ib] <= 0.0 {
                continue;
            }
            for ia in 0..na {
                let gap = (cell(ia, ib, ic) / pbc[ib] - pac[ia] / pc).abs();
                worst = worst.max(gap);
            }
        }
    }
    worst
}

/// Rejects `t` unless `a` is independent of `b` given the third axis.
pub fn require_independent(t: &DiscreteJoint, a: Axis, b: Axis, what: &str) -> Result<()> {
    let gap = conditional_gap(t, a, b);
    if gap > CONDITIONAL_TOL {
        return Err(Error::Structure(format!(
            "{what}: {a:?} depends on {b:?} given the remaining variable (gap {gap:.3e})"
        )));
    }
    Ok(())
}
