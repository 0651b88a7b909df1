//! Left-hand sides: divergences between whole joint tables, cell by cell.
//! Nothing here marginalizes.

use super::joint::{kl_discrete, DiscreteJoint, DiscreteJoint2};
use crate::error::Result;

pub fn joint_kl(a: &DiscreteJoint, b: &DiscreteJoint) -> Result<f64> {
    a.same_shape(b)?;
    kl_discrete(&a.p, &b.p)
}

pub fn joint_kl2(a: &DiscreteJoint2, b: &DiscreteJoint2) -> Result<f64> {
    a.same_shape(b)?;
    kl_discrete(&a.p, &b.p)
}
