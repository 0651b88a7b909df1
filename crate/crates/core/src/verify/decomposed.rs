//! Right-hand sides: expected conditional divergences, marginal divergences
//! and loss terms, all built from marginals computed here.

use super::joint::{DiscreteJoint, DiscreteJoint2};
use crate::error::{Error, Result};

/// Every marginal of a three-variable table.
struct Marginals {
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    xz: Vec<f64>,
    zy: Vec<f64>,
    xy: Vec<f64>,
}

fn marginals(t: &DiscreteJoint) -> Marginals {
    let (nx, nz, ny) = (t.nx, t.nz, t.ny);
    let mut m = Marginals {
        x: vec![0.0; nx],
        z: vec![0.0; nz],
        y: vec![0.0; ny],
        xz: vec![0.0; nx * nz],
        zy: vec![0.0; nz * ny],
        xy: vec![0.0; nx * ny],
    };
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                let v = t.p[(x * nz + z) * ny + y];
                m.x[x] += v;
                m.z[z] += v;
                m.y[y] += v;
                m.xz[x * nz + z] += v;
                m.zy[z * ny + y] += v;
                m.xy[x * ny + y] += v;
            }
        }
    }
    m
}

fn marginals2(t: &DiscreteJoint2) -> (Vec<f64>, Vec<f64>) {
    let mut mx = vec![0.0; t.nx];
    let mut mz = vec![0.0; t.nz];
    for x in 0..t.nx {
        for z in 0..t.nz {
            let v = t.p[x * t.nz + z];
            mx[x] += v;
            mz[z] += v;
        }
    }
    (mx, mz)
}

/// `a log(a / b)` with `0 log 0 = 0`.
fn term(a: f64, b: f64) -> Result<f64> {
    if a <= 0.0 {
        return Ok(0.0);
    }
    if b <= 0.0 {
        return Err(Error::Structure(format!(
            "conditional has mass {a} where the reference has none"
        )));
    }
    Ok(a * (a / b).ln())
}

fn check_shapes(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<()> {
    p.same_shape(q)
}

/// `[E_{p(z,y)} KL(p(x|z,y) || q(x|z,y)), E_{p(y)} KL(p(z|y) || q(z|y)), KL(p(y) || q(y))]`.
pub fn reverse_three(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<[f64; 3]> {
    check_shapes(p, q)?;
    let (mp, mq) = (marginals(p), marginals(q));
    let (nx, nz, ny) = (p.nx, p.nz, p.ny);
    let mut cond_x = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            let (pzy, qzy) = (mp.zy[z * ny + y], mq.zy[z * ny + y]);
            if pzy <= 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for x in 0..nx {
                let i = (x * nz + z) * ny + y;
                inner += term(p.p[i] / pzy, q.p[i] / qzy)?;
            }
            cond_x += pzy * inner;
        }
    }
    let mut cond_z = 0.0;
    for y in 0..ny {
        if mp.y[y] <= 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for z in 0..nz {
            inner += term(mp.zy[z * ny + y] / mp.y[y], mq.zy[z * ny + y] / mq.y[y])?;
        }
        cond_z += mp.y[y] * inner;
    }
    let mut marg_y = 0.0;
    for y in 0..ny {
        marg_y += term(mp.y[y], mq.y[y])?;
    }
    Ok([cond_x, cond_z, marg_y])
}

/// The three loss groups of the clustering objective, evaluated exactly:
/// `[E_{p(z,y)} KL(p(x|z,y) || q(x)),
///   E_p[-log q(z|x) - log q(y|z)],
///   E_p[log p(y) + log p(z|y)]]`.
pub fn clustering_losses(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<[f64; 3]> {
    check_shapes(p, q)?;
    let (mp, mq) = (marginals(p), marginals(q));
    let (nx, nz, ny) = (p.nx, p.nz, p.ny);
    let mut data_term = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            let pzy = mp.zy[z * ny + y];
            if pzy <= 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for x in 0..nx {
                inner += term(p.p[(x * nz + z) * ny + y] / pzy, mq.x[x])?;
            }
            data_term += pzy * inner;
        }
    }
    let mut latent_term = 0.0;
    let mut prior_term = 0.0;
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                let w = p.p[(x * nz + z) * ny + y];
                if w <= 0.0 {
                    continue;
                }
                let q_z_given_x = mq.xz[x * nz + z] / mq.x[x];
                let q_y_given_z = mq.zy[z * ny + y] / mq.z[z];
                latent_term -= w * (q_z_given_x.ln() + q_y_given_z.ln());
                let p_z_given_y = mp.zy[z * ny + y] / mp.y[y];
                prior_term += w * (mp.y[y].ln() + p_z_given_y.ln());
            }
        }
    }
    Ok([data_term, latent_term, prior_term])
}

/// `(E_{q(x)} KL(q(z|x) || p(z|x)), KL(q(x) || p(x)))` for tables over `X × Z`.
pub fn forward_two(q: &DiscreteJoint2, p: &DiscreteJoint2) -> Result<(f64, f64)> {
    q.same_shape(p)?;
    let (qx, _) = marginals2(q);
    let (px, _) = marginals2(p);
    let nz = q.nz;
    let mut cond = 0.0;
    for x in 0..q.nx {
        if qx[x] <= 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for z in 0..nz {
            inner += term(q.p[x * nz + z] / qx[x], p.p[x * nz + z] / px[x])?;
        }
        cond += qx[x] * inner;
    }
    let mut marg = 0.0;
    for x in 0..q.nx {
        marg += term(qx[x], px[x])?;
    }
    Ok((cond, marg))
}

/// `(E_{q(x)}[-ELBO(x)], E_{q(x)}[log q(x)])` with
/// `ELBO(x) = E_{q(z|x)}[log p(x|z) + log p(z) - log q(z|x)]`.
pub fn forward_two_elbo(q: &DiscreteJoint2, p: &DiscreteJoint2) -> Result<(f64, f64)> {
    q.same_shape(p)?;
    let (qx, _) = marginals2(q);
    let (_, pz) = marginals2(p);
    let nz = q.nz;
    let mut neg_elbo = 0.0;
    let mut log_qx = 0.0;
    for x in 0..q.nx {
        if qx[x] <= 0.0 {
            continue;
        }
        let mut elbo = 0.0;
        for z in 0..nz {
            let qzx = q.p[x * nz + z] / qx[x];
            if qzx <= 0.0 {
                continue;
            }
            let pxz = p.p[x * nz + z] / pz[z];
            elbo += qzx * (pxz.ln() + pz[z].ln() - qzx.ln());
        }
        neg_elbo -= qx[x] * elbo;
        log_qx += qx[x] * qx[x].ln();
    }
    Ok((neg_elbo, log_qx))
}

/// `(E_{p(z)} KL(p(x|z) || q(x|z)), KL(p(z) || q(z)))` for tables over `X × Z`.
pub fn reverse_two(p: &DiscreteJoint2, q: &DiscreteJoint2) -> Result<(f64, f64)> {
    p.same_shape(q)?;
    let (_, pz) = marginals2(p);
    let (_, qz) = marginals2(q);
    let nz = p.nz;
    let mut cond = 0.0;
    for z in 0..nz {
        if pz[z] <= 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for x in 0..p.nx {
            inner += term(p.p[x * nz + z] / pz[z], q.p[x * nz + z] / qz[z])?;
        }
        cond += pz[z] * inner;
    }
    let mut marg = 0.0;
    for z in 0..nz {
        marg += term(pz[z], qz[z])?;
    }
    Ok((cond, marg))
}

/// `(-E_{p(z)} log q(z), E_{p(z)} log p(z))`: the marginal divergence split
/// into cross-entropy and negative entropy.
pub fn reverse_two_marginal_split(p: &DiscreteJoint2, q: &DiscreteJoint2) -> Result<(f64, f64)> {
    p.same_shape(q)?;
    let (_, pz) = marginals2(p);
    let (_, qz) = marginals2(q);
    let mut cross = 0.0;
    let mut neg_ent = 0.0;
    for z in 0..p.nz {
        if pz[z] > 0.0 {
            if qz[z] <= 0.0 {
                return Err(Error::AbsoluteContinuity { cell: z, p: pz[z] });
            }
            cross -= pz[z] * qz[z].ln();
            neg_ent += pz[z] * pz[z].ln();
        }
    }
    Ok((cross, neg_ent))
}

/// Forward decomposition of `KL(q(x,z,y) || p(x,z,y))`:
/// `[E_{q(z,x)} KL(q(y|z,x) || p(y|z,x)), E_{q(x)} KL(q(z|x) || p(z|x)), KL(q(x) || p(x))]`.
pub fn forward_three(q: &DiscreteJoint, p: &DiscreteJoint) -> Result<[f64; 3]> {
    check_shapes(q, p)?;
    let (mq, mp) = (marginals(q), marginals(p));
    let (nx, nz, ny) = (q.nx, q.nz, q.ny);
    let mut cond_y = 0.0;
    for x in 0..nx {
        for z in 0..nz {
            let (qxz, pxz) = (mq.xz[x * nz + z], mp.xz[x * nz + z]);
            if qxz <= 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for y in 0..ny {
                let i = (x * nz + z) * ny + y;
                inner += term(q.p[i] / qxz, p.p[i] / pxz)?;
            }
            cond_y += qxz * inner;
        }
    }
    let mut cond_z = 0.0;
    for x in 0..nx {
        if mq.x[x] <= 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for z in 0..nz {
            inner += term(mq.xz[x * nz + z] / mq.x[x], mp.xz[x * nz + z] / mp.x[x])?;
        }
        cond_z += mq.x[x] * inner;
    }
    let mut marg_x = 0.0;
    for x in 0..nx {
        marg_x += term(mq.x[x], mp.x[x])?;
    }
    Ok([cond_y, cond_z, marg_x])
}

/// `(E_{q(x)} log q(x), E_{q(x)} L(x))` where
/// `L(x) = E_{q(z,y|x)}[log p(x|z) + log p(z|y) + log p(y) - log q(z|x) - log q(y|x)]`
/// is the mixture-prior evidence bound.
pub fn mixture_elbo(q: &DiscreteJoint, p: &DiscreteJoint) -> Result<(f64, f64)> {
    check_shapes(q, p)?;
    let (mq, mp) = (marginals(q), marginals(p));
    let (nx, nz, ny) = (q.nx, q.nz, q.ny);
    let mut log_qx = 0.0;
    let mut bound = 0.0;
    for x in 0..nx {
        if mq.x[x] <= 0.0 {
            continue;
        }
        log_qx += mq.x[x] * mq.x[x].ln();
        let mut l = 0.0;
        for z in 0..nz {
            for y in 0..ny {
                let q_zy_given_x = q.p[(x * nz + z) * ny + y] / mq.x[x];
                if q_zy_given_x <= 0.0 {
                    continue;
                }
                let p_x_given_z = mp.xz[x * nz + z] / mp.z[z];
                let p_z_given_y = mp.zy[z * ny + y] / mp.y[y];
                let q_z_given_x = mq.xz[x * nz + z] / mq.x[x];
                let q_y_given_x = mq.xy[x * ny + y] / mq.x[x];
                l += q_zy_given_x
                    * (p_x_given_z.ln() + p_z_given_y.ln() + mp.y[y].ln() - q_z_given_x.ln() - q_y_given_x.ln());
            }
        }
        bound += mq.x[x] * l;
    }
    Ok((log_qx, bound))
}

/// `E_{q(z,x)}` of the cluster-posterior divergence written through the
/// factors: `E_{q(y|x)}[log q(y|x) - log p(z|y) - log p(y)] + log p(z)`.
pub fn mixture_posterior_term(q: &DiscreteJoint, p: &DiscreteJoint) -> Result<f64> {
    check_shapes(q, p)?;
    let (mq, mp) = (marginals(q), marginals(p));
    let (nx, nz, ny) = (q.nx, q.nz, q.ny);
    let mut total = 0.0;
    for x in 0..nx {
        for z in 0..nz {
            let qxz = mq.xz[x * nz + z];
            if qxz <= 0.0 {
                continue;
            }
            let mut inner = mp.z[z].ln();
            for y in 0..ny {
                let q_y_given_x = mq.xy[x * ny + y] / mq.x[x];
                if q_y_given_x <= 0.0 {
                    continue;
                }
                let p_z_given_y = mp.zy[z * ny + y] / mp.y[y];
                inner += q_y_given_x * (q_y_given_x.ln() - p_z_given_y.ln() - mp.y[y].ln());
            }
            total += qxz * inner;
        }
    }
    Ok(total)
}
