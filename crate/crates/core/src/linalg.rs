//! Thin SVD through `faer`, ordered by decreasing singular value.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `m = u · diag(singular) · vᵀ` with `u: n × r`, `v: d × r`, `r = min(n, d)`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    let (n, d) = m.shape();
    if n == 0 || d == 0 {
        return Err(Error::Input(format!("svd of an empty {n}x{d} matrix")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry passed to svd".into()));
    }
    let fm = faer::Mat::<f64>::from_fn(n, d, |i, j| m[(i, j)]);
    let svd = fm.thin_svd().map_err(|e| Error::Numeric(format!("svd failed to converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let r = n.min(d);
    let raw: Vec<f64> = (0..r).map(|l| s[l]).collect();
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("svd produced non-finite singular values".into()));
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    Ok(ThinSvd {
        u: DMatrix::from_fn(n, r, |i, l| u[(i, order[l])]),
        singular: order.iter().map(|&l| raw[l]).collect(),
        v: DMatrix::from_fn(d, r, |j, l| v[(j, order[l])]),
    })
}
