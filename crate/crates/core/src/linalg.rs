//! Dense helpers shared by the single-node and distributed filters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite(what))?;
    let l_inv = lower_triangular_inverse(&chol.unpack());
    let mut inv = l_inv.tr_mul(&l_inv);
    symmetrize(&mut inv);
    Ok(inv)
}

/// Inverse of a non-singular lower-triangular matrix by column-wise forward
/// substitution.
fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let ls = l.as_slice();
    let mut x = DMatrix::zeros(n, n);
    let xs = x.as_mut_slice();
    for j in 0..n {
        let col = &mut xs[j * n..(j + 1) * n];
        col[j] = 1.0;
        for k in j..n {
            let xk = col[k] / ls[k * n + k];
            col[k] = xk;
            if xk != 0.0 {
                for (c, lik) in col[k + 1..].iter_mut().zip(&ls[k * n + k + 1..(k + 1) * n]) {
                    *c -= lik * xk;
                }
            }
        }
    }
    x
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `P <- Phi P Phi^T + dt Qd` for a block-diagonal `Phi` and `Qd`.
///
/// Blocks are square and tile the diagonal of `p` in order.
pub fn propagate_block_diag(
    p: &DMatrix<f64>,
    phi: &[DMatrix<f64>],
    gqg: &[DMatrix<f64>],
    dt: f64,
) -> Result<DMatrix<f64>> {
    let offsets: Vec<usize> = phi
        .iter()
        .scan(0, |acc, b| {
            let o = *acc;
            *acc += b.nrows();
            Some(o)
        })
        .collect();
    let n: usize = phi.iter().map(|b| b.nrows()).sum();
    if n != p.nrows() || phi.len() != gqg.len() {
        return Err(Error::Dimension { expected: p.nrows(), got: n });
    }
    let mut out = DMatrix::zeros(n, n);
    for (a, pa) in phi.iter().enumerate() {
        let oa = offsets[a];
        let na = pa.nrows();
        for (b, pb) in phi.iter().enumerate().skip(a) {
            let ob = offsets[b];
            let nb = pb.nrows();
            let blk = pa * p.view((oa, ob), (na, nb)) * pb.transpose();
            out.view_mut((oa, ob), (na, nb)).copy_from(&blk);
            if a != b {
                out.view_mut((ob, oa), (nb, na)).copy_from(&blk.transpose());
            }
        }
        let mut d = out.view((oa, oa), (na, na)).into_owned();
        d += &gqg[a] * dt;
        out.view_mut((oa, oa), (na, na)).copy_from(&d);
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Information-form correction about a zero-mean prior.
///
/// Returns `(M u, M)` with `M = (P^-1 + U)^-1`.
pub fn information_step(
    p: &DMatrix<f64>,
    u: &DVector<f64>,
    u_mat: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if u.len() != p.nrows() || u_mat.nrows() != p.nrows() {
        return Err(Error::Dimension { expected: p.nrows(), got: u.len() });
    }
    let mut a = spd_inverse(p, "prior covariance")?;
    a += u_mat;
    let m = spd_inverse(&a, "posterior information")?;
    let dx = &m * u;
    Ok((dx, m))
}
