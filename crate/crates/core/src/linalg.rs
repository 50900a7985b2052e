//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Overwrites both triangles with their average.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// `γᵀ S γ`.
pub fn quad_form(s: &DMatrix<f64>, g: &DVector<f64>) -> f64 {
    let n = g.len();
    let mut acc = 0.0;
    for j in 0..n {
        let gj = g[j];
        if gj == 0.0 {
            continue;
        }
        let col = s.column(j);
        let mut inner = 0.0;
        for i in 0..n {
            inner += col[i] * g[i];
        }
        acc += gj * inner;
    }
    acc
}

/// Log-determinant of a symmetric positive definite matrix, `None` when the
/// Cholesky factorisation fails.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let d = l[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

/// Positive-definiteness check relative to the average eigenvalue:
/// smallest eigenvalue must exceed `1e-10 · trace / p`.
pub fn is_scaled_pd(values: &DVector<f64>, trace: f64) -> bool {
    let p = values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    trace > 0.0 && min > 1e-10 * trace / p
}

/// Sets the sign so that the largest-magnitude entry is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Infinity norm (maximum absolute row sum).
pub fn matrix_inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Orthonormal basis of the orthogonal complement of `span(cols)`.
///
/// Gram-Schmidt over `[cols | I]` with the identity columns visited in order
/// of decreasing residual norm (column pivoting). Returns `None` when `cols`
/// is rank deficient.
pub fn orthogonal_complement(cols: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = cols.nrows();
    let r = cols.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
    let scale = (0..r).map(|j| cols.column(j).norm()).fold(0.0, f64::max);
    for j in 0..r {
        let mut v: DVector<f64> = cols.column(j).into_owned();
        let original = v.norm();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let nv = v.norm();
        if original == 0.0 || nv <= 1e-10 * scale.max(original) {
            return None;
        }
        basis.push(v / nv);
    }
    let mut remaining: Vec<usize> = (0..p).collect();
    while basis.len() < p {
        let mut best: Option<(usize, DVector<f64>, f64)> = None;
        for (slot, &e) in remaining.iter().enumerate() {
            let mut v = DVector::zeros(p);
            v[e] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v.axpy(-c, b, 1.0);
                }
            }
            let nv = v.norm();
            if best.as_ref().is_none_or(|(_, _, bn)| nv > *bn) {
                best = Some((slot, v, nv));
            }
        }
        let (slot, v, nv) = best?;
        remaining.remove(slot);
        basis.push(v / nv);
    }
    let q = DMatrix::from_columns(&basis[r..]);
    Some(q)
}
