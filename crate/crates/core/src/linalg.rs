//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Symmetrize in place: `(P + P') / 2`.
pub fn symmetrize(p: &mut Mat) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// Symmetrize and clip negative eigenvalues at zero.
///
/// The eigendecomposition only runs when a diagonal entry is negative or the
/// Cholesky factorization fails, so the common PSD case stays cheap.
pub fn make_psd(p: &mut Mat) {
    symmetrize(p);
    let needs_fix = (0..p.nrows()).any(|i| p[(i, i)] < 0.0)
        || p.clone().cholesky().is_none() && min_eigenvalue(p) < 0.0;
    if !needs_fix {
        return;
    }
    let eig = p.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    *p = &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(p);
}

pub fn min_eigenvalue(p: &Mat) -> f64 {
    if p.nrows() == 0 {
        return 0.0;
    }
    p.clone().symmetric_eigen().eigenvalues.min()
}

/// Solve `A x = B` for symmetric positive definite `A`, falling back to LU.
pub fn solve_spd(a: &Mat, b: &Mat, context: &'static str) -> Result<Mat> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone().lu().solve(b).ok_or(Error::Singular(context))
}

pub fn solve_spd_vec(a: &Mat, b: &Vector, context: &'static str) -> Result<Vector> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone().lu().solve(b).ok_or(Error::Singular(context))
}

/// Inverse of a symmetric positive definite matrix.
pub fn inv_spd(a: &Mat, context: &'static str) -> Result<Mat> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => Err(Error::NotPositiveDefinite(context)),
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix via eigendecomposition.
pub fn pinv_sym(a: &Mat) -> Mat {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = max * 1e-12 * a.nrows() as f64;
    let inv = eig
        .eigenvalues
        .map(|v| if v.abs() > cut { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * Mat::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Least-squares coefficients of `y` on the columns of `x` (normal equations).
pub fn ols(x: &Mat, y: &Vector) -> Result<Vector> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.cholesky()
        .map(|ch| ch.solve(&xty))
        .ok_or(Error::Singular("least-squares normal equations"))
}

/// Least squares for several right-hand sides at once.
pub fn ols_multi(x: &Mat, y: &Mat) -> Result<Mat> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.cholesky()
        .map(|ch| ch.solve(&xty))
        .ok_or(Error::Singular("least-squares normal equations"))
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Solve the discrete Lyapunov equation `P = A P A' + Q` by squaring.
///
/// Requires spectral radius of `A` below one.
pub fn discrete_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    if spectral_radius(a) >= 1.0 {
        return Err(Error::Invalid(
            "Lyapunov equation needs a stable transition matrix".into(),
        ));
    }
    let mut p = q.clone();
    let mut ak = a.clone();
    for _ in 0..200 {
        let next = &p + &ak * &p * ak.transpose();
        ak = &ak * &ak;
        let delta = (&next - &p).abs().max();
        p = next;
        if delta <= 1e-15 * p.abs().max().max(1.0) || ak.abs().max() < 1e-300 {
            break;
        }
    }
    symmetrize(&mut p);
    Ok(p)
}

/// Log-determinant of an SPD matrix.
pub fn logdet_spd(a: &Mat, context: &'static str) -> Result<f64> {
    let ch = a
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(context))?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Column-wise mean of a matrix.
pub fn column_means(x: &Mat) -> Vector {
    let t = x.nrows() as f64;
    Vector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / t))
}

/// OLS AR(1) coefficient (no intercept) of a series.
pub fn ar1_coef(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for w in x.windows(2) {
        num += w[1] * w[0];
        den += w[0] * w[0];
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}


/// Serde adapter storing a matrix as a list of rows.
pub mod serde_rows {
    use super::Mat;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        s.collect_seq(rows)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub(crate) fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<Mat, String> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("matrix rows differ in length".into());
        }
        Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    /// The same layout for a list of matrices.
    pub mod vec {
        use super::super::Mat;
        use serde::de::Error as _;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> std::result::Result<S::Ok, S::Error> {
            let all: Vec<Vec<Vec<f64>>> = ms
                .iter()
                .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect();
            s.collect_seq(all)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Mat>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| super::from_rows(rows).map_err(D::Error::custom))
                .collect()
        }
    }
}

/// Serde adapter for an optional matrix stored as rows.
pub mod serde_rows_opt {
    use super::Mat;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Mat>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Mat>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(|rows| super::serde_rows::from_rows(&rows).map_err(D::Error::custom))
            .transpose()
    }
}

/// Serde adapter storing a vector as a plain list.
pub mod serde_vector {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
