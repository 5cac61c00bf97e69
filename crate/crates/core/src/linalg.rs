//! Dense real linear algebra: row-major `f64` matrices, a cyclic Jacobi
//! eigensolver for symmetric matrices, SPD matrix functions (log, inverse),
//! covariance and PCA whitening.
//!
//! Matrices are stored row-major; where a matrix holds a batch of samples the
//! convention throughout the crate is one column per sample (`d x T`).
//! Everything here is value-semantic and safe to share across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as a genuine collapse rather than
/// round-off when inverting or taking logarithms of SPD matrices.
pub const SPD_EIG_FLOOR: f64 = 1e-12;

/// Off-diagonal norm tolerance of the Jacobi sweep, relative to the input scale.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

pub type DenseVector = Vec<f64>;

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<DenseMatrix> for RawMatrix {
    fn from(m: DenseMatrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Square matrix with `d` on the diagonal.
    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = d[i];
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// New matrix holding the listed columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (k, &j) in idx.iter().enumerate() {
                dst[k] = src[j];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &other.data[k * n..(k + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_transa(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "matmul_transa {}x{} ^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.cols, n);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aki * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`. Goes through an explicit transpose so the inner loop
    /// stays contiguous and vectorizable.
    pub fn matmul_transb(&self, other: &Self) -> Result<Self> {
        self.matmul(&other.transpose())
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::dim(format!(
                "matvec {}x{} * len {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim("axpy shape mismatch"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim("sub shape mismatch"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn row_means(&self) -> Vec<f64> {
        let t = self.cols as f64;
        (0..self.rows)
            .map(|i| self.row(i).iter().sum::<f64>() / t)
            .collect()
    }

    /// Subtract `mean[i]` from every entry of row `i`.
    pub fn center_rows(&mut self, mean: &[f64]) {
        for i in 0..self.rows {
            let m = mean[i];
            for v in self.row_mut(i) {
                *v -= m;
            }
        }
    }

    /// Replace with `(M + M^T)/2`. Only valid for square matrices.
    pub fn symmetrize(&mut self) {
        debug_assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = s;
                self.data[j * n + i] = s;
            }
        }
    }

    /// Error if any entry is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "{context}: non-finite entry in {}x{} matrix",
                self.rows, self.cols
            )))
        }
    }
}

/// Symmetric eigendecomposition, eigenvalues ascending, eigenvectors as
/// orthonormal columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl SymEig {
    /// `V diag(f(lambda)) V^T`, symmetrized.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone(); // columns scaled by f(lambda)
        for i in 0..n {
            let row = scaled.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r *= f(self.values[j]);
            }
        }
        let mut out = scaled
            .matmul(&self.vectors.transpose())
            .expect("square product");
        out.symmetrize();
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(M + M^T)/2` first; asymmetry beyond 1e-9
/// (relative to the largest entry) is rejected. Eigenvalues come back in
/// ascending order.
pub fn sym_eig(m: &DenseMatrix) -> Result<SymEig> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "sym_eig needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let scale = m.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-9 * scale {
                return Err(Error::arg(format!(
                    "sym_eig input not symmetric at ({i},{j}): {} vs {}",
                    m.get(i, j),
                    m.get(j, i)
                )));
            }
        }
    }
    if n == 0 {
        return Err(Error::dim("sym_eig on empty matrix"));
    }

    let mut a = m.clone();
    a.symmetrize();
    let tol = JACOBI_TOL * a.frob_norm().max(1.0);
    let mut v = DenseMatrix::identity(n);

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    let x = a.get(p, q);
                    s += 2.0 * x * x;
                }
            }
            s.sqrt()
        };
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol / (n as f64) * 1e-3 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e12 {
                    // Rotation angle underflows; 1/(2 theta) is exact enough.
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Update rows/columns p and q of A.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                // Accumulate the rotation into V.
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "sym_eig: Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps on a {n}x{n} matrix"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut values: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite eigenvalues"));
    values.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, new_j, v.get(i, old_j));
        }
    }
    vectors.validate_finite("sym_eig eigenvectors")?;
    Ok(SymEig { values, vectors })
}

fn spd_eig(m: &DenseMatrix, context: &str) -> Result<SymEig> {
    let eig = sym_eig(m)?;
    let bad: Vec<f64> = eig
        .values
        .iter()
        .copied()
        .filter(|&l| l <= SPD_EIG_FLOOR)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Singular {
            context: context.to_string(),
            eigenvalues: bad,
        });
    }
    Ok(eig)
}

/// Matrix logarithm of a symmetric positive definite matrix.
pub fn mat_log_spd(m: &DenseMatrix) -> Result<DenseMatrix> {
    let eig = spd_eig(m, "mat_log_spd")?;
    let out = eig.apply(f64::ln);
    out.validate_finite("mat_log_spd")?;
    Ok(out)
}

/// Inverse of a symmetric positive definite matrix.
pub fn mat_inv_spd(m: &DenseMatrix) -> Result<DenseMatrix> {
    let eig = spd_eig(m, "mat_inv_spd")?;
    let out = eig.apply(|l| 1.0 / l);
    out.validate_finite("mat_inv_spd")?;
    Ok(out)
}

/// Sample covariance `(1/T) X X^T` of column-sample data, optionally centering
/// rows first. Uncentered by default use: the mean is penalized separately.
pub fn covariance(x: &DenseMatrix, center: bool) -> Result<DenseMatrix> {
    let t = x.cols();
    if t < 2 {
        return Err(Error::dim(format!("covariance needs T >= 2, got {t}")));
    }
    let xc;
    let xr = if center {
        let mut m = x.clone();
        let means = m.row_means();
        m.center_rows(&means);
        xc = m;
        &xc
    } else {
        x
    };
    let mut cov = xr.matmul(&xr.transpose())?;
    cov.scale(1.0 / t as f64);
    cov.symmetrize();
    Ok(cov)
}

/// Affine map `z = M (x - mean)` that whitens the data it was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    pub matrix: DenseMatrix,
}

impl WhiteningTransform {
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.mean.len() {
            return Err(Error::dim(format!(
                "whitening expects {} rows, got {}",
                self.mean.len(),
                x.rows()
            )));
        }
        let mut centered = x.clone();
        centered.center_rows(&self.mean);
        self.matrix.matmul(&centered)
    }
}

/// PCA whitening: returns transformed data with identity covariance plus the
/// transform used, for later reuse on held-out data.
pub fn pca_whiten(x: &DenseMatrix) -> Result<(DenseMatrix, WhiteningTransform)> {
    let mean = x.row_means();
    let cov = covariance(x, true)?;
    let eig = sym_eig(&cov)?;
    let near_zero: Vec<f64> = eig
        .values
        .iter()
        .copied()
        .filter(|&l| l <= 1e-10)
        .collect();
    if !near_zero.is_empty() {
        return Err(Error::Singular {
            context: "pca_whiten: rank-deficient covariance".to_string(),
            eigenvalues: near_zero,
        });
    }
    // M = diag(1/sqrt(lambda)) V^T
    let n = x.rows();
    let mut m = eig.vectors.transpose();
    for i in 0..n {
        let s = 1.0 / eig.values[i].sqrt();
        for v in m.row_mut(i) {
            *v *= s;
        }
    }
    let transform = WhiteningTransform { mean, matrix: m };
    let z = transform.apply(x)?;
    z.validate_finite("pca_whiten output")?;
    Ok((z, transform))
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det(m: &DenseMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dim("det needs a square matrix"));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut d = 1.0;
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|i| (i, a.get(i, k).abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval == 0.0 {
            return Ok(0.0);
        }
        if piv != k {
            for j in 0..n {
                let tmp = a.get(k, j);
                a.set(k, j, a.get(piv, j));
                a.set(piv, j, tmp);
            }
            d = -d;
        }
        let akk = a.get(k, k);
        d *= akk;
        for i in (k + 1)..n {
            let factor = a.get(i, k) / akk;
            if factor == 0.0 {
                continue;
            }
            for j in k..n {
                let v = a.get(i, j) - factor * a.get(k, j);
                a.set(i, j, v);
            }
        }
    }
    Ok(d)
}

/// Orthonormalize the columns of `m` (modified Gram-Schmidt, run twice).
/// Requires cols <= rows and full column rank.
pub fn orthonormal_columns(m: &DenseMatrix) -> Result<DenseMatrix> {
    let (rows, cols) = (m.rows(), m.cols());
    if cols > rows {
        return Err(Error::dim(format!(
            "orthonormal_columns: {cols} columns in dimension {rows}"
        )));
    }
    // Work on the transpose so columns are contiguous.
    let mut q = m.transpose();
    for _pass in 0..2 {
        for j in 0..cols {
            for k in 0..j {
                let dot: f64 = q.row(j).iter().zip(q.row(k)).map(|(a, b)| a * b).sum();
                let qk: Vec<f64> = q.row(k).to_vec();
                for (v, w) in q.row_mut(j).iter_mut().zip(&qk) {
                    *v -= dot * w;
                }
            }
            let norm: f64 = q.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(
                    "orthonormal_columns: rank-deficient input".into(),
                ));
            }
            for v in q.row_mut(j) {
                *v /= norm;
            }
        }
    }
    Ok(q.transpose())
}
