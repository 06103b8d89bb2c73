//! Storage and factorizations for full-order system matrices.
//!
//! Matrices are stored dense up to [`DENSE_LIMIT`] and coordinate-sparse
//! beyond; every operation accepts either representation. Shifted solves
//! (the inner kernel of the ADI iteration) detect symmetry and bandedness
//! and use a banded Cholesky when the band is narrow, falling back to dense
//! factorizations otherwise.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::instrument;

/// Systems up to this state dimension are stored dense.
pub const DENSE_LIMIT: usize = 4000;

/// A full-order system matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum SysMatrix {
    Dense(DMatrix<f64>),
    Sparse(CooMatrix),
}

/// Coordinate-format sparse matrix; duplicate entries are additive.
#[derive(Debug, Clone, PartialEq)]
pub struct CooMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl CooMatrix {
    pub fn new(nrows: usize, ncols: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, _) in &entries {
            if i >= nrows || j >= ncols {
                return Err(Error::Dimension(format!(
                    "coordinate ({i}, {j}) outside {nrows}x{ncols}"
                )));
            }
        }
        Ok(CooMatrix {
            nrows,
            ncols,
            entries,
        })
    }

    /// Sums duplicate coordinates and drops exact zeros.
    pub fn consolidate(&mut self) {
        self.entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(i, j, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|&(_, _, v)| v != 0.0);
        self.entries = out;
    }
}

impl SysMatrix {
    pub fn dense(m: DMatrix<f64>) -> Self {
        SysMatrix::Dense(m)
    }

    pub fn identity(n: usize) -> Self {
        SysMatrix::Dense(DMatrix::identity(n, n))
    }

    pub fn nrows(&self) -> usize {
        match self {
            SysMatrix::Dense(m) => m.nrows(),
            SysMatrix::Sparse(c) => c.nrows,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            SysMatrix::Dense(m) => m.ncols(),
            SysMatrix::Sparse(c) => c.ncols,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        instrument::bump();
        match self {
            SysMatrix::Dense(m) => m.clone(),
            SysMatrix::Sparse(c) => {
                let mut m = DMatrix::zeros(c.nrows, c.ncols);
                for &(i, j, v) in &c.entries {
                    m[(i, j)] += v;
                }
                m
            }
        }
    }

    /// `self * x` for a dense (typically skinny) right factor.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        instrument::bump();
        assert_eq!(self.ncols(), x.nrows(), "mul_dense dimension mismatch");
        match self {
            SysMatrix::Dense(m) => m * x,
            SysMatrix::Sparse(c) => {
                let mut y = DMatrix::zeros(c.nrows, x.ncols());
                for &(i, j, v) in &c.entries {
                    for k in 0..x.ncols() {
                        y[(i, k)] += v * x[(j, k)];
                    }
                }
                y
            }
        }
    }

    /// `self^T * x`.
    pub fn tr_mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        instrument::bump();
        assert_eq!(self.nrows(), x.nrows(), "tr_mul_dense dimension mismatch");
        match self {
            SysMatrix::Dense(m) => m.transpose() * x,
            SysMatrix::Sparse(c) => {
                let mut y = DMatrix::zeros(c.ncols, x.ncols());
                for &(i, j, v) in &c.entries {
                    for k in 0..x.ncols() {
                        y[(j, k)] += v * x[(i, k)];
                    }
                }
                y
            }
        }
    }

    pub fn transposed(&self) -> SysMatrix {
        instrument::bump();
        match self {
            SysMatrix::Dense(m) => SysMatrix::Dense(m.transpose()),
            SysMatrix::Sparse(c) => SysMatrix::Sparse(CooMatrix {
                nrows: c.ncols,
                ncols: c.nrows,
                entries: c.entries.iter().map(|&(i, j, v)| (j, i, v)).collect(),
            }),
        }
    }

    pub fn norm_fro(&self) -> f64 {
        match self {
            SysMatrix::Dense(m) => m.norm(),
            // Consolidated entries assumed; duplicates would overestimate.
            SysMatrix::Sparse(c) => c.entries.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            SysMatrix::Dense(m) => m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())),
            SysMatrix::Sparse(c) => c.entries.iter().fold(0.0f64, |acc, e| acc.max(e.2.abs())),
        }
    }

    /// Symmetry up to `tol_rel * max|entry|`.
    pub fn is_symmetric(&self, tol_rel: f64) -> bool {
        if self.nrows() != self.ncols() {
            return false;
        }
        let tol = tol_rel * self.max_abs();
        match self {
            SysMatrix::Dense(m) => {
                for i in 0..m.nrows() {
                    for j in (i + 1)..m.ncols() {
                        if (m[(i, j)] - m[(j, i)]).abs() > tol {
                            return false;
                        }
                    }
                }
                true
            }
            SysMatrix::Sparse(c) => {
                let mut c = c.clone();
                c.consolidate();
                let mut t: Vec<(usize, usize, f64)> =
                    c.entries.iter().map(|&(i, j, v)| (j, i, v)).collect();
                t.sort_unstable_by_key(|&(i, j, _)| (i, j));
                if t.len() != c.entries.len() {
                    return false;
                }
                c.entries
                    .iter()
                    .zip(&t)
                    .all(|(a, b)| a.0 == b.0 && a.1 == b.1 && (a.2 - b.2).abs() <= tol)
            }
        }
    }

    /// Maximum |i - j| over structurally nonzero entries.
    pub fn bandwidth(&self) -> usize {
        match self {
            SysMatrix::Dense(m) => {
                let mut bw = 0;
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        if m[(i, j)] != 0.0 {
                            bw = bw.max(i.abs_diff(j));
                        }
                    }
                }
                bw
            }
            SysMatrix::Sparse(c) => c
                .entries
                .iter()
                .filter(|e| e.2 != 0.0)
                .fold(0, |bw, e| bw.max(e.0.abs_diff(e.1))),
        }
    }

    /// Accumulates `coeff * self` into a dense target.
    fn add_scaled_into(&self, coeff: f64, target: &mut DMatrix<f64>) {
        match self {
            SysMatrix::Dense(m) => {
                target.zip_apply(m, |t, s| *t += coeff * s);
            }
            SysMatrix::Sparse(c) => {
                for &(i, j, v) in &c.entries {
                    target[(i, j)] += coeff * v;
                }
            }
        }
    }
}

/// Forms `sum_i coeff_i * M_i`. The result is dense when the dimension is at
/// most [`DENSE_LIMIT`], coordinate-sparse otherwise.
pub fn linear_combination(terms: &[(f64, &SysMatrix)]) -> Result<SysMatrix> {
    instrument::bump();
    let (first_r, first_c) = match terms.first() {
        Some((_, m)) => (m.nrows(), m.ncols()),
        None => return Err(Error::Argument("empty term list".into())),
    };
    for (_, m) in terms {
        if m.nrows() != first_r || m.ncols() != first_c {
            return Err(Error::Dimension(format!(
                "term is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                first_r,
                first_c
            )));
        }
    }
    if first_r.max(first_c) <= DENSE_LIMIT {
        let mut acc = DMatrix::zeros(first_r, first_c);
        for (coeff, m) in terms {
            m.add_scaled_into(*coeff, &mut acc);
        }
        Ok(SysMatrix::Dense(acc))
    } else {
        let mut entries = Vec::new();
        for (coeff, m) in terms {
            match m {
                SysMatrix::Sparse(c) => {
                    entries.extend(c.entries.iter().map(|&(i, j, v)| (i, j, coeff * v)))
                }
                SysMatrix::Dense(d) => {
                    for i in 0..d.nrows() {
                        for j in 0..d.ncols() {
                            if d[(i, j)] != 0.0 {
                                entries.push((i, j, coeff * d[(i, j)]));
                            }
                        }
                    }
                }
            }
        }
        let mut coo = CooMatrix::new(first_r, first_c, entries)?;
        coo.consolidate();
        Ok(SysMatrix::Sparse(coo))
    }
}

// ---------------------------------------------------------------------------
// Banded Cholesky
// ---------------------------------------------------------------------------

/// Cholesky factor of an SPD matrix in lower band storage.
///
/// `band[d * n + j]` holds `L[(j + d, j)]` for `d in 0..=bw`.
pub struct BandedChol {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedChol {
    /// Factors `sum_i coeff_i * M_i`, which must be SPD with bandwidth `bw`.
    pub fn factor(terms: &[(f64, &SysMatrix)], bw: usize) -> Result<Self> {
        instrument::bump();
        let n = terms
            .first()
            .ok_or_else(|| Error::Argument("empty term list".into()))?
            .1
            .nrows();
        let mut band = vec![0.0; (bw + 1) * n];
        let mut scatter = |i: usize, j: usize, v: f64| {
            // Lower triangle only; the strict upper triangle is implied.
            if i >= j && i - j <= bw {
                band[(i - j) * n + j] += v;
            }
        };
        for (coeff, m) in terms {
            match m {
                SysMatrix::Dense(d) => {
                    for j in 0..n {
                        for i in j..(j + bw + 1).min(n) {
                            let v = d[(i, j)];
                            if v != 0.0 {
                                scatter(i, j, coeff * v);
                            }
                        }
                    }
                }
                SysMatrix::Sparse(c) => {
                    for &(i, j, v) in &c.entries {
                        scatter(i, j, coeff * v);
                    }
                }
            }
        }
        // In-place banded Cholesky.
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = band[j];
            for k in lo..j {
                let l_jk = band[(j - k) * n + k];
                d -= l_jk * l_jk;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Solver(format!(
                    "banded Cholesky broke down at column {j} (pivot {d:.3e})"
                )));
            }
            let dj = d.sqrt();
            band[j] = dj;
            for i in (j + 1)..(j + bw + 1).min(n) {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut v = band[(i - j) * n + j];
                for k in lo_i..j {
                    v -= band[(i - k) * n + k] * band[(j - k) * n + k];
                }
                band[(i - j) * n + j] = v / dj;
            }
        }
        Ok(BandedChol { n, bw, band })
    }

    /// Solves `M x = b` for each column of `b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        instrument::bump();
        assert_eq!(b.nrows(), self.n);
        let (n, bw) = (self.n, self.bw);
        let mut x = b.clone();
        for c in 0..x.ncols() {
            // L y = b
            for i in 0..n {
                let lo = i.saturating_sub(bw);
                let mut v = x[(i, c)];
                for k in lo..i {
                    v -= self.band[(i - k) * n + k] * x[(k, c)];
                }
                x[(i, c)] = v / self.band[i];
            }
            // L^T x = y
            for i in (0..n).rev() {
                let hi = (i + bw + 1).min(n);
                let mut v = x[(i, c)];
                for k in (i + 1)..hi {
                    v -= self.band[(k - i) * n + i] * x[(k, c)];
                }
                x[(i, c)] = v / self.band[i];
            }
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Shifted-solve factorizations used by the solvers
// ---------------------------------------------------------------------------

/// Whether a banded factorization is worth it for this band/dimension.
fn band_pays_off(n: usize, bw: usize) -> bool {
    bw > 0 && bw < n / 4
}

/// Factorization of a real linear combination `sum_i coeff_i * M_i`.
pub enum RealFactor {
    Banded(BandedChol),
    /// Cholesky of the negated combination (for negative definite inputs).
    BandedNeg(BandedChol),
    DenseChol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    DenseCholNeg(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    DenseLu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl RealFactor {
    /// Factors the combination, preferring symmetric/banded paths. `symmetric`
    /// and `bw` describe the combination's structure (caller-precomputed).
    pub fn new(terms: &[(f64, &SysMatrix)], symmetric: bool, bw: usize) -> Result<Self> {
        let n = terms
            .first()
            .ok_or_else(|| Error::Argument("empty term list".into()))?
            .1
            .nrows();
        if symmetric && band_pays_off(n, bw) {
            if let Ok(f) = BandedChol::factor(terms, bw) {
                return Ok(RealFactor::Banded(f));
            }
            let negated: Vec<(f64, &SysMatrix)> = terms.iter().map(|&(c, m)| (-c, m)).collect();
            if let Ok(f) = BandedChol::factor(&negated, bw) {
                return Ok(RealFactor::BandedNeg(f));
            }
        }
        if n > DENSE_LIMIT {
            return Err(Error::SizeGuard(format!(
                "dense factorization of a {n}x{n} combination (limit {DENSE_LIMIT}); \
                 only narrow-band symmetric systems are solvable at this size"
            )));
        }
        let dense = match linear_combination(terms)? {
            SysMatrix::Dense(d) => d,
            SysMatrix::Sparse(_) => unreachable!("n <= DENSE_LIMIT yields dense"),
        };
        if symmetric {
            if let Some(ch) = dense.clone().cholesky() {
                return Ok(RealFactor::DenseChol(ch));
            }
            if let Some(ch) = (-&dense).cholesky() {
                return Ok(RealFactor::DenseCholNeg(ch));
            }
        }
        let lu = dense.lu();
        if lu.determinant() == 0.0 {
            return Err(Error::Solver("singular shifted matrix".into()));
        }
        Ok(RealFactor::DenseLu(lu))
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        instrument::bump();
        match self {
            RealFactor::Banded(f) => Ok(f.solve(b)),
            RealFactor::BandedNeg(f) => Ok(-f.solve(b)),
            RealFactor::DenseChol(c) => Ok(c.solve(b)),
            RealFactor::DenseCholNeg(c) => Ok(-c.solve(b)),
            RealFactor::DenseLu(lu) => lu
                .solve(b)
                .ok_or_else(|| Error::Solver("singular shifted matrix".into())),
        }
    }
}

/// Dense complex LU of `sum_i coeff_i * M_i` with complex coefficients.
pub struct ComplexFactor {
    lu: nalgebra::LU<Complex<f64>, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ComplexFactor {
    pub fn new(terms: &[(Complex<f64>, &SysMatrix)]) -> Result<Self> {
        instrument::bump();
        let n = terms
            .first()
            .ok_or_else(|| Error::Argument("empty term list".into()))?
            .1
            .nrows();
        if n > DENSE_LIMIT {
            return Err(Error::SizeGuard(format!(
                "complex dense factorization of a {n}x{n} matrix (limit {DENSE_LIMIT})"
            )));
        }
        let mut acc = DMatrix::<Complex<f64>>::zeros(n, n);
        for (coeff, m) in terms {
            match m {
                SysMatrix::Dense(d) => {
                    for j in 0..n {
                        for i in 0..n {
                            acc[(i, j)] += coeff * d[(i, j)];
                        }
                    }
                }
                SysMatrix::Sparse(c) => {
                    for &(i, j, v) in &c.entries {
                        acc[(i, j)] += coeff * v;
                    }
                }
            }
        }
        let lu = acc.lu();
        if lu.determinant() == Complex::new(0.0, 0.0) {
            return Err(Error::Solver("singular complex shifted matrix".into()));
        }
        Ok(ComplexFactor { lu })
    }

    pub fn solve(&self, b: &DMatrix<Complex<f64>>) -> Result<DMatrix<Complex<f64>>> {
        instrument::bump();
        self.lu
            .solve(b)
            .ok_or_else(|| Error::Solver("singular complex shifted matrix".into()))
    }
}
