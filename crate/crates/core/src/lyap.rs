//! Generalized Lyapunov solvers and Gramian factors.
//!
//! Both solvers target `E P A^T + A P E^T = -RHS RHS^T`; transpose the
//! arguments to obtain the observability equation. The dense solver reduces
//! to standard form via an LU of `E` and a real Schur decomposition and is
//! the desk-scale oracle; the low-rank ADI solver produces tall factors with
//! heuristic Penzl shifts and exact low-rank residual tracking.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::matrix::{ComplexFactor, RealFactor, SysMatrix};

/// Which Gramian a factor approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Controllability,
    Observability,
}

/// Tall full-column-rank factor `X` with `P = X X^T`.
#[derive(Debug, Clone)]
pub struct GramianFactor {
    factor: DMatrix<f64>,
    side: Side,
    residual_norm: f64,
}

impl GramianFactor {
    pub fn new(factor: DMatrix<f64>, side: Side, residual_norm: f64) -> Result<Self> {
        if factor.ncols() == 0 || factor.nrows() < factor.ncols() {
            return Err(Error::Argument(format!(
                "factor must be tall and nonempty, got {}x{}",
                factor.nrows(),
                factor.ncols()
            )));
        }
        Ok(GramianFactor {
            factor,
            side,
            residual_norm,
        })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }
    pub fn side(&self) -> Side {
        self.side
    }
    pub fn residual_norm(&self) -> f64 {
        self.residual_norm
    }
    pub fn state_dim(&self) -> usize {
        self.factor.nrows()
    }
    /// Number of stored columns.
    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    /// The implied Gramian `X X^T`; dense, test-scale only.
    pub fn product(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn singular_values(&self) -> Vec<f64> {
        let svd = self.factor.clone().svd(false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    /// Columns count as independent when `sigma_min > 1e-14 * sigma_max`.
    pub fn has_full_column_rank(&self) -> bool {
        let s = self.singular_values();
        match (s.first(), s.last()) {
            (Some(&max), Some(&min)) => min > 1e-14 * max,
            _ => false,
        }
    }

    /// Numerical rank at a relative singular-value cutoff.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let s = self.singular_values();
        let cut = rel_tol * s.first().copied().unwrap_or(0.0);
        s.iter().filter(|&&v| v > cut).count()
    }
}

// ---------------------------------------------------------------------------
// Dense solver (Bartels-Stewart on the reduced standard form)
// ---------------------------------------------------------------------------

/// Dense desk-scale limit for the oracle solver.
const DENSE_SOLVER_LIMIT: usize = 2000;

/// Solves `E P A^T + A P E^T = -RHS RHS^T` densely and returns the
/// symmetrized Gramian.
pub fn solve_lyapunov_dense(
    e: &SysMatrix,
    a: &SysMatrix,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = e.nrows();
    if n != e.ncols() || n != a.nrows() || n != a.ncols() || rhs.nrows() != n {
        return Err(Error::Dimension("Lyapunov operands disagree".into()));
    }
    if n > DENSE_SOLVER_LIMIT {
        return Err(Error::SizeGuard(format!(
            "dense Lyapunov solver refused for n = {n} > {DENSE_SOLVER_LIMIT}"
        )));
    }
    let rhs_outer_norm = (rhs.transpose() * rhs).norm();
    if rhs_outer_norm == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }

    let e_dense = e.to_dense();
    let a_dense = a.to_dense();
    let lu = e_dense.clone().lu();
    if lu.determinant() == 0.0 {
        return Err(Error::Solver("E is singular".into()));
    }
    let f = lu
        .solve(&a_dense)
        .ok_or_else(|| Error::Solver("E is singular".into()))?;
    let g = lu
        .solve(rhs)
        .ok_or_else(|| Error::Solver("E is singular".into()))?;

    let schur = f
        .clone()
        .try_schur(f64::EPSILON, 0)
        .ok_or_else(|| Error::Solver("Schur decomposition failed to converge".into()))?;
    let (q, t) = schur.unpack();

    // Stability of the pencil = stability of the reduced standard form.
    for (start, size) in schur_blocks(&t) {
        let re = if size == 1 {
            t[(start, start)]
        } else {
            0.5 * (t[(start, start)] + t[(start + 1, start + 1)])
        };
        if re >= 0.0 {
            return Err(Error::Solver(format!(
                "pencil is not stable: eigenvalue with Re = {re:.3e}"
            )));
        }
    }

    // T X + X T^T = -Q^T G G^T Q, then P = Q X Q^T.
    let c = -(q.transpose() * &g) * (g.transpose() * &q);
    let x = solve_quasi_triangular_lyap(&t, &c)?;
    let p = &q * x * q.transpose();
    let p = (&p + p.transpose()) * 0.5;

    // Contract: relative residual below 1e-10.
    let residual =
        &e_dense * &p * a_dense.transpose() + &a_dense * &p * e_dense.transpose() + rhs * rhs.transpose();
    let rel = residual.norm() / rhs_outer_norm;
    if !(rel <= 1e-10) {
        return Err(Error::Solver(format!(
            "dense Lyapunov solve too inaccurate: relative residual {rel:.3e}"
        )));
    }
    Ok(p)
}

/// Diagonal block layout (start, size) of a real Schur form.
fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut k = 0;
    while k < n {
        if k + 1 < n && t[(k + 1, k)] != 0.0 {
            blocks.push((k, 2));
            k += 2;
        } else {
            blocks.push((k, 1));
            k += 1;
        }
    }
    blocks
}

/// `I (x) A + B (x) I` acting on the column-major vec of an `na x nb` unknown.
fn kron_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(na * nb, na * nb);
    for j in 0..nb {
        for i in 0..na {
            let row = j * na + i;
            for k in 0..na {
                m[(row, j * na + k)] += a[(i, k)];
            }
            for k in 0..nb {
                m[(row, k * na + i)] += b[(j, k)];
            }
        }
    }
    m
}

/// Solves `T X + X T^T = C` for quasi-upper-triangular `T` by block
/// back-substitution over the Schur blocks.
fn solve_quasi_triangular_lyap(t: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let blocks = schur_blocks(t);
    let mut x = DMatrix::zeros(n, n);
    for &(j0, nj) in blocks.iter().rev() {
        let right0 = j0 + nj;
        let mut r_col = c.view((0, j0), (n, nj)).into_owned();
        if right0 < n {
            let xr = x.view((0, right0), (n, n - right0));
            let tjr = t.view((j0, right0), (nj, n - right0));
            r_col -= xr * tjr.transpose();
        }
        for &(i0, ni) in blocks.iter().rev() {
            let below0 = i0 + ni;
            let mut rhs = r_col.view((i0, 0), (ni, nj)).into_owned();
            if below0 < n {
                let tib = t.view((i0, below0), (ni, n - below0));
                let xb = x.view((below0, j0), (n - below0, nj));
                rhs -= tib * xb;
            }
            let tii = t.view((i0, i0), (ni, ni)).into_owned();
            let tjj = t.view((j0, j0), (nj, nj)).into_owned();
            let m = kron_sum(&tii, &tjj);
            let rhs_vec = DMatrix::from_fn(ni * nj, 1, |k, _| rhs[(k % ni, k / ni)]);
            let sol = m
                .lu()
                .solve(&rhs_vec)
                .ok_or_else(|| Error::Solver("singular Lyapunov block".into()))?;
            for jj in 0..nj {
                for ii in 0..ni {
                    x[(i0 + ii, j0 + jj)] = sol[(jj * ni + ii, 0)];
                }
            }
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Penzl shifts
// ---------------------------------------------------------------------------

/// Arnoldi Ritz values of the operator given by `apply`.
fn arnoldi_ritz(
    apply: &dyn Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
    start: &DMatrix<f64>,
    steps: usize,
) -> Result<Vec<Complex<f64>>> {
    let n = start.nrows();
    let steps = steps.min(n);
    let norm0 = start.norm();
    if norm0 == 0.0 {
        return Err(Error::Argument("zero Arnoldi start vector".into()));
    }
    let mut basis: Vec<DMatrix<f64>> = vec![start / norm0];
    let mut h = DMatrix::<f64>::zeros(steps + 1, steps);
    let mut used = 0;
    for j in 0..steps {
        let mut w = apply(&basis[j])?;
        // Modified Gram-Schmidt with one reorthogonalization pass.
        for _ in 0..2 {
            for (i, v) in basis.iter().enumerate() {
                let hij = (v.transpose() * &w)[(0, 0)];
                h[(i, j)] += hij;
                w -= v * hij;
            }
        }
        used = j + 1;
        let beta = w.norm();
        h[(j + 1, j)] = beta;
        if beta < 1e-12 * h.view((0, 0), (used, used)).norm().max(1.0) {
            break;
        }
        basis.push(w / beta);
    }
    let hk = h.view((0, 0), (used, used)).into_owned();
    Ok(hk.complex_eigenvalues().iter().copied().collect())
}

/// Penzl's heuristic ADI shifts: Ritz values of `E^{-1}A` (large end) and
/// inverted Ritz values of `A^{-1}E` (small end), greedily selected to
/// minimize the ADI rational function over the sampled spectrum. Complex
/// shifts come out as adjacent conjugate pairs.
pub fn penzl_shifts(
    e: &SysMatrix,
    a: &SysMatrix,
    probe: &DMatrix<f64>,
    num: usize,
) -> Result<Vec<Complex<f64>>> {
    let n = e.nrows();
    let e_fac = RealFactor::new(&[(1.0, e)], e.is_symmetric(1e-12), e.bandwidth())?;
    let a_fac = RealFactor::new(&[(1.0, a)], a.is_symmetric(1e-12), a.bandwidth())?;

    let mut start = DMatrix::zeros(n, 1);
    for j in 0..probe.ncols() {
        for i in 0..n {
            start[(i, 0)] += probe[(i, j)];
        }
    }
    if start.norm() == 0.0 {
        start = DMatrix::from_element(n, 1, 1.0);
    }

    let apply_f = |v: &DMatrix<f64>| e_fac.solve(&a.mul_dense(v));
    let apply_finv = |v: &DMatrix<f64>| a_fac.solve(&e.mul_dense(v));
    let mut cands: Vec<Complex<f64>> = Vec::new();
    cands.extend(arnoldi_ritz(&apply_f, &start, 24.min(n))?);
    for r in arnoldi_ritz(&apply_finv, &start, 12.min(n))? {
        if r.norm() > 1e-300 {
            cands.push(Complex::new(1.0, 0.0) / r);
        }
    }

    // Stable candidates, one representative per conjugate pair.
    let mut reps: Vec<Complex<f64>> = Vec::new();
    for z in cands {
        if z.re >= 0.0 || !z.re.is_finite() || !z.im.is_finite() {
            continue;
        }
        let z = Complex::new(z.re, z.im.abs());
        if !reps
            .iter()
            .any(|w| (w - z).norm() <= 1e-8 * z.norm().max(1e-300))
        {
            reps.push(z);
        }
    }
    if reps.is_empty() {
        return Err(Error::Solver(
            "no stable Ritz values found; the pencil may be unstable".into(),
        ));
    }

    let rational = |shifts: &[Complex<f64>], lam: Complex<f64>| -> f64 {
        shifts
            .iter()
            .map(|p| (p - lam).norm() / (p.conj() + lam).norm())
            .product()
    };
    let push_pair = |shifts: &mut Vec<Complex<f64>>, z: Complex<f64>| {
        if z.im.abs() > 1e-12 * z.norm() {
            shifts.push(z);
            shifts.push(z.conj());
        } else {
            shifts.push(Complex::new(z.re, 0.0));
        }
    };

    let mut shifts: Vec<Complex<f64>> = Vec::new();
    // Seed: the single candidate with the best worst-case damping.
    let mut best: Option<(f64, Complex<f64>)> = None;
    for &c in &reps {
        let mut trial = Vec::new();
        push_pair(&mut trial, c);
        let worst = reps
            .iter()
            .map(|&l| rational(&trial, l))
            .fold(0.0f64, f64::max);
        if best.is_none() || worst < best.unwrap().0 {
            best = Some((worst, c));
        }
    }
    push_pair(&mut shifts, best.unwrap().1);
    while shifts.len() < num {
        let worst = reps
            .iter()
            .max_by(|&&x, &&y| {
                rational(&shifts, x)
                    .partial_cmp(&rational(&shifts, y))
                    .unwrap()
            })
            .copied()
            .unwrap();
        push_pair(&mut shifts, worst);
    }
    Ok(shifts)
}

// ---------------------------------------------------------------------------
// Low-rank ADI
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdiOptions {
    /// Relative residual target.
    pub tol: f64,
    /// Step cap; exceeding it is a convergence error.
    pub max_steps: usize,
    /// Number of cycled Penzl shifts.
    pub num_shifts: usize,
    /// Column compression period (steps).
    pub compress_every: usize,
}

impl AdiOptions {
    pub fn with_tol(tol: f64) -> Self {
        AdiOptions {
            tol,
            max_steps: 200,
            num_shifts: 10,
            compress_every: 10,
        }
    }
}

/// Detailed ADI outcome; `residuals[k]` is the relative residual after the
/// k-th recorded update (index 0 holds the initial value 1).
#[derive(Debug)]
pub struct AdiRun {
    pub factor: GramianFactor,
    pub residuals: Vec<f64>,
    pub shifts: Vec<Complex<f64>>,
    pub steps: usize,
}

enum ShiftFactor {
    Real(RealFactor),
    Cplx(ComplexFactor),
}

/// SVD-based column compression of a tall factor at a relative cutoff.
fn compress_columns(z: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if z.ncols() <= 1 {
        return z.clone();
    }
    let qr = z.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let svd = r.svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let s = &svd.singular_values;
    let smax = s.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > rel_tol * smax).collect();
    let keep = if keep.is_empty() { vec![0] } else { keep };
    let mut us = DMatrix::zeros(q.ncols(), keep.len());
    for (col, &i) in keep.iter().enumerate() {
        for row in 0..q.ncols() {
            us[(row, col)] = u[(row, i)] * s[i];
        }
    }
    &q * us
}

/// Solves `E P A^T + A P E^T = -RHS RHS^T` by low-rank ADI; returns the
/// factor, residual history, and shifts used.
pub fn solve_lyapunov_lradi_opts(
    e: &SysMatrix,
    a: &SysMatrix,
    rhs: &DMatrix<f64>,
    opts: &AdiOptions,
) -> Result<AdiRun> {
    let n = e.nrows();
    if n != a.nrows() || n != a.ncols() || n != e.ncols() || rhs.nrows() != n {
        return Err(Error::Dimension("ADI operands disagree".into()));
    }
    if !(opts.tol > 0.0 && opts.tol < 1.0) {
        return Err(Error::Argument(format!(
            "ADI tolerance must lie in (0, 1), got {}",
            opts.tol
        )));
    }
    let b_gram_norm = (rhs.transpose() * rhs).norm();
    if b_gram_norm == 0.0 {
        return Err(Error::Argument("zero right-hand side".into()));
    }

    let shifts = penzl_shifts(e, a, rhs, opts.num_shifts)?;
    let sym = e.is_symmetric(1e-12) && a.is_symmetric(1e-12);
    let bw = e.bandwidth().max(a.bandwidth());
    let mut factors: Vec<Option<ShiftFactor>> = (0..shifts.len()).map(|_| None).collect();

    let mut w = rhs.clone();
    let mut z = DMatrix::<f64>::zeros(n, 0);
    let mut residuals = vec![1.0];
    let mut steps = 0usize;
    let mut shift_idx = 0usize;
    let mut last_res = 1.0;
    let mut converged = false;

    fn append(z: &mut DMatrix<f64>, block: &DMatrix<f64>) {
        let n = z.nrows();
        let mut joined = DMatrix::zeros(n, z.ncols() + block.ncols());
        joined.view_mut((0, 0), (n, z.ncols())).copy_from(z);
        joined
            .view_mut((0, z.ncols()), (n, block.ncols()))
            .copy_from(block);
        *z = joined;
    }

    while steps < opts.max_steps {
        let idx = shift_idx % shifts.len();
        let p = shifts[idx];
        if p.im == 0.0 {
            if factors[idx].is_none() {
                factors[idx] = Some(ShiftFactor::Real(RealFactor::new(
                    &[(1.0, a), (p.re, e)],
                    sym,
                    bw,
                )?));
            }
            let fac = match factors[idx].as_ref().unwrap() {
                ShiftFactor::Real(f) => f,
                ShiftFactor::Cplx(_) => unreachable!(),
            };
            let v = fac.solve(&w)?;
            let block = &v * (-2.0 * p.re).sqrt();
            append(&mut z, &block);
            w -= e.mul_dense(&v) * (2.0 * p.re);
            steps += 1;
            shift_idx += 1;
        } else {
            // The conjugate partner is adjacent in the shift list; both steps
            // are realified into two real blocks.
            if factors[idx].is_none() {
                factors[idx] = Some(ShiftFactor::Cplx(ComplexFactor::new(&[
                    (Complex::new(1.0, 0.0), a),
                    (p, e),
                ])?));
            }
            let fac = match factors[idx].as_ref().unwrap() {
                ShiftFactor::Cplx(f) => f,
                ShiftFactor::Real(_) => unreachable!(),
            };
            let wc = w.map(|x| Complex::new(x, 0.0));
            let vc = fac.solve(&wc)?;
            let vr = vc.map(|x| x.re);
            let vi = vc.map(|x| x.im);
            let delta = p.re / p.im;
            let gamma = 2.0 * (-p.re).sqrt();
            let vr_shift = &vr + &vi * delta;
            let block1 = &vr_shift * gamma;
            let block2 = &vi * (gamma * (delta * delta + 1.0).sqrt());
            append(&mut z, &block1);
            append(&mut z, &block2);
            w -= e.mul_dense(&vr_shift) * (4.0 * p.re);
            steps += 2;
            shift_idx += 2;
        }

        last_res = (w.transpose() * &w).norm() / b_gram_norm;
        residuals.push(last_res);
        if last_res <= opts.tol {
            converged = true;
            break;
        }
        if steps % opts.compress_every == 0 {
            z = compress_columns(&z, 1e-14);
        }
    }

    if !converged {
        return Err(Error::Convergence {
            steps,
            residual: last_res,
        });
    }

    let z = compress_columns(&z, 1e-14);
    Ok(AdiRun {
        factor: GramianFactor::new(z, Side::Controllability, last_res)?,
        residuals,
        shifts,
        steps,
    })
}

/// Low-rank ADI with default options; see [`solve_lyapunov_lradi_opts`].
pub fn solve_lyapunov_lradi(
    e: &SysMatrix,
    a: &SysMatrix,
    rhs: &DMatrix<f64>,
    tol: f64,
) -> Result<GramianFactor> {
    Ok(solve_lyapunov_lradi_opts(e, a, rhs, &AdiOptions::with_tol(tol))?.factor)
}

/// Controllability and observability factors of an assembled system.
pub fn gramian_factors(
    asm: &crate::system::AssembledSystem,
    tol: f64,
) -> Result<(GramianFactor, GramianFactor)> {
    let x = solve_lyapunov_lradi(&asm.e, &asm.a, &asm.b, tol)?;
    let et = asm.e.transposed();
    let at = asm.a.transposed();
    let ct = asm.c.transpose();
    let y_raw = solve_lyapunov_lradi(&et, &at, &ct, tol)?;
    let y = GramianFactor::new(
        y_raw.factor().clone(),
        Side::Observability,
        y_raw.residual_norm(),
    )?;
    Ok((x, y))
}

/// Factors a dense symmetric PSD matrix as `X X^T` via its eigendecomposition,
/// keeping eigenvalues above `rel_cutoff * lambda_max`. Used to turn dense
/// oracle Gramians into factors.
pub fn factor_psd(p: &DMatrix<f64>, side: Side, rel_cutoff: f64) -> Result<GramianFactor> {
    if p.nrows() != p.ncols() {
        return Err(Error::Dimension("Gramian must be square".into()));
    }
    let sym = (p + p.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    if lmax <= 0.0 {
        return Err(Error::Degenerate("Gramian has no positive eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let kept: Vec<usize> = order
        .into_iter()
        .take_while(|&i| eig.eigenvalues[i] > rel_cutoff * lmax)
        .collect();
    let mut x = DMatrix::zeros(p.nrows(), kept.len());
    for (col, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for row in 0..p.nrows() {
            x[(row, col)] = eig.eigenvectors[(row, i)] * s;
        }
    }
    GramianFactor::new(x, side, 0.0)
}

// ---------------------------------------------------------------------------
// Factor truncation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum TruncateMode {
    FixedRank(usize),
    Tolerance(f64),
}

/// Truncates a factor via its thin SVD; the result `U1 S1` yields the best
/// fixed-rank approximation of the implied Gramian in Frobenius norm.
pub fn truncate_factor(f: &GramianFactor, mode: TruncateMode) -> Result<GramianFactor> {
    let svd = f.factor().clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
    });
    let keep = match mode {
        TruncateMode::FixedRank(k) => {
            if k == 0 || k > f.rank() {
                return Err(Error::Argument(format!(
                    "requested rank {k} outside 1..={}",
                    f.rank()
                )));
            }
            k
        }
        TruncateMode::Tolerance(tau) => {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::Argument(format!(
                    "truncation tolerance must lie in (0, 1), got {tau}"
                )));
            }
            let smax = svd.singular_values[order[0]];
            order
                .iter()
                .take_while(|&&i| svd.singular_values[i] >= tau * smax)
                .count()
                .max(1)
        }
    };
    let mut out = DMatrix::zeros(f.state_dim(), keep);
    for (col, &i) in order.iter().take(keep).enumerate() {
        let s = svd.singular_values[i];
        for row in 0..f.state_dim() {
            out[(row, col)] = u[(row, i)] * s;
        }
    }
    GramianFactor::new(out, f.side(), f.residual_norm())
}
