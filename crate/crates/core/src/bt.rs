//! Square-root balanced truncation.
//!
//! The Hankel singular values and projection bases come from the thin SVD of
//! `Y^T E X` where `P = X X^T`, `Q = Y Y^T` are the Gramians; the reduced
//! model is `(W^T E T, W^T A T, W^T B, C T)` with `W = Y U1 S1^{-1/2}` and
//! `T = X V1 S1^{-1/2}`. The H-infinity error of the order-r model is
//! bounded by twice the discarded Hankel-value tail.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lyap::GramianFactor;
use crate::matrix::SysMatrix;
use crate::system::AssembledSystem;

/// How to pick the retained order from the Hankel values.
#[derive(Debug, Clone, Copy)]
pub enum OrderRule {
    /// Keep all values with `sigma_i / sigma_1 >= tol`.
    Tolerance(f64),
    /// Keep exactly `r` values (capped at the available count).
    Fixed(usize),
}

impl OrderRule {
    pub fn select(&self, sigma: &[f64]) -> Result<usize> {
        match *self {
            OrderRule::Tolerance(tol) => choose_order(sigma, tol),
            OrderRule::Fixed(r) => {
                if r == 0 {
                    return Err(Error::Argument("retained order must be positive".into()));
                }
                if sigma.is_empty() {
                    return Err(Error::Argument("empty singular value list".into()));
                }
                Ok(r.min(sigma.len()))
            }
        }
    }
}

/// Smallest `r` with `sigma_{r+1} / sigma_1 < tol` (the full length if the
/// tail never drops below the threshold).
pub fn choose_order(sigma: &[f64], tol: f64) -> Result<usize> {
    if sigma.is_empty() {
        return Err(Error::Argument("empty singular value list".into()));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Argument(format!(
            "order tolerance must lie in (0, 1), got {tol}"
        )));
    }
    let s1 = sigma[0];
    for r in 1..sigma.len() {
        if sigma[r] < tol * s1 {
            return Ok(r);
        }
    }
    Ok(sigma.len())
}

/// `2 * (sigma_{r+1} + ... + sigma_end)`, the balanced-truncation
/// H-infinity error bound.
pub fn error_bound(sigma: &[f64], r: usize) -> f64 {
    2.0 * sigma.iter().skip(r).sum::<f64>()
}

/// Thin SVD of the Hankel matrix `Y^T E X` with the retained blocks.
#[derive(Debug, Clone)]
pub struct HankelDecomposition {
    /// All singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// Retained left singular vectors, `k_o x r`.
    pub u1: DMatrix<f64>,
    /// Retained right singular vectors, `k_c x r`.
    pub v1: DMatrix<f64>,
    /// Retained order.
    pub r: usize,
}

/// Thin SVD sorted by decreasing singular value with a deterministic sign
/// convention: the first significant component of each left singular vector
/// is made positive (the right vector flips along).
///
/// Shared by the direct Hankel path and the offline-online block path so the
/// two produce identical bases.
pub(crate) fn thin_svd_sorted_signed(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
    });
    let mut u_out = DMatrix::zeros(u.nrows(), k);
    let mut v_out = DMatrix::zeros(vt.ncols(), k);
    let mut s_out = Vec::with_capacity(k);
    for (col, &i) in order.iter().enumerate() {
        s_out.push(svd.singular_values[i]);
        let col_max = (0..u.nrows()).fold(0.0f64, |acc, r| acc.max(u[(r, i)].abs()));
        let mut sign = 1.0;
        for r in 0..u.nrows() {
            if u[(r, i)].abs() > 1e-8 * col_max {
                sign = u[(r, i)].signum();
                break;
            }
        }
        for r in 0..u.nrows() {
            u_out[(r, col)] = sign * u[(r, i)];
        }
        for r in 0..vt.ncols() {
            v_out[(r, col)] = sign * vt[(i, r)];
        }
    }
    (u_out, s_out, v_out)
}

/// Retained order after applying the rule and dropping exact-zero trailing
/// values (keeping a zero would blow up `S1^{-1/2}`).
pub(crate) fn retained_order(sigma: &[f64], rule: OrderRule) -> Result<usize> {
    if sigma.first().copied().unwrap_or(0.0) < 1e-300 {
        return Err(Error::Degenerate(
            "all Hankel singular values below 1e-300".into(),
        ));
    }
    let mut r = rule.select(sigma)?;
    while r > 1 && sigma[r - 1] <= 0.0 {
        r -= 1;
    }
    Ok(r)
}

/// SVD of `Y^T E X` and selection of the retained order.
pub fn hankel_svd(
    y: &GramianFactor,
    e: &SysMatrix,
    x: &GramianFactor,
    rule: OrderRule,
) -> Result<HankelDecomposition> {
    if y.state_dim() != e.nrows() || x.state_dim() != e.ncols() {
        return Err(Error::Dimension("factor/E dimensions disagree".into()));
    }
    let ex = e.mul_dense(x.factor());
    let m = y.factor().transpose() * ex;
    let (u, sigma, v) = thin_svd_sorted_signed(&m);
    let r = retained_order(&sigma, rule)?;
    Ok(HankelDecomposition {
        u1: u.columns(0, r).into_owned(),
        v1: v.columns(0, r).into_owned(),
        singular_values: sigma,
        r,
    })
}

/// Projection matrices `W = Y U1 S1^{-1/2}`, `T = X V1 S1^{-1/2}`.
pub fn projection_matrices(
    y: &GramianFactor,
    x: &GramianFactor,
    hd: &HankelDecomposition,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = hd.r;
    let s1 = hd.singular_values[0];
    let sr = hd.singular_values[r - 1];
    if sr < 1e-14 * s1 {
        return Err(Error::IllConditioned(format!(
            "sigma_r / sigma_1 = {:.3e}; the order rule should have truncated earlier",
            sr / s1
        )));
    }
    let mut u_scaled = hd.u1.clone();
    let mut v_scaled = hd.v1.clone();
    for c in 0..r {
        let s = hd.singular_values[c].sqrt().recip();
        for i in 0..u_scaled.nrows() {
            u_scaled[(i, c)] *= s;
        }
        for i in 0..v_scaled.nrows() {
            v_scaled[(i, c)] *= s;
        }
    }
    Ok((y.factor() * u_scaled, x.factor() * v_scaled))
}

/// A reduced-order model with the Hankel values that produced it.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub er: DMatrix<f64>,
    pub ar: DMatrix<f64>,
    pub br: DMatrix<f64>,
    pub cr: DMatrix<f64>,
    pub hankel_values: Vec<f64>,
    pub mu: Vec<f64>,
}

impl ReducedModel {
    pub fn order(&self) -> usize {
        self.er.nrows()
    }
}

/// Petrov-Galerkin projection of an assembled system.
pub fn reduce(
    asm: &AssembledSystem,
    w: &DMatrix<f64>,
    t: &DMatrix<f64>,
    hankel_values: Vec<f64>,
) -> Result<ReducedModel> {
    let n = asm.state_dim();
    if w.nrows() != n || t.nrows() != n {
        return Err(Error::Dimension("projection bases must have n rows".into()));
    }
    let et = asm.e.mul_dense(t);
    let at = asm.a.mul_dense(t);
    Ok(ReducedModel {
        er: w.transpose() * et,
        ar: w.transpose() * at,
        br: w.transpose() * &asm.b,
        cr: &asm.c * t,
        hankel_values,
        mu: asm.mu.clone(),
    })
}

/// The full square-root balanced truncation pipeline at one parameter value.
pub fn bt_reduce(
    asm: &AssembledSystem,
    x: &GramianFactor,
    y: &GramianFactor,
    rule: OrderRule,
) -> Result<ReducedModel> {
    let hd = hankel_svd(y, &asm.e, x, rule)?;
    let (w, t) = projection_matrices(y, x, &hd)?;
    reduce(asm, &w, &t, hd.singular_values.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyap::{factor_psd, solve_lyapunov_dense, Side};

    fn pseudo(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        DMatrix::from_fn(n, m, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn random_orthogonal(k: usize, seed: u64) -> DMatrix<f64> {
        pseudo(k, k, seed).qr().q()
    }

    #[test]
    fn choose_order_examples() {
        assert_eq!(choose_order(&[1.0, 1e-3, 1e-9], 1e-8).unwrap(), 2);
        assert_eq!(choose_order(&[1.0], 0.5).unwrap(), 1);
        assert_eq!(choose_order(&[1.0, 0.9, 0.8], 1e-8).unwrap(), 3);
        assert!(choose_order(&[], 1e-8).is_err());
    }

    #[test]
    fn choose_order_monotone_in_tol() {
        let sigma = [1.0, 0.3, 1e-2, 1e-5, 1e-9, 1e-12];
        let tols = [1e-1, 1e-3, 1e-6, 1e-10];
        let orders: Vec<usize> = tols
            .iter()
            .map(|&t| choose_order(&sigma, t).unwrap())
            .collect();
        for w in orders.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn error_bound_examples() {
        assert_eq!(error_bound(&[3.0, 2.0, 1.0], 1), 6.0);
        assert_eq!(error_bound(&[3.0, 2.0, 1.0], 3), 0.0);
    }

    #[test]
    fn hankel_unit_vector_case() {
        let n = 5;
        let mut e1 = DMatrix::zeros(n, 1);
        e1[(0, 0)] = 1.0;
        let x = GramianFactor::new(e1.clone(), Side::Controllability, 0.0).unwrap();
        let y = GramianFactor::new(e1, Side::Observability, 0.0).unwrap();
        let hd = hankel_svd(&y, &SysMatrix::identity(n), &x, OrderRule::Fixed(1)).unwrap();
        assert_eq!(hd.r, 1);
        assert!((hd.singular_values[0] - 1.0).abs() < 1e-14);
        assert!((hd.u1[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((hd.v1[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hankel_values_match_gramian_eigen_oracle() {
        let x = GramianFactor::new(pseudo(30, 7, 2), Side::Controllability, 0.0).unwrap();
        let y = GramianFactor::new(pseudo(30, 6, 3), Side::Observability, 0.0).unwrap();
        let e = SysMatrix::identity(30);
        let hd = hankel_svd(&y, &e, &x, OrderRule::Fixed(6)).unwrap();
        // Oracle: positive square roots of the eigenvalues of P E^T Q E.
        let p = x.product();
        let q = y.product();
        let m = &p * &q;
        let mut eigs: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.re.max(0.0)).collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (i, sv) in hd.singular_values.iter().enumerate() {
            let expected = eigs[i].sqrt();
            assert!(
                (sv - expected).abs() <= 1e-8 * hd.singular_values[0],
                "sigma_{i}: {sv:.6e} vs sqrt(eig) {expected:.6e}"
            );
        }
        // Orthogonality of the retained blocks.
        let ui = hd.u1.transpose() * &hd.u1;
        let vi = hd.v1.transpose() * &hd.v1;
        let id = DMatrix::identity(hd.r, hd.r);
        assert!((ui - &id).norm() < 1e-12);
        assert!((vi - &id).norm() < 1e-12);
    }

    #[test]
    fn scalar_biorthogonality() {
        // E = 1, A = -1, B = C = 1 has P = Q = 1/2 and sigma_1 = 1/2.
        let half = DMatrix::from_element(1, 1, 0.5f64.sqrt());
        let x = GramianFactor::new(half.clone(), Side::Controllability, 0.0).unwrap();
        let y = GramianFactor::new(half, Side::Observability, 0.0).unwrap();
        let e = SysMatrix::identity(1);
        let hd = hankel_svd(&y, &e, &x, OrderRule::Fixed(1)).unwrap();
        assert!((hd.singular_values[0] - 0.5).abs() < 1e-14);
        let (w, t) = projection_matrices(&y, &x, &hd).unwrap();
        assert!((w[(0, 0)] * t[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_projection_reproduces_fom() {
        let n = 4;
        let asm = AssembledSystem {
            e: SysMatrix::Dense(pseudo(n, n, 10) + DMatrix::identity(n, n) * 3.0),
            a: SysMatrix::Dense(pseudo(n, n, 11)),
            b: pseudo(n, 2, 12),
            c: pseudo(1, n, 13),
            mu: vec![0.0],
        };
        let id = DMatrix::identity(n, n);
        let rom = reduce(&asm, &id, &id, vec![]).unwrap();
        assert_eq!(rom.er, asm.e.to_dense());
        assert_eq!(rom.ar, asm.a.to_dense());
        assert_eq!(rom.br, asm.b);
        assert_eq!(rom.cr, asm.c);
    }

    /// Builds a small random stable SISO system with dense exact Gramians.
    fn stable_system_with_gramians(
        n: usize,
        seed: u64,
    ) -> (AssembledSystem, GramianFactor, GramianFactor) {
        let r = pseudo(n, n, seed);
        let bound = (0..n)
            .map(|i| (0..n).map(|j| r[(i, j)].abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let f = &r - DMatrix::identity(n, n) * (bound + 0.5);
        let e = DMatrix::identity(n, n) + pseudo(n, n, seed + 1) * (0.3 / n as f64);
        let a = &e * f;
        let b = pseudo(n, 1, seed + 2);
        let c = pseudo(1, n, seed + 3);
        let asm = AssembledSystem {
            e: SysMatrix::Dense(e.clone()),
            a: SysMatrix::Dense(a.clone()),
            b: b.clone(),
            c: c.clone(),
            mu: vec![0.0],
        };
        let p = solve_lyapunov_dense(&asm.e, &asm.a, &b).unwrap();
        let q = solve_lyapunov_dense(
            &SysMatrix::Dense(e.transpose()),
            &SysMatrix::Dense(a.transpose()),
            &c.transpose(),
        )
        .unwrap();
        let x = factor_psd(&p, Side::Controllability, 1e-13).unwrap();
        let y = factor_psd(&q, Side::Observability, 1e-13).unwrap();
        (asm, x, y)
    }

    #[test]
    fn rom_invariant_under_factor_rotation() {
        let (asm, x, y) = stable_system_with_gramians(8, 21);
        // Retained values must sit well above the noise floor for the SVD
        // bases to be determined up to sign.
        let rule = OrderRule::Tolerance(1e-4);
        let hd0 = hankel_svd(&y, &asm.e, &x, rule).unwrap();
        let (w0, t0) = projection_matrices(&y, &x, &hd0).unwrap();
        let rom0 = reduce(&asm, &w0, &t0, hd0.singular_values.clone()).unwrap();
        let rx = random_orthogonal(x.rank(), 5);
        let ry = random_orthogonal(y.rank(), 6);
        let x2 = GramianFactor::new(x.factor() * rx, Side::Controllability, 0.0).unwrap();
        let y2 = GramianFactor::new(y.factor() * ry, Side::Observability, 0.0).unwrap();
        let hd1 = hankel_svd(&y2, &asm.e, &x2, rule).unwrap();
        let (w1, t1) = projection_matrices(&y2, &x2, &hd1).unwrap();
        let rom1 = reduce(&asm, &w1, &t1, hd1.singular_values.clone()).unwrap();
        assert_eq!(rom0.order(), rom1.order());
        // Singular values are basis-free.
        for (s0, s1) in hd0.singular_values.iter().zip(&hd1.singular_values) {
            assert!((s0 - s1).abs() <= 1e-12 * hd0.singular_values[0]);
        }
        // W, T (and hence the ROM state basis) are class functions up to the
        // SVD sign ambiguity, which propagates as a diagonal +-1 similarity.
        let r = rom0.order();
        let d: Vec<f64> = (0..r)
            .map(|i| {
                let dot = w0.column(i).dot(&w1.column(i));
                assert!(dot.abs() > 1e-8 * w0.column(i).norm() * w1.column(i).norm());
                dot.signum()
            })
            .collect();
        let dm = DMatrix::from_fn(r, r, |i, j| if i == j { d[i] } else { 0.0 });
        for (m0, m1) in [
            (&rom0.er, &(&dm * &rom1.er * &dm)),
            (&rom0.ar, &(&dm * &rom1.ar * &dm)),
            (&rom0.br, &(&dm * &rom1.br)),
            (&rom0.cr, &(&rom1.cr * &dm)),
        ] {
            assert!(
                (m0 - m1).norm() <= 1e-10 * m0.norm().max(1.0),
                "{:.3e}",
                (m0 - m1).norm()
            );
        }
    }

    #[test]
    fn balanced_rom_gramians_equal_sigma() {
        let (asm, x, y) = stable_system_with_gramians(7, 33);
        let rom = bt_reduce(&asm, &x, &y, OrderRule::Fixed(4)).unwrap();
        let r = rom.order();
        let er = SysMatrix::Dense(rom.er.clone());
        let ar = SysMatrix::Dense(rom.ar.clone());
        let p_r = solve_lyapunov_dense(&er, &ar, &rom.br).unwrap();
        let q_r = solve_lyapunov_dense(
            &SysMatrix::Dense(rom.er.transpose()),
            &SysMatrix::Dense(rom.ar.transpose()),
            &rom.cr.transpose(),
        )
        .unwrap();
        let sigma = DMatrix::from_fn(r, r, |i, j| {
            if i == j {
                rom.hankel_values[i]
            } else {
                0.0
            }
        });
        assert!(
            (&p_r - &sigma).norm() <= 1e-6 * sigma.norm(),
            "controllability: {:.3e}",
            (&p_r - &sigma).norm() / sigma.norm()
        );
        assert!(
            (&q_r - &sigma).norm() <= 1e-6 * sigma.norm(),
            "observability: {:.3e}",
            (&q_r - &sigma).norm() / sigma.norm()
        );
    }

    #[test]
    fn biorthogonality_w_e_t() {
        let (asm, x, y) = stable_system_with_gramians(9, 44);
        let hd = hankel_svd(&y, &asm.e, &x, OrderRule::Tolerance(1e-6)).unwrap();
        let (w, t) = projection_matrices(&y, &x, &hd).unwrap();
        let wet = w.transpose() * asm.e.mul_dense(&t);
        let id = DMatrix::identity(hd.r, hd.r);
        assert!((wet - &id).norm() <= 1e-8 * (hd.r as f64).sqrt());
    }
}

