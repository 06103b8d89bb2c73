//! Quotient geometry of the manifold of rank-k positive semidefinite
//! matrices, represented by full-column-rank factors `Y` modulo the
//! orthogonal group: `[Y] = {Y Q}`. The Riemannian metric is inherited from
//! the Euclidean metric on factors; exponential and logarithm maps act on
//! horizontal lifts and reduce to a k x k polar decomposition.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A representative factor of a point on the fixed-rank PSD manifold.
#[derive(Debug, Clone)]
pub struct PsdPoint {
    factor: DMatrix<f64>,
}

impl PsdPoint {
    /// Accepts full-column-rank factors (`sigma_min > 1e-14 sigma_max`).
    pub fn new(factor: DMatrix<f64>) -> Result<Self> {
        if factor.ncols() == 0 || factor.nrows() < factor.ncols() {
            return Err(Error::Argument(format!(
                "factor must be tall and nonempty, got {}x{}",
                factor.nrows(),
                factor.ncols()
            )));
        }
        let svd = factor.clone().svd(false, false);
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
        let smin = svd
            .singular_values
            .iter()
            .fold(f64::INFINITY, |a, &v| a.min(v));
        if !(smin > 1e-14 * smax) {
            return Err(Error::OffManifold(format!(
                "factor is rank deficient: sigma_min/sigma_max = {:.3e}",
                smin / smax.max(1e-300)
            )));
        }
        Ok(PsdPoint { factor })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }
    pub fn n(&self) -> usize {
        self.factor.nrows()
    }
    pub fn k(&self) -> usize {
        self.factor.ncols()
    }

    /// The represented PSD matrix `Y Y^T`; dense, test-scale only.
    pub fn product(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }
}

/// A tangent vector at `base`, stored as its horizontal lift.
#[derive(Debug, Clone)]
pub struct TangentLift {
    base: PsdPoint,
    lift: DMatrix<f64>,
}

impl TangentLift {
    /// Validates horizontality: `base^T lift` symmetric to `1e-10 ||lift||`.
    pub fn new(base: PsdPoint, lift: DMatrix<f64>) -> Result<Self> {
        if lift.shape() != base.factor.shape() {
            return Err(Error::Dimension("lift must match the base factor".into()));
        }
        let m = base.factor.transpose() * &lift;
        let asym = (&m - m.transpose()).norm();
        let scale = lift.norm() * base.factor.norm();
        if asym > 1e-10 * scale.max(1e-300) {
            return Err(Error::Argument(format!(
                "lift is not horizontal: asymmetry {:.3e} of scale {:.3e}",
                asym, scale
            )));
        }
        Ok(TangentLift { base, lift })
    }

    pub(crate) fn new_unchecked(base: PsdPoint, lift: DMatrix<f64>) -> Self {
        TangentLift { base, lift }
    }

    pub fn base(&self) -> &PsdPoint {
        &self.base
    }
    pub fn lift(&self) -> &DMatrix<f64> {
        &self.lift
    }
    pub fn norm(&self) -> f64 {
        self.lift.norm()
    }

    pub fn scaled(&self, t: f64) -> TangentLift {
        TangentLift {
            base: self.base.clone(),
            lift: &self.lift * t,
        }
    }
}

/// Orthogonal factor of the polar decomposition `M = Q H` (`H` SPD), via the
/// SVD `M = U S V^T`, `Q = U V^T`; `Q` is the nearest orthogonal matrix to
/// `M` in Frobenius norm.
pub fn polar_orthogonal_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension("polar factor needs a square matrix".into()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v));
    if !(smin > 1e-12 * smax) {
        return Err(Error::IllDefinedPolar(format!(
            "sigma_min/sigma_max = {:.3e}; the logarithm is not defined here",
            smin / smax.max(1e-300)
        )));
    }
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v");
    Ok(u * vt)
}

/// Horizontal lift at `y1` of the logarithm of `[y2]`: `Y2 Q^T - Y1` with `Q`
/// the polar orthogonal factor of `Y1^T Y2`.
pub fn log_map(y1: &PsdPoint, y2: &PsdPoint) -> Result<TangentLift> {
    if y1.n() != y2.n() || y1.k() != y2.k() {
        return Err(Error::Dimension(
            "log map requires points with equal n and k".into(),
        ));
    }
    let q = polar_orthogonal_factor(&(y1.factor().transpose() * y2.factor()))?;
    let lift = y2.factor() * q.transpose() - y1.factor();
    Ok(TangentLift::new_unchecked(y1.clone(), lift))
}

/// Exponential map: the class of `base + lift`. Errors when the result
/// leaves the manifold (rank drop).
pub fn exp_map(t: &TangentLift) -> Result<PsdPoint> {
    PsdPoint::new(&t.base.factor + &t.lift).map_err(|e| match e {
        Error::OffManifold(d) => Error::OffManifold(format!("exp map left the manifold: {d}")),
        other => other,
    })
}

/// The geodesic from `[y1]` to `[y2]` evaluated at `t` (0 maps to `[y1]`,
/// 1 to `[y2]`).
pub fn geodesic(y1: &PsdPoint, y2: &PsdPoint, t: f64) -> Result<PsdPoint> {
    exp_map(&log_map(y1, y2)?.scaled(t))
}

/// Riemannian distance: the Frobenius norm of the log lift.
pub fn distance(y1: &PsdPoint, y2: &PsdPoint) -> Result<f64> {
    Ok(log_map(y1, y2)?.norm())
}
