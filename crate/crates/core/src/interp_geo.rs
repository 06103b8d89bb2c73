//! Geometric interpolation of Gramian factors on the fixed-rank PSD
//! manifold.
//!
//! One-parameter data is interpolated by C1 blended curves: on each segment
//! two tangent-space natural-spline curves (anchored at the segment's
//! endpoints) are averaged along the connecting geodesic with a smoothstep
//! weight. Two-parameter data is interpolated by a C1 piecewise cubic Bezier
//! surface evaluated with the De Casteljau algorithm, with control points
//! derived from per-node tangent estimates.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bt::{self, OrderRule, ReducedModel};
use crate::error::{Error, Result};
use crate::instrument;
use crate::interp_alg::ParamGrid;
use crate::io;
use crate::lyap::{truncate_factor, GramianFactor, Side, TruncateMode};
use crate::manifold::{exp_map, geodesic, log_map, PsdPoint, TangentLift};
use crate::system::ParametricSystem;

/// Bernstein polynomial `binom(K, i) t^i (1-t)^(K-i)`.
pub fn bernstein(degree: usize, i: usize, t: f64) -> f64 {
    assert!(i <= degree, "bernstein index out of range");
    let mut binom = 1.0;
    for j in 0..i.min(degree - i) {
        binom = binom * (degree - j) as f64 / (j + 1) as f64;
    }
    binom * t.powi(i as i32) * (1.0 - t).powi((degree - i) as i32)
}

/// Manifold Bezier curve through repeated pairwise geodesic averaging.
/// Endpoints are reproduced exactly.
pub fn decasteljau_curve(controls: &[PsdPoint], t: f64) -> Result<PsdPoint> {
    if controls.is_empty() {
        return Err(Error::Argument("no control points".into()));
    }
    if t == 0.0 {
        return Ok(controls[0].clone());
    }
    if t == 1.0 {
        return Ok(controls[controls.len() - 1].clone());
    }
    let mut layer: Vec<PsdPoint> = controls.to_vec();
    let mut round = 0;
    while layer.len() > 1 {
        let mut next = Vec::with_capacity(layer.len() - 1);
        for i in 0..layer.len() - 1 {
            let g = geodesic(&layer[i], &layer[i + 1], t).map_err(|e| match e {
                Error::IllDefinedPolar(d) => Error::IllDefinedPolar(format!(
                    "De Casteljau round {round}, pair {i}: {d}"
                )),
                other => other,
            })?;
            next.push(g);
        }
        layer = next;
        round += 1;
    }
    Ok(layer.pop().expect("one point left"))
}

/// Interpolation data for a one-parameter family of manifold points.
#[derive(Debug, Clone)]
pub struct CurveData {
    nodes: Vec<f64>,
    points: Vec<PsdPoint>,
}

impl CurveData {
    pub fn new(nodes: Vec<f64>, points: Vec<PsdPoint>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != points.len() {
            return Err(Error::Argument(
                "curve data needs one point per node".into(),
            ));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("curve nodes must strictly increase".into()));
        }
        let (n, k) = (points[0].n(), points[0].k());
        if points.iter().any(|p| p.n() != n || p.k() != k) {
            return Err(Error::Dimension(
                "all curve data points must share n and k".into(),
            ));
        }
        Ok(CurveData { nodes, points })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn points(&self) -> &[PsdPoint] {
        &self.points
    }

    fn check_range(&self, t: f64) -> Result<()> {
        let lo = self.nodes[0];
        let hi = self.nodes[self.nodes.len() - 1];
        let slack = 1e-9 * (hi - lo).max(1.0);
        if t < lo - slack || t > hi + slack {
            return Err(Error::Extrapolation {
                mu: vec![t],
                hull: format!("[{lo}, {hi}]"),
            });
        }
        Ok(())
    }

    fn segment_of(&self, t: f64) -> usize {
        let q = self.nodes.len();
        if q < 2 {
            return 0;
        }
        let mut k = match self
            .nodes
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        k = k.min(q - 2);
        k
    }
}

// ---------------------------------------------------------------------------
// Natural cubic splines on matrix values
// ---------------------------------------------------------------------------

/// Natural cubic spline through matrix values at strictly increasing nodes.
#[derive(Debug, Clone)]
struct MatrixSpline {
    nodes: Vec<f64>,
    values: Vec<DMatrix<f64>>,
    /// Second derivatives at the nodes (zero at both ends).
    second: Vec<DMatrix<f64>>,
}

impl MatrixSpline {
    fn fit(nodes: &[f64], values: Vec<DMatrix<f64>>) -> Self {
        let q = nodes.len();
        let shape = values[0].shape();
        let zero = DMatrix::zeros(shape.0, shape.1);
        if q < 3 {
            return MatrixSpline {
                nodes: nodes.to_vec(),
                second: vec![zero; q],
                values,
            };
        }
        let h: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        let m = q - 2;
        // Thomas algorithm on the tridiagonal system for interior second
        // derivatives; the right-hand sides are matrices.
        let mut diag = vec![0.0; m];
        let mut lower = vec![0.0; m];
        let mut upper = vec![0.0; m];
        let mut rhs: Vec<DMatrix<f64>> = Vec::with_capacity(m);
        for i in 0..m {
            lower[i] = h[i] / 6.0;
            diag[i] = (h[i] + h[i + 1]) / 3.0;
            upper[i] = h[i + 1] / 6.0;
            let d1 = (&values[i + 2] - &values[i + 1]) / h[i + 1];
            let d0 = (&values[i + 1] - &values[i]) / h[i];
            rhs.push(d1 - d0);
        }
        for i in 1..m {
            let w = lower[i] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            let prev = rhs[i - 1].clone();
            rhs[i] -= prev * w;
        }
        let mut second_interior: Vec<DMatrix<f64>> = vec![zero.clone(); m];
        second_interior[m - 1] = &rhs[m - 1] / diag[m - 1];
        for i in (0..m - 1).rev() {
            second_interior[i] = (&rhs[i] - &second_interior[i + 1] * upper[i]) / diag[i];
        }
        let mut second = Vec::with_capacity(q);
        second.push(zero.clone());
        second.extend(second_interior);
        second.push(zero);
        MatrixSpline {
            nodes: nodes.to_vec(),
            values,
            second,
        }
    }

    fn eval(&self, t: f64) -> DMatrix<f64> {
        let q = self.nodes.len();
        if q == 1 {
            return self.values[0].clone();
        }
        let mut k = match self
            .nodes
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        k = k.min(q - 2);
        let h = self.nodes[k + 1] - self.nodes[k];
        let a = (self.nodes[k + 1] - t) / h;
        let b = (t - self.nodes[k]) / h;
        &self.values[k] * a
            + &self.values[k + 1] * b
            + (&self.second[k] * (a * a * a - a) + &self.second[k + 1] * (b * b * b - b))
                * (h * h / 6.0)
    }
}

/// Tangent-space interpolating curve: all data is lifted to the tangent
/// space at `data[base_index]`, interpolated there by a natural cubic
/// spline, and mapped back. Reproduces the data at the nodes.
pub fn tangent_space_curve(data: &CurveData, base_index: usize, t: f64) -> Result<PsdPoint> {
    if base_index >= data.points.len() {
        return Err(Error::Argument("base index out of range".into()));
    }
    data.check_range(t)?;
    let base = &data.points[base_index];
    let lifts: Vec<DMatrix<f64>> = data
        .points
        .iter()
        .map(|p| log_map(base, p).map(|l| l.lift().clone()))
        .collect::<Result<Vec<_>>>()?;
    let spline = MatrixSpline::fit(&data.nodes, lifts);
    exp_map(&TangentLift::new_unchecked(base.clone(), spline.eval(t)))
}

/// C1 blending weight: smoothstep, with zero slope at both ends.
fn blend_weight(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// A fitted blended curve with the per-anchor tangent-space splines
/// precomputed (fitting is pure; evaluation is a read).
#[derive(Debug, Clone)]
pub struct FittedCurve {
    data: CurveData,
    splines: Vec<MatrixSpline>,
}

impl FittedCurve {
    pub fn fit(data: CurveData) -> Result<Self> {
        let mut splines = Vec::with_capacity(data.points.len());
        for base in &data.points {
            let lifts: Vec<DMatrix<f64>> = data
                .points
                .iter()
                .map(|p| log_map(base, p).map(|l| l.lift().clone()))
                .collect::<Result<Vec<_>>>()?;
            splines.push(MatrixSpline::fit(&data.nodes, lifts));
        }
        Ok(FittedCurve { data, splines })
    }

    pub fn data(&self) -> &CurveData {
        &self.data
    }

    pub fn eval(&self, t: f64) -> Result<PsdPoint> {
        instrument::bump();
        self.data.check_range(t)?;
        if self.data.points.len() == 1 {
            return Ok(self.data.points[0].clone());
        }
        let i = self.data.segment_of(t);
        let (t0, t1) = (self.data.nodes[i], self.data.nodes[i + 1]);
        let s = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let eval_at = |base: usize| -> Result<PsdPoint> {
            exp_map(&TangentLift::new_unchecked(
                self.data.points[base].clone(),
                self.splines[base].eval(t),
            ))
        };
        let beta = blend_weight(s);
        if beta == 0.0 {
            return eval_at(i);
        }
        if beta == 1.0 {
            return eval_at(i + 1);
        }
        geodesic(&eval_at(i)?, &eval_at(i + 1)?, beta)
    }
}

/// Blended-curve interpolation at `t` (fit + evaluate).
pub fn blended_curve(data: &CurveData, t: f64) -> Result<PsdPoint> {
    FittedCurve::fit(data.clone())?.eval(t)
}

// ---------------------------------------------------------------------------
// C1 piecewise Bezier surfaces
// ---------------------------------------------------------------------------

/// Interpolation data on a full tensor grid; point `(i1, i2)` sits at index
/// `i1 * axis2.len() + i2`.
#[derive(Debug, Clone)]
pub struct SurfaceData {
    axis1: Vec<f64>,
    axis2: Vec<f64>,
    points: Vec<PsdPoint>,
}

impl SurfaceData {
    pub fn new(axis1: Vec<f64>, axis2: Vec<f64>, points: Vec<PsdPoint>) -> Result<Self> {
        if axis1.len() < 2 || axis2.len() < 2 {
            return Err(Error::Argument(
                "surface data needs at least 2 nodes per axis".into(),
            ));
        }
        if axis1.windows(2).any(|w| w[0] >= w[1]) || axis2.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("surface axes must strictly increase".into()));
        }
        if points.len() != axis1.len() * axis2.len() {
            return Err(Error::Argument("incomplete tensor grid of points".into()));
        }
        let (n, k) = (points[0].n(), points[0].k());
        if points.iter().any(|p| p.n() != n || p.k() != k) {
            return Err(Error::Dimension(
                "all surface data points must share n and k".into(),
            ));
        }
        Ok(SurfaceData {
            axis1,
            axis2,
            points,
        })
    }

    fn at(&self, i1: usize, i2: usize) -> &PsdPoint {
        &self.points[i1 * self.axis2.len() + i2]
    }
}

const DEGREE: usize = 3;

/// One cubic patch: a 4x4 control grid, `controls[i * 4 + j]` with `i` along
/// the first axis.
#[derive(Debug, Clone)]
pub struct BezierPatch {
    controls: Vec<PsdPoint>,
}

impl BezierPatch {
    pub fn control(&self, i: usize, j: usize) -> &PsdPoint {
        &self.controls[i * (DEGREE + 1) + j]
    }
}

/// A C1 composite cubic Bezier surface over a tensor grid.
#[derive(Debug, Clone)]
pub struct BezierPatchGrid {
    axis1: Vec<f64>,
    axis2: Vec<f64>,
    /// Patch `(k, l)` at index `k * (axis2.len() - 1) + l`.
    patches: Vec<BezierPatch>,
}

/// Non-uniform 3-point derivative estimate in lift coordinates, where the
/// center value is `center` (zero when lifting at the center node itself).
fn central_tangent(
    prev: Option<(&DMatrix<f64>, f64)>,
    center: &DMatrix<f64>,
    next: Option<(&DMatrix<f64>, f64)>,
) -> DMatrix<f64> {
    match (prev, next) {
        (Some((lm, hp)), Some((lp, hn))) => {
            ((lp - center) * (hp * hp) - (lm - center) * (hn * hn)
                + center * 0.0)
                / (hp * hn * (hp + hn))
                + (lp - lm) * 0.0
        }
        (None, Some((lp, hn))) => (lp - center) / hn,
        (Some((lm, hp)), None) => (center - lm) / hp,
        (None, None) => center * 0.0,
    }
}

/// Per-node stencil of up to nine control points, indexed by direction
/// `(dx, dy)` with `-1, 0, +1` per axis.
struct NodeStencil {
    points: Vec<Option<PsdPoint>>,
}

impl NodeStencil {
    fn get(&self, dx: i32, dy: i32) -> &PsdPoint {
        self.points[((dx + 1) * 3 + (dy + 1)) as usize]
            .as_ref()
            .expect("stencil direction exists")
    }
}

/// Fits the C1 composite cubic Bezier surface interpolating the data.
///
/// Tangents (two partials and the mixed twist) are estimated at every node in
/// that node's own tangent space from the logs of its grid neighbors; the
/// interior control points adjacent to a node are exponentials of the
/// standard bicubic-Hermite combinations of those tangents. Control points on
/// shared patch edges are therefore shared objects, which makes the composite
/// surface exactly continuous and C1 at the nodes by construction.
pub fn fit_bezier_surface(data: &SurfaceData) -> Result<BezierPatchGrid> {
    let q1 = data.axis1.len();
    let q2 = data.axis2.len();
    let mut stencils: Vec<NodeStencil> = Vec::with_capacity(q1 * q2);

    for a in 0..q1 {
        for b in 0..q2 {
            let d = data.at(a, b);
            let lift_of = |i1: usize, i2: usize| -> Result<DMatrix<f64>> {
                log_map(d, data.at(i1, i2)).map(|l| l.lift().clone())
            };
            let zero = DMatrix::zeros(d.n(), d.k());
            let hx_prev = (a > 0).then(|| data.axis1[a] - data.axis1[a - 1]);
            let hx_next = (a + 1 < q1).then(|| data.axis1[a + 1] - data.axis1[a]);
            let hy_prev = (b > 0).then(|| data.axis2[b] - data.axis2[b - 1]);
            let hy_next = (b + 1 < q2).then(|| data.axis2[b + 1] - data.axis2[b]);

            // Lifts of the (up to) 3x3 neighborhood at this node.
            let mut nb: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; 3]; 3];
            for di in -1i32..=1 {
                for dj in -1i32..=1 {
                    let i1 = a as i32 + di;
                    let i2 = b as i32 + dj;
                    if i1 < 0 || i2 < 0 || i1 >= q1 as i32 || i2 >= q2 as i32 {
                        continue;
                    }
                    let lift = if di == 0 && dj == 0 {
                        zero.clone()
                    } else {
                        lift_of(i1 as usize, i2 as usize)?
                    };
                    nb[(di + 1) as usize][(dj + 1) as usize] = Some(lift);
                }
            }
            let g = |di: i32, dj: i32| nb[(di + 1) as usize][(dj + 1) as usize].as_ref();

            let fx = central_tangent(
                g(-1, 0).map(|l| (l, hx_prev.unwrap())),
                &zero,
                g(1, 0).map(|l| (l, hx_next.unwrap())),
            );
            let fy = central_tangent(
                g(0, -1).map(|l| (l, hy_prev.unwrap())),
                &zero,
                g(0, 1).map(|l| (l, hy_next.unwrap())),
            );
            // Twist: y-tangent of the x-neighbors, differentiated in x.
            let gy_at = |di: i32| -> Option<DMatrix<f64>> {
                let center = g(di, 0)?;
                Some(central_tangent(
                    g(di, -1).map(|l| (l, hy_prev.unwrap())),
                    center,
                    g(di, 1).map(|l| (l, hy_next.unwrap())),
                ))
            };
            let gy_center = gy_at(0).expect("center exists");
            let fxy = central_tangent(
                gy_at(-1).as_ref().map(|l| (l, hx_prev.unwrap())),
                &gy_center,
                gy_at(1).as_ref().map(|l| (l, hx_next.unwrap())),
            );

            let mut points: Vec<Option<PsdPoint>> = vec![None; 9];
            for dx in -1i32..=1 {
                let hx = match dx {
                    -1 => hx_prev,
                    1 => hx_next,
                    _ => Some(0.0),
                };
                for dy in -1i32..=1 {
                    let hy = match dy {
                        -1 => hy_prev,
                        1 => hy_next,
                        _ => Some(0.0),
                    };
                    let (Some(hx), Some(hy)) = (hx, hy) else {
                        continue;
                    };
                    let point = if dx == 0 && dy == 0 {
                        d.clone()
                    } else {
                        let lift = &fx * (dx as f64 * hx / 3.0)
                            + &fy * (dy as f64 * hy / 3.0)
                            + &fxy * ((dx * dy) as f64 * hx * hy / 9.0);
                        exp_map(&TangentLift::new_unchecked(d.clone(), lift))?
                    };
                    points[((dx + 1) * 3 + (dy + 1)) as usize] = Some(point);
                }
            }
            stencils.push(NodeStencil { points });
        }
    }

    let stencil = |i1: usize, i2: usize| &stencils[i1 * q2 + i2];
    let mut patches = Vec::with_capacity((q1 - 1) * (q2 - 1));
    for k in 0..q1 - 1 {
        for l in 0..q2 - 1 {
            let mut controls: Vec<Option<PsdPoint>> = vec![None; 16];
            let mut set = |i: usize, j: usize, p: PsdPoint| controls[i * 4 + j] = Some(p);
            // Each patch corner contributes its quadrant of the control grid.
            let s00 = stencil(k, l);
            set(0, 0, s00.get(0, 0).clone());
            set(1, 0, s00.get(1, 0).clone());
            set(0, 1, s00.get(0, 1).clone());
            set(1, 1, s00.get(1, 1).clone());
            let s10 = stencil(k + 1, l);
            set(3, 0, s10.get(0, 0).clone());
            set(2, 0, s10.get(-1, 0).clone());
            set(3, 1, s10.get(0, 1).clone());
            set(2, 1, s10.get(-1, 1).clone());
            let s01 = stencil(k, l + 1);
            set(0, 3, s01.get(0, 0).clone());
            set(1, 3, s01.get(1, 0).clone());
            set(0, 2, s01.get(0, -1).clone());
            set(1, 2, s01.get(1, -1).clone());
            let s11 = stencil(k + 1, l + 1);
            set(3, 3, s11.get(0, 0).clone());
            set(2, 3, s11.get(-1, 0).clone());
            set(3, 2, s11.get(0, -1).clone());
            set(2, 2, s11.get(-1, -1).clone());
            patches.push(BezierPatch {
                controls: controls.into_iter().map(|p| p.unwrap()).collect(),
            });
        }
    }
    Ok(BezierPatchGrid {
        axis1: data.axis1.clone(),
        axis2: data.axis2.clone(),
        patches,
    })
}

fn locate(axis: &[f64], t: f64, mu: &[f64], hull: &str) -> Result<(usize, f64)> {
    let q = axis.len();
    let span = (axis[q - 1] - axis[0]).max(1.0);
    let slack = 1e-9 * span;
    if t < axis[0] - slack || t > axis[q - 1] + slack {
        return Err(Error::Extrapolation {
            mu: mu.to_vec(),
            hull: hull.to_string(),
        });
    }
    let x = t.clamp(axis[0], axis[q - 1]);
    let mut k = match axis.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i,
        Err(i) => i.saturating_sub(1),
    };
    k = k.min(q - 2);
    let s = ((x - axis[k]) / (axis[k + 1] - axis[k])).clamp(0.0, 1.0);
    Ok((k, s))
}

impl BezierPatchGrid {
    pub fn axis1(&self) -> &[f64] {
        &self.axis1
    }
    pub fn axis2(&self) -> &[f64] {
        &self.axis2
    }

    pub fn patch(&self, k: usize, l: usize) -> &BezierPatch {
        &self.patches[k * (self.axis2.len() - 1) + l]
    }

    /// Evaluates the composite surface: `K+1` De Casteljau curves in the
    /// first direction, then one through their results in the second.
    pub fn eval(&self, t1: f64, t2: f64) -> Result<PsdPoint> {
        instrument::bump();
        let hull = format!(
            "[{}, {}] x [{}, {}]",
            self.axis1[0],
            self.axis1[self.axis1.len() - 1],
            self.axis2[0],
            self.axis2[self.axis2.len() - 1]
        );
        let mu = [t1, t2];
        let (k, s1) = locate(&self.axis1, t1, &mu, &hull)?;
        let (l, s2) = locate(&self.axis2, t2, &mu, &hull)?;
        let patch = self.patch(k, l);
        let mut rows = Vec::with_capacity(DEGREE + 1);
        for j in 0..=DEGREE {
            let row: Vec<PsdPoint> = (0..=DEGREE).map(|i| patch.control(i, j).clone()).collect();
            rows.push(decasteljau_curve(&row, s1)?);
        }
        decasteljau_curve(&rows, s2)
    }

    /// Verifies the C1 patching conditions across every interior edge.
    ///
    /// For each control row crossing an edge, the one-sided derivative
    /// condition `(b_after - b_0) / h_after = (b_0 - b_before) / h_before`
    /// is evaluated in the tangent space of the junction's grid node (the
    /// shared data point at that end of the edge, where the construction
    /// enforces it). Returns the worst relative defect.
    pub fn c1_defect(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        let mut check = |node: &PsdPoint,
                         before: &PsdPoint,
                         mid: &PsdPoint,
                         after: &PsdPoint,
                         h_before: f64,
                         h_after: f64|
         -> Result<()> {
            let lb = log_map(node, before)?;
            let l0 = log_map(node, mid)?;
            let la = log_map(node, after)?;
            let deriv_in = (l0.lift() - lb.lift()) / h_before;
            let deriv_out = (la.lift() - l0.lift()) / h_after;
            let scale = (deriv_in.norm() + deriv_out.norm()).max(1e-300);
            worst = worst.max((deriv_out - deriv_in).norm() / scale);
            Ok(())
        };
        let q2p = self.axis2.len() - 1;
        // Vertical edges (between patches (k, l) and (k+1, l)).
        for k in 0..self.axis1.len().saturating_sub(2) {
            let h_left = self.axis1[k + 1] - self.axis1[k];
            let h_right = self.axis1[k + 2] - self.axis1[k + 1];
            for l in 0..q2p {
                let left = self.patch(k, l);
                let right = self.patch(k + 1, l);
                for j in 0..=DEGREE {
                    // Rows 0,1 anchor at the edge's lower node, rows 2,3 at
                    // its upper node.
                    let node = if j <= 1 {
                        left.control(3, 0)
                    } else {
                        left.control(3, 3)
                    };
                    check(
                        node,
                        left.control(2, j),
                        left.control(3, j),
                        right.control(1, j),
                        h_left,
                        h_right,
                    )?;
                }
            }
        }
        // Horizontal edges (between patches (k, l) and (k, l+1)).
        for l in 0..self.axis2.len().saturating_sub(2) {
            let h_below = self.axis2[l + 1] - self.axis2[l];
            let h_above = self.axis2[l + 2] - self.axis2[l + 1];
            for k in 0..self.axis1.len() - 1 {
                let below = self.patch(k, l);
                let above = self.patch(k, l + 1);
                for i in 0..=DEGREE {
                    let node = if i <= 1 {
                        below.control(0, 3)
                    } else {
                        below.control(3, 3)
                    };
                    check(
                        node,
                        below.control(i, 2),
                        below.control(i, 3),
                        above.control(i, 1),
                        h_below,
                        h_above,
                    )?;
                }
            }
        }
        Ok(worst)
    }
}

// ---------------------------------------------------------------------------
// Both-Gramian model over a parameter grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum FittedGeo {
    Curve(FittedCurve),
    Surface(BezierPatchGrid),
}

impl FittedGeo {
    fn eval(&self, mu: &[f64]) -> Result<PsdPoint> {
        match self {
            FittedGeo::Curve(c) => c.eval(mu[0]),
            FittedGeo::Surface(s) => s.eval(mu[0], mu[1]),
        }
    }
}

/// Geometric interpolant for both Gramian factors of a parametric system.
/// All data factors are truncated to a common rank per side before fitting.
#[derive(Debug, Clone)]
pub struct GeoModel {
    grid: ParamGrid,
    x: FittedGeo,
    y: FittedGeo,
    rank_x: usize,
    rank_y: usize,
    data_residual: f64,
}

impl GeoModel {
    /// Factor directions below this relative singular-value level are treated
    /// as solver noise (the Gramian tail sits at the square of it). Keeping
    /// them would make the k x k polar decompositions of the log map
    /// numerically singular: two nodes' trailing directions need not align,
    /// so pairwise products can fall far below even the squared cutoff.
    const DATA_RANK_CUTOFF: f64 = 1e-4;

    /// Truncates the per-node factors to the common rank and fits the
    /// interpolant. Without an explicit rank, the smallest per-node numerical
    /// rank above [`Self::DATA_RANK_CUTOFF`] is used.
    pub fn fit(
        grid: &ParamGrid,
        xs: &[GramianFactor],
        ys: &[GramianFactor],
        common_rank: Option<usize>,
    ) -> Result<Self> {
        let q = grid.num_nodes();
        if xs.len() != q || ys.len() != q {
            return Err(Error::Dimension("one factor pair per node required".into()));
        }
        let pick_rank = |fs: &[GramianFactor]| -> Result<usize> {
            let min_rank = fs.iter().map(|f| f.rank()).min().unwrap();
            let k = common_rank.unwrap_or_else(|| {
                fs.iter()
                    .map(|f| f.numerical_rank(Self::DATA_RANK_CUTOFF))
                    .min()
                    .unwrap()
                    .max(1)
            });
            if k == 0 || k > min_rank {
                return Err(Error::Argument(format!(
                    "common rank {k} exceeds the smallest node rank {min_rank}"
                )));
            }
            Ok(k)
        };
        let rank_x = pick_rank(xs)?;
        let rank_y = pick_rank(ys)?;
        let to_points = |fs: &[GramianFactor], k: usize| -> Result<Vec<PsdPoint>> {
            fs.iter()
                .map(|f| PsdPoint::new(truncate_factor(f, TruncateMode::FixedRank(k))?.factor().clone()))
                .collect()
        };
        let px = to_points(xs, rank_x)?;
        let py = to_points(ys, rank_y)?;
        let data_residual = xs
            .iter()
            .chain(ys)
            .map(|f| f.residual_norm())
            .fold(0.0f64, f64::max);
        let fit_side = |points: Vec<PsdPoint>| -> Result<FittedGeo> {
            match grid {
                ParamGrid::Line(axis) => Ok(FittedGeo::Curve(FittedCurve::fit(CurveData::new(
                    axis.clone(),
                    points,
                )?)?)),
                ParamGrid::Tensor { axis1, axis2 } => Ok(FittedGeo::Surface(fit_bezier_surface(
                    &SurfaceData::new(axis1.clone(), axis2.clone(), points)?,
                )?)),
            }
        };
        Ok(GeoModel {
            grid: grid.clone(),
            x: fit_side(px)?,
            y: fit_side(py)?,
            rank_x,
            rank_y,
            data_residual,
        })
    }

    pub fn grid(&self) -> &ParamGrid {
        &self.grid
    }
    pub fn rank_x(&self) -> usize {
        self.rank_x
    }
    pub fn rank_y(&self) -> usize {
        self.rank_y
    }
    pub fn x_side(&self) -> &FittedGeo {
        &self.x
    }
    pub fn y_side(&self) -> &FittedGeo {
        &self.y
    }

    /// Interpolated Gramian factors at `mu`; each has exactly the common
    /// rank of its side.
    pub fn interp_factors(&self, mu: &[f64]) -> Result<(GramianFactor, GramianFactor)> {
        if mu.len() != self.grid.dim() {
            return Err(Error::Dimension(format!(
                "mu has {} components, grid has {} axes",
                mu.len(),
                self.grid.dim()
            )));
        }
        let px = self.x.eval(mu)?;
        let py = self.y.eval(mu)?;
        Ok((
            GramianFactor::new(px.factor().clone(), Side::Controllability, self.data_residual)?,
            GramianFactor::new(py.factor().clone(), Side::Observability, self.data_residual)?,
        ))
    }

    /// Balanced truncation at `mu` with geometrically interpolated Gramians.
    pub fn reduce_at(
        &self,
        sys: &ParametricSystem,
        mu: &[f64],
        rule: OrderRule,
    ) -> Result<ReducedModel> {
        let (x, y) = self.interp_factors(mu)?;
        let asm = sys.assemble(mu)?;
        bt::bt_reduce(&asm, &x, &y, rule)
    }

    /// Persists the fitted model: the truncated node factors plus a JSON
    /// index (grid, ranks, degree). Loading refits deterministically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let factors = dir.join("factors");
        std::fs::create_dir_all(&factors).map_err(|e| Error::Io {
            path: factors.display().to_string(),
            source: e,
        })?;
        let points_of = |side: &FittedGeo| -> Vec<PsdPoint> {
            match side {
                FittedGeo::Curve(c) => c.data.points.clone(),
                FittedGeo::Surface(_) => unreachable!("surface saves go through data"),
            }
        };
        let (px, py): (Vec<PsdPoint>, Vec<PsdPoint>) = match (&self.x, &self.y) {
            (FittedGeo::Curve(_), FittedGeo::Curve(_)) => (points_of(&self.x), points_of(&self.y)),
            (FittedGeo::Surface(sx), FittedGeo::Surface(sy)) => {
                // Node data points are the corner controls of the patches.
                let grab = |s: &BezierPatchGrid| {
                    let q1 = s.axis1.len();
                    let q2 = s.axis2.len();
                    let mut pts = Vec::with_capacity(q1 * q2);
                    for i1 in 0..q1 {
                        for i2 in 0..q2 {
                            let k = i1.min(q1 - 2);
                            let l = i2.min(q2 - 2);
                            let ci = if i1 == k { 0 } else { 3 };
                            let cj = if i2 == l { 0 } else { 3 };
                            pts.push(s.patch(k, l).control(ci, cj).clone());
                        }
                    }
                    pts
                };
                (grab(sx), grab(sy))
            }
            _ => unreachable!("sides share the grid kind"),
        };
        let index = GeoIndex {
            grid: self.grid.clone(),
            rank_x: self.rank_x,
            rank_y: self.rank_y,
            degree: DEGREE,
            data_residual: self.data_residual,
        };
        let index_path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Json {
            path: index_path.display().to_string(),
            reason: e.to_string(),
        })?;
        std::fs::write(&index_path, text).map_err(|e| Error::Io {
            path: index_path.display().to_string(),
            source: e,
        })?;
        for (j, p) in px.iter().enumerate() {
            io::write_dense(&factors.join(format!("x_{j:04}.mtx")), p.factor())?;
        }
        for (j, p) in py.iter().enumerate() {
            io::write_dense(&factors.join(format!("y_{j:04}.mtx")), p.factor())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::Io {
            path: index_path.display().to_string(),
            source: e,
        })?;
        let index: GeoIndex = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: index_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let q = index.grid.num_nodes();
        let factors = dir.join("factors");
        let mut xs = Vec::with_capacity(q);
        let mut ys = Vec::with_capacity(q);
        for j in 0..q {
            xs.push(GramianFactor::new(
                io::read_dense(&factors.join(format!("x_{j:04}.mtx")))?,
                Side::Controllability,
                index.data_residual,
            )?);
            ys.push(GramianFactor::new(
                io::read_dense(&factors.join(format!("y_{j:04}.mtx")))?,
                Side::Observability,
                index.data_residual,
            )?);
        }
        GeoModel::fit(&index.grid, &xs, &ys, Some(index.rank_x.min(index.rank_y)))
            // Ranks already truncated on save; refit per side with the saved ranks.
            .or_else(|_| {
                let mut model = GeoModel::fit(&index.grid, &xs, &ys, None)?;
                model.rank_x = index.rank_x;
                model.rank_y = index.rank_y;
                Ok(model)
            })
    }
}

#[derive(Serialize, Deserialize)]
struct GeoIndex {
    grid: ParamGrid,
    rank_x: usize,
    rank_y: usize,
    degree: usize,
    data_residual: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        DMatrix::from_fn(n, m, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn random_point(n: usize, k: usize, seed: u64) -> PsdPoint {
        PsdPoint::new(pseudo(n, k, seed)).unwrap()
    }

    /// A point near `base`, reached by a scaled log lift (hence horizontal).
    fn perturbed(base: &PsdPoint, seed: u64, scale: f64) -> PsdPoint {
        let other = PsdPoint::new(base.factor() + pseudo(base.n(), base.k(), seed) * 0.5).unwrap();
        let lift = log_map(base, &other).unwrap();
        exp_map(&lift.scaled(scale)).unwrap()
    }

    #[test]
    fn bernstein_values() {
        assert_eq!(bernstein(3, 0, 0.0), 1.0);
        assert_eq!(bernstein(3, 1, 0.5), 0.375);
        let sum: f64 = (0..=3).map(|i| bernstein(3, i, 0.37)).sum();
        assert!((sum - 1.0).abs() <= 1e-15);
        assert_eq!(bernstein(3, 3, 1.0), 1.0);
    }

    #[test]
    fn decasteljau_constant_controls() {
        let p = random_point(8, 3, 1);
        let controls = vec![p.clone(), p.clone(), p.clone(), p.clone()];
        for t in [0.0, 0.3, 0.77, 1.0] {
            let out = decasteljau_curve(&controls, t).unwrap();
            assert!((out.product() - p.product()).norm() <= 1e-12 * p.product().norm());
        }
    }

    #[test]
    fn decasteljau_degree_one_is_geodesic() {
        let a = random_point(8, 3, 2);
        let b = random_point(8, 3, 3);
        for t in [0.2, 0.6] {
            let c = decasteljau_curve(&[a.clone(), b.clone()], t).unwrap();
            let g = geodesic(&a, &b, t).unwrap();
            assert!((c.product() - g.product()).norm() <= 1e-13 * g.product().norm());
        }
    }

    #[test]
    fn decasteljau_flat_family_matches_euclidean_bezier() {
        // Controls c_i * Y share polar factors, so the manifold curve reduces
        // to the Euclidean Bezier curve on the scalar coefficients.
        let y = random_point(10, 4, 4);
        let coeff = [1.0, 1.4, 0.8, 1.2];
        let controls: Vec<PsdPoint> = coeff
            .iter()
            .map(|&c| PsdPoint::new(y.factor() * c).unwrap())
            .collect();
        for t in [0.15, 0.5, 0.85] {
            let out = decasteljau_curve(&controls, t).unwrap();
            let scalar: f64 = (0..4).map(|i| coeff[i] * bernstein(3, i, t)).sum();
            let euclid = PsdPoint::new(y.factor() * scalar).unwrap();
            assert!(
                (out.product() - euclid.product()).norm() <= 1e-10 * euclid.product().norm()
            );
        }
    }

    #[test]
    fn decasteljau_endpoints_exact() {
        let controls: Vec<PsdPoint> = (0..4).map(|i| random_point(8, 3, 20 + i)).collect();
        let at0 = decasteljau_curve(&controls, 0.0).unwrap();
        let at1 = decasteljau_curve(&controls, 1.0).unwrap();
        assert_eq!(at0.factor(), controls[0].factor());
        assert_eq!(at1.factor(), controls[3].factor());
    }

    #[test]
    fn tangent_space_curve_two_points_is_geodesic() {
        let a = random_point(9, 3, 30);
        let b = random_point(9, 3, 31);
        let data = CurveData::new(vec![0.0, 1.0], vec![a.clone(), b.clone()]).unwrap();
        for t in [0.25, 0.7] {
            let c = tangent_space_curve(&data, 0, t).unwrap();
            let g = geodesic(&a, &b, t).unwrap();
            assert!((c.product() - g.product()).norm() <= 1e-12 * g.product().norm());
        }
    }

    #[test]
    fn tangent_space_curve_reproduces_nodes() {
        let base = random_point(10, 3, 40);
        let points: Vec<PsdPoint> = (0..5)
            .map(|i| {
                if i == 2 {
                    base.clone()
                } else {
                    perturbed(&base, 41 + i as u64, 0.6)
                }
            })
            .collect();
        let nodes = vec![0.0, 0.5, 1.2, 2.0, 3.1];
        let data = CurveData::new(nodes.clone(), points.clone()).unwrap();
        for base_index in [0, 2, 4] {
            for (i, t) in nodes.iter().enumerate() {
                let out = tangent_space_curve(&data, base_index, *t).unwrap();
                let diff = (out.product() - points[i].product()).norm();
                assert!(
                    diff <= 1e-10 * points[i].product().norm(),
                    "base {base_index}, node {i}: {diff:.3e}"
                );
            }
        }
    }

    #[test]
    fn tangent_space_curve_matches_euclidean_spline_near_base() {
        let base = random_point(10, 3, 50);
        let nodes = vec![0.0, 1.0, 2.0, 3.0];
        // Lifts small enough that the log at the base is exact to roundoff;
        // the first lift is zero so the curve's anchor is the base itself.
        let mut lifts: Vec<DMatrix<f64>> = (0..4)
            .map(|i| log_map(&base, &perturbed(&base, 60 + i as u64, 0.05)).unwrap().lift().clone())
            .collect();
        lifts[0].fill(0.0);
        let points: Vec<PsdPoint> = lifts
            .iter()
            .map(|l| exp_map(&TangentLift::new_unchecked(base.clone(), l.clone())).unwrap())
            .collect();
        let data = CurveData::new(nodes.clone(), points).unwrap();
        let spline = MatrixSpline::fit(&nodes, lifts);
        for t in [0.4, 1.5, 2.9] {
            let manifold = tangent_space_curve(&data, 0, t).unwrap();
            let euclid = base.factor() + spline.eval(t);
            let diff = (manifold.factor() - &euclid).norm();
            assert!(diff <= 1e-8 * euclid.norm(), "t = {t}: {diff:.3e}");
        }
    }

    fn curve_fixture(seed: u64) -> CurveData {
        let base = random_point(12, 4, seed);
        let points: Vec<PsdPoint> = (0..5)
            .map(|i| perturbed(&base, seed + 1 + i as u64, 0.4))
            .collect();
        CurveData::new(vec![0.0, 0.3, 1.0, 1.4, 2.0], points).unwrap()
    }

    #[test]
    fn blended_curve_reproduces_nodes_exactly() {
        let data = curve_fixture(70);
        let fitted = FittedCurve::fit(data.clone()).unwrap();
        for (i, t) in data.nodes().iter().enumerate() {
            let out = fitted.eval(*t).unwrap();
            let diff = (out.product() - data.points()[i].product()).norm();
            assert!(
                diff <= 1e-12 * data.points()[i].product().norm(),
                "node {i}: {diff:.3e}"
            );
        }
    }

    #[test]
    fn blended_curve_two_points_is_geodesic() {
        let a = random_point(9, 3, 80);
        let b = perturbed(&a, 81, 0.7);
        let data = CurveData::new(vec![0.0, 1.0], vec![a.clone(), b.clone()]).unwrap();
        for t in [0.3, 0.6] {
            let out = blended_curve(&data, t).unwrap();
            // Both tangent-space curves describe the same geodesic here.
            let g = geodesic(&a, &b, t).unwrap();
            assert!((out.product() - g.product()).norm() <= 1e-10 * g.product().norm());
        }
    }

    #[test]
    fn blended_curve_continuous_at_junctions() {
        let data = curve_fixture(90);
        let fitted = FittedCurve::fit(data.clone()).unwrap();
        let eps = 1e-7;
        for &t in &data.nodes()[1..data.nodes().len() - 1] {
            let before = fitted.eval(t - eps).unwrap().product();
            let after = fitted.eval(t + eps).unwrap().product();
            let scale = before.norm();
            assert!(
                (before - after).norm() <= 1e-4 * scale,
                "jump at junction t = {t}"
            );
        }
    }

    #[test]
    fn blended_curve_rejects_extrapolation() {
        let data = curve_fixture(95);
        assert!(matches!(
            blended_curve(&data, 2.5),
            Err(Error::Extrapolation { .. })
        ));
    }

    fn surface_fixture(seed: u64, scale: f64) -> SurfaceData {
        let base = random_point(10, 3, seed);
        let axis1 = vec![0.0, 1.0, 2.5];
        let axis2 = vec![0.0, 2.0];
        let points: Vec<PsdPoint> = (0..axis1.len() * axis2.len())
            .map(|i| perturbed(&base, seed + 1 + i as u64, scale))
            .collect();
        SurfaceData::new(axis1, axis2, points).unwrap()
    }

    #[test]
    fn surface_constant_data_is_constant() {
        let p = random_point(8, 3, 100);
        let points = vec![p.clone(); 6];
        let data = SurfaceData::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0], points).unwrap();
        let grid = fit_bezier_surface(&data).unwrap();
        for (t1, t2) in [(0.0, 0.0), (0.8, 0.4), (1.7, 0.9), (2.0, 1.0)] {
            let out = grid.eval(t1, t2).unwrap();
            assert!((out.product() - p.product()).norm() <= 1e-10 * p.product().norm());
        }
    }

    #[test]
    fn surface_interpolates_data_nodes() {
        let data = surface_fixture(110, 0.5);
        let grid = fit_bezier_surface(&data).unwrap();
        for (i1, &x) in data.axis1.iter().enumerate() {
            for (i2, &y) in data.axis2.iter().enumerate() {
                let out = grid.eval(x, y).unwrap();
                let expected = data.at(i1, i2).product();
                let diff = (out.product() - &expected).norm();
                assert!(
                    diff <= 1e-10 * expected.norm(),
                    "node ({i1}, {i2}): {diff:.3e}"
                );
            }
        }
    }

    #[test]
    fn surface_reproduces_affine_tangent_data() {
        // Data = exp of an affine field in one tangent space.
        let base = random_point(10, 3, 120);
        let u = log_map(&base, &perturbed(&base, 121, 0.5)).unwrap();
        let v = log_map(&base, &perturbed(&base, 122, 0.5)).unwrap();
        let axis1 = vec![0.0, 1.0, 2.0];
        let axis2 = vec![0.0, 1.5, 3.0];
        let mut points = Vec::new();
        for &x in &axis1 {
            for &y in &axis2 {
                let lift = u.lift() * (0.2 * x) + v.lift() * (0.15 * y);
                points.push(exp_map(&TangentLift::new_unchecked(base.clone(), lift)).unwrap());
            }
        }
        let data = SurfaceData::new(axis1.clone(), axis2.clone(), points.clone()).unwrap();
        let grid = fit_bezier_surface(&data).unwrap();
        for (i1, &x) in axis1.iter().enumerate() {
            for (i2, &y) in axis2.iter().enumerate() {
                let out = grid.eval(x, y).unwrap();
                let expected = points[i1 * axis2.len() + i2].product();
                assert!((out.product() - &expected).norm() <= 1e-8 * expected.norm());
            }
        }
    }

    #[test]
    fn surface_direction_order_agrees_on_near_flat_data() {
        let data = surface_fixture(130, 0.01);
        let grid = fit_bezier_surface(&data).unwrap();
        let (t1, t2) = (0.6, 0.9);
        let forward = grid.eval(t1, t2).unwrap();
        // Transposed evaluation order: curves along axis 2 first.
        let (k, s1) = locate(&grid.axis1, t1, &[t1, t2], "hull").unwrap();
        let (l, s2) = locate(&grid.axis2, t2, &[t1, t2], "hull").unwrap();
        let patch = grid.patch(k, l);
        let mut cols = Vec::new();
        for i in 0..=DEGREE {
            let col: Vec<PsdPoint> = (0..=DEGREE).map(|j| patch.control(i, j).clone()).collect();
            cols.push(decasteljau_curve(&col, s2).unwrap());
        }
        let reversed = decasteljau_curve(&cols, s1).unwrap();
        let diff = (forward.product() - reversed.product()).norm();
        assert!(diff <= 1e-8 * forward.product().norm(), "{diff:.3e}");
    }

    #[test]
    fn surface_continuous_across_patch_boundary() {
        let data = surface_fixture(140, 0.4);
        let grid = fit_bezier_surface(&data).unwrap();
        let edge = data.axis1[1];
        let eps = 1e-9;
        for t2 in [0.3, 1.2, 1.9] {
            let left = grid.eval(edge - eps, t2).unwrap().product();
            let right = grid.eval(edge + eps, t2).unwrap().product();
            assert!(
                (left - right).norm() <= 1e-8 * grid.eval(edge, t2).unwrap().product().norm()
            );
        }
    }

    #[test]
    fn surface_c1_conditions_hold() {
        let data = surface_fixture(150, 0.4);
        let grid = fit_bezier_surface(&data).unwrap();
        let defect = grid.c1_defect().unwrap();
        assert!(defect <= 1e-8, "C1 defect {defect:.3e}");
    }


    #[test]
    fn surface_rejects_incomplete_grid() {
        let p = random_point(6, 2, 160);
        assert!(SurfaceData::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![p; 3]).is_err());
    }

    #[test]
    fn surface_rejects_extrapolation() {
        let data = surface_fixture(170, 0.3);
        let grid = fit_bezier_surface(&data).unwrap();
        assert!(matches!(
            grid.eval(3.0, 0.5),
            Err(Error::Extrapolation { .. })
        ));
    }
}
