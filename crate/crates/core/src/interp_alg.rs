//! Algebraic Gramian interpolation with an offline-online decomposition.
//!
//! The interpolated Gramian at `mu` is the non-negatively weighted sum
//! `sum_j w_j(mu) X_j X_j^T` of the training Gramians, realized on factors as
//! the column concatenation of `sqrt(w_j) X_j` over the active nodes. All
//! parameter-independent blocks `Y_l^T E_i X_j`, `Y_l^T A_i X_j`, `Y_l^T B_i`
//! and `C_i X_j` are precomputed offline, so the online reduced-model
//! assembly never touches an object of the full-order dimension.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bt::{self, OrderRule, ReducedModel};
use crate::error::{Error, Result};
use crate::instrument;
use crate::io;
use crate::lyap::{gramian_factors, GramianFactor, Side};
use crate::system::{ParametricSystem, SystemCoeffs};

/// MATLAB-style inclusive range `start : step : stop` (positive step).
pub fn colon_range(start: f64, step: f64, stop: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || stop < start {
        return Err(Error::Argument(format!(
            "bad range {start}:{step}:{stop}"
        )));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// A 1-D training grid or a tensor product of two sorted axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamGrid {
    Line(Vec<f64>),
    Tensor { axis1: Vec<f64>, axis2: Vec<f64> },
}

fn check_axis(axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Argument("empty grid axis".into()));
    }
    if axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(
            "grid axis must be strictly increasing".into(),
        ));
    }
    Ok(())
}

impl ParamGrid {
    pub fn line(axis: Vec<f64>) -> Result<Self> {
        check_axis(&axis)?;
        Ok(ParamGrid::Line(axis))
    }

    pub fn tensor(axis1: Vec<f64>, axis2: Vec<f64>) -> Result<Self> {
        check_axis(&axis1)?;
        check_axis(&axis2)?;
        Ok(ParamGrid::Tensor { axis1, axis2 })
    }

    pub fn dim(&self) -> usize {
        match self {
            ParamGrid::Line(_) => 1,
            ParamGrid::Tensor { .. } => 2,
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            ParamGrid::Line(a) => a.len(),
            ParamGrid::Tensor { axis1, axis2 } => axis1.len() * axis2.len(),
        }
    }

    /// Node `j`; tensor grids enumerate the second axis fastest.
    pub fn node(&self, j: usize) -> Vec<f64> {
        match self {
            ParamGrid::Line(a) => vec![a[j]],
            ParamGrid::Tensor { axis1, axis2 } => {
                vec![axis1[j / axis2.len()], axis2[j % axis2.len()]]
            }
        }
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.num_nodes()).map(|j| self.node(j)).collect()
    }

    fn hull(&self) -> String {
        match self {
            ParamGrid::Line(a) => format!("[{}, {}]", a[0], a[a.len() - 1]),
            ParamGrid::Tensor { axis1, axis2 } => format!(
                "[{}, {}] x [{}, {}]",
                axis1[0],
                axis1[axis1.len() - 1],
                axis2[0],
                axis2[axis2.len() - 1]
            ),
        }
    }
}

/// Weight assignment over training nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Piecewise-linear hats (tensor-product bilinear in 2-D); the default.
    LinearHat,
    /// Normalized inverse squared distance over all nodes; kept for
    /// comparison, not the default.
    InverseDistance,
}

/// Non-negative weights over the grid nodes with the nonzero support listed.
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub active: Vec<usize>,
}

/// Per-axis hat coordinates: node weights (at most two nonzero).
fn axis_hats(axis: &[f64], mu: f64, full_mu: &[f64], hull: &str) -> Result<Vec<f64>> {
    let q = axis.len();
    let span = (axis[q - 1] - axis[0]).max(1.0);
    let slack = 1e-9 * span;
    if mu < axis[0] - slack || mu > axis[q - 1] + slack {
        return Err(Error::Extrapolation {
            mu: full_mu.to_vec(),
            hull: hull.to_string(),
        });
    }
    let mut w = vec![0.0; q];
    if q == 1 {
        w[0] = 1.0;
        return Ok(w);
    }
    let x = mu.clamp(axis[0], axis[q - 1]);
    let mut k = match axis.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i,
        Err(i) => i.saturating_sub(1),
    };
    k = k.min(q - 2);
    let s = ((x - axis[k]) / (axis[k + 1] - axis[k])).clamp(0.0, 1.0);
    w[k + 1] = s;
    w[k] = 1.0 - s;
    Ok(w)
}

/// Linear-spline hat weights; exact partition of unity, at most 2 (1-D) or
/// 4 (2-D) nonzero entries.
pub fn hat_weights(grid: &ParamGrid, mu: &[f64]) -> Result<WeightVector> {
    if mu.len() != grid.dim() {
        return Err(Error::Dimension(format!(
            "mu has {} components, grid has {} axes",
            mu.len(),
            grid.dim()
        )));
    }
    let hull = grid.hull();
    let weights = match grid {
        ParamGrid::Line(a) => axis_hats(a, mu[0], mu, &hull)?,
        ParamGrid::Tensor { axis1, axis2 } => {
            let u = axis_hats(axis1, mu[0], mu, &hull)?;
            let v = axis_hats(axis2, mu[1], mu, &hull)?;
            let mut w = Vec::with_capacity(u.len() * v.len());
            for wu in &u {
                for wv in &v {
                    w.push(wu * wv);
                }
            }
            w
        }
    };
    let active = (0..weights.len()).filter(|&j| weights[j] > 0.0).collect();
    Ok(WeightVector { weights, active })
}

fn inverse_distance_weights(grid: &ParamGrid, mu: &[f64]) -> Result<WeightVector> {
    // Hull check identical to the hat scheme: no extrapolation.
    hat_weights(grid, mu)?;
    let nodes = grid.nodes();
    let d2: Vec<f64> = nodes
        .iter()
        .map(|nd| {
            nd.iter()
                .zip(mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    let scale = d2.iter().fold(0.0f64, |a, &v| a.max(v));
    if let Some(hit) = d2.iter().position(|&v| v <= 1e-28 * scale.max(1e-300)) {
        let mut weights = vec![0.0; nodes.len()];
        weights[hit] = 1.0;
        return Ok(WeightVector {
            weights,
            active: vec![hit],
        });
    }
    let inv: Vec<f64> = d2.iter().map(|&v| 1.0 / v).collect();
    let total: f64 = inv.iter().sum();
    let weights: Vec<f64> = inv.iter().map(|v| v / total).collect();
    Ok(WeightVector {
        active: (0..weights.len()).collect(),
        weights,
    })
}

pub fn weights(grid: &ParamGrid, mu: &[f64], scheme: WeightScheme) -> Result<WeightVector> {
    match scheme {
        WeightScheme::LinearHat => hat_weights(grid, mu),
        WeightScheme::InverseDistance => inverse_distance_weights(grid, mu),
    }
}

/// Concatenates `sqrt(w_j) X_j` over the active nodes. The product of the
/// result equals `sum_j w_j X_j X_j^T` exactly; its rank may be smaller than
/// its column count.
pub fn interp_factor(w: &WeightVector, factors: &[&GramianFactor]) -> Result<GramianFactor> {
    if w.weights.len() != factors.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} factors",
            w.weights.len(),
            factors.len()
        )));
    }
    if w.active.is_empty() {
        return Err(Error::Argument("all interpolation weights are zero".into()));
    }
    instrument::bump();
    let n = factors[w.active[0]].state_dim();
    let side = factors[w.active[0]].side();
    let total: usize = w.active.iter().map(|&j| factors[j].rank()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut col = 0;
    let mut residual: f64 = 0.0;
    for &j in &w.active {
        let f = factors[j];
        if f.state_dim() != n || f.side() != side {
            return Err(Error::Dimension(
                "factors disagree in dimension or side".into(),
            ));
        }
        let s = w.weights[j].sqrt();
        out.view_mut((0, col), (n, f.rank()))
            .copy_from(&(f.factor() * s));
        col += f.rank();
        residual = residual.max(f.residual_norm());
    }
    GramianFactor::new(out, side, residual)
}

// ---------------------------------------------------------------------------
// Offline data
// ---------------------------------------------------------------------------

/// Everything the online stage needs: training factors and all
/// parameter-independent projected blocks.
#[derive(Debug)]
pub struct OfflineData {
    pub grid: ParamGrid,
    pub factors_x: Vec<GramianFactor>,
    pub factors_y: Vec<GramianFactor>,
    /// `blocks_e[i][l * q + j] = Y_l^T E_i X_j`.
    pub blocks_e: Vec<Vec<DMatrix<f64>>>,
    /// `blocks_a[i][l * q + j] = Y_l^T A_i X_j`.
    pub blocks_a: Vec<Vec<DMatrix<f64>>>,
    /// `blocks_b[i][l] = Y_l^T B_i`.
    pub blocks_b: Vec<Vec<DMatrix<f64>>>,
    /// `blocks_c[i][j] = C_i X_j`.
    pub blocks_c: Vec<Vec<DMatrix<f64>>>,
    pub adi_tol: f64,
}

/// Solves the Lyapunov equations on the grid and precomputes every
/// parameter-independent block.
pub fn offline_precompute(
    sys: &ParametricSystem,
    grid: &ParamGrid,
    adi_tol: f64,
) -> Result<OfflineData> {
    if grid.dim() != sys.param_dim() {
        return Err(Error::Dimension(format!(
            "grid has {} axes, system has {} parameters",
            grid.dim(),
            sys.param_dim()
        )));
    }
    let nodes = grid.nodes();
    let factors: Vec<(GramianFactor, GramianFactor)> = nodes
        .par_iter()
        .enumerate()
        .map(|(j, mu)| {
            let asm = sys.assemble(mu).map_err(|e| e.at_node(j, mu))?;
            gramian_factors(&asm, adi_tol).map_err(|e| e.at_node(j, mu))
        })
        .collect::<Result<Vec<_>>>()?;
    let (factors_x, factors_y): (Vec<_>, Vec<_>) = factors.into_iter().unzip();
    build_offline_blocks(sys, grid.clone(), factors_x, factors_y, adi_tol)
}

/// Assembles the block tables from existing per-node factors.
pub fn build_offline_blocks(
    sys: &ParametricSystem,
    grid: ParamGrid,
    factors_x: Vec<GramianFactor>,
    factors_y: Vec<GramianFactor>,
    adi_tol: f64,
) -> Result<OfflineData> {
    let q = grid.num_nodes();
    if factors_x.len() != q || factors_y.len() != q {
        return Err(Error::Dimension("one factor pair per node required".into()));
    }

    let project =
        |terms: &[(crate::system::CoeffFn, crate::matrix::SysMatrix)]| -> Vec<Vec<DMatrix<f64>>> {
            terms
                .iter()
                .map(|(_, m)| {
                    let per_j: Vec<Vec<DMatrix<f64>>> = factors_x
                        .par_iter()
                        .map(|x| {
                            let mx = m.mul_dense(x.factor());
                            factors_y
                                .iter()
                                .map(|y| y.factor().transpose() * &mx)
                                .collect()
                        })
                        .collect();
                    // Reindex to l * q + j.
                    let mut flat = vec![DMatrix::zeros(0, 0); q * q];
                    for (j, col) in per_j.into_iter().enumerate() {
                        for (l, blk) in col.into_iter().enumerate() {
                            flat[l * q + j] = blk;
                        }
                    }
                    flat
                })
                .collect()
        };

    let blocks_e = project(sys.e_terms());
    let blocks_a = project(sys.a_terms());
    let blocks_b: Vec<Vec<DMatrix<f64>>> = sys
        .b_terms()
        .iter()
        .map(|(_, b)| {
            factors_y
                .iter()
                .map(|y| y.factor().transpose() * b)
                .collect()
        })
        .collect();
    let blocks_c: Vec<Vec<DMatrix<f64>>> = sys
        .c_terms()
        .iter()
        .map(|(_, c)| factors_x.iter().map(|x| c * x.factor()).collect())
        .collect();

    Ok(OfflineData {
        grid,
        factors_x,
        factors_y,
        blocks_e,
        blocks_a,
        blocks_b,
        blocks_c,
        adi_tol,
    })
}

impl OfflineData {
    /// Stacks the active blocks of one term family into the weighted block
    /// matrix of the interpolated Hankel product.
    fn weighted_block_matrix(
        &self,
        family: &[Vec<DMatrix<f64>>],
        coeffs: &[crate::system::CoeffFn],
        mu: &[f64],
        w: &WeightVector,
        row_offsets: &[usize],
        col_offsets: &[usize],
        rows: usize,
        cols: usize,
    ) -> DMatrix<f64> {
        let q = self.grid.num_nodes();
        let mut m = DMatrix::<f64>::zeros(rows, cols);
        for (i, blocks) in family.iter().enumerate() {
            let f = coeffs[i].eval(mu);
            if f == 0.0 {
                continue;
            }
            for (li, &l) in w.active.iter().enumerate() {
                for (ji, &j) in w.active.iter().enumerate() {
                    let wlj = (w.weights[l] * w.weights[j]).sqrt();
                    let blk = &blocks[l * q + j];
                    let mut view =
                        m.view_mut((row_offsets[li], col_offsets[ji]), (blk.nrows(), blk.ncols()));
                    for c in 0..blk.ncols() {
                        for r in 0..blk.nrows() {
                            view[(r, c)] += f * wlj * blk[(r, c)];
                        }
                    }
                }
            }
        }
        m
    }
}

/// Builds the reduced model at `mu` from precomputed blocks only; never
/// touches an n-sized object.
pub fn online_reduce(
    off: &OfflineData,
    coeffs: &SystemCoeffs,
    mu: &[f64],
    rule: OrderRule,
    scheme: WeightScheme,
) -> Result<ReducedModel> {
    let w = weights(&off.grid, mu, scheme)?;
    let row_sizes: Vec<usize> = w.active.iter().map(|&l| off.factors_y[l].rank()).collect();
    let col_sizes: Vec<usize> = w.active.iter().map(|&j| off.factors_x[j].rank()).collect();
    let mut row_offsets = vec![0usize; row_sizes.len()];
    let mut col_offsets = vec![0usize; col_sizes.len()];
    for i in 1..row_sizes.len() {
        row_offsets[i] = row_offsets[i - 1] + row_sizes[i - 1];
    }
    for i in 1..col_sizes.len() {
        col_offsets[i] = col_offsets[i - 1] + col_sizes[i - 1];
    }
    let rows: usize = row_sizes.iter().sum();
    let cols: usize = col_sizes.iter().sum();

    let m_e = off.weighted_block_matrix(
        &off.blocks_e,
        &coeffs.e,
        mu,
        &w,
        &row_offsets,
        &col_offsets,
        rows,
        cols,
    );
    let (u, sigma, v) = bt::thin_svd_sorted_signed(&m_e);
    let r = bt::retained_order(&sigma, rule)?;
    let s1 = sigma[0];
    if sigma[r - 1] < 1e-14 * s1 {
        return Err(Error::IllConditioned(format!(
            "sigma_r / sigma_1 = {:.3e} in the online Hankel matrix",
            sigma[r - 1] / s1
        )));
    }
    let mut u1s = u.columns(0, r).into_owned();
    let mut v1s = v.columns(0, r).into_owned();
    for c in 0..r {
        let s = sigma[c].sqrt().recip();
        for i in 0..u1s.nrows() {
            u1s[(i, c)] *= s;
        }
        for i in 0..v1s.nrows() {
            v1s[(i, c)] *= s;
        }
    }

    let m_a = off.weighted_block_matrix(
        &off.blocks_a,
        &coeffs.a,
        mu,
        &w,
        &row_offsets,
        &col_offsets,
        rows,
        cols,
    );

    let er = u1s.transpose() * &m_e * &v1s;
    let ar = u1s.transpose() * &m_a * &v1s;

    let m_in = off.blocks_b[0][0].ncols();
    let mut b_stack = DMatrix::<f64>::zeros(rows, m_in);
    for (li, &l) in w.active.iter().enumerate() {
        let s = w.weights[l].sqrt();
        for (i, fam) in off.blocks_b.iter().enumerate() {
            let f = coeffs.b[i].eval(mu);
            if f == 0.0 {
                continue;
            }
            let blk = &fam[l];
            let mut view = b_stack.view_mut((row_offsets[li], 0), (blk.nrows(), blk.ncols()));
            for c in 0..blk.ncols() {
                for rr in 0..blk.nrows() {
                    view[(rr, c)] += f * s * blk[(rr, c)];
                }
            }
        }
    }
    let br = u1s.transpose() * b_stack;

    let p_out = off.blocks_c[0][0].nrows();
    let mut c_stack = DMatrix::<f64>::zeros(p_out, cols);
    for (ji, &j) in w.active.iter().enumerate() {
        let s = w.weights[j].sqrt();
        for (i, fam) in off.blocks_c.iter().enumerate() {
            let f = coeffs.c[i].eval(mu);
            if f == 0.0 {
                continue;
            }
            let blk = &fam[j];
            let mut view = c_stack.view_mut((0, col_offsets[ji]), (blk.nrows(), blk.ncols()));
            for c in 0..blk.ncols() {
                for rr in 0..blk.nrows() {
                    view[(rr, c)] += f * s * blk[(rr, c)];
                }
            }
        }
    }
    let cr = c_stack * v1s;

    Ok(ReducedModel {
        er,
        ar,
        br,
        cr,
        hankel_values: sigma,
        mu: mu.to_vec(),
    })
}

/// The direct (full-order) path: concatenated factor, Hankel SVD, projection,
/// projection-based reduction. Serves as the independent oracle for
/// [`online_reduce`].
pub fn direct_reduce(
    sys: &ParametricSystem,
    off: &OfflineData,
    mu: &[f64],
    rule: OrderRule,
    scheme: WeightScheme,
) -> Result<ReducedModel> {
    let w = weights(&off.grid, mu, scheme)?;
    let xs: Vec<&GramianFactor> = off.factors_x.iter().collect();
    let ys: Vec<&GramianFactor> = off.factors_y.iter().collect();
    let x = interp_factor(&w, &xs)?;
    let y = interp_factor(&w, &ys)?;
    let asm = sys.assemble(mu)?;
    bt::bt_reduce(&asm, &x, &y, rule)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct OfflineIndex {
    grid: ParamGrid,
    adi_tol: f64,
    q_e: usize,
    q_a: usize,
    q_b: usize,
    q_c: usize,
    ranks_x: Vec<usize>,
    ranks_y: Vec<usize>,
    residuals_x: Vec<f64>,
    residuals_y: Vec<f64>,
}

fn json_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Json {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Persists offline data as one Matrix Market file per factor and per block
/// plus a JSON index. Reload is bit-exact.
pub fn save_offline(dir: &Path, off: &OfflineData) -> Result<()> {
    let factors = dir.join("factors");
    let blocks = dir.join("blocks");
    for d in [&factors, &blocks] {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.display().to_string(),
            source: e,
        })?;
    }
    let q = off.grid.num_nodes();
    let index = OfflineIndex {
        grid: off.grid.clone(),
        adi_tol: off.adi_tol,
        q_e: off.blocks_e.len(),
        q_a: off.blocks_a.len(),
        q_b: off.blocks_b.len(),
        q_c: off.blocks_c.len(),
        ranks_x: off.factors_x.iter().map(|f| f.rank()).collect(),
        ranks_y: off.factors_y.iter().map(|f| f.rank()).collect(),
        residuals_x: off.factors_x.iter().map(|f| f.residual_norm()).collect(),
        residuals_y: off.factors_y.iter().map(|f| f.residual_norm()).collect(),
    };
    let index_path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| json_err(&index_path, e))?;
    std::fs::write(&index_path, text).map_err(|e| Error::Io {
        path: index_path.display().to_string(),
        source: e,
    })?;

    for (j, f) in off.factors_x.iter().enumerate() {
        io::write_dense(&factors.join(format!("x_{j:04}.mtx")), f.factor())?;
    }
    for (l, f) in off.factors_y.iter().enumerate() {
        io::write_dense(&factors.join(format!("y_{l:04}.mtx")), f.factor())?;
    }
    for (i, fam) in off.blocks_e.iter().enumerate() {
        for l in 0..q {
            for j in 0..q {
                io::write_dense(
                    &blocks.join(format!("e{i}_{l:04}_{j:04}.mtx")),
                    &fam[l * q + j],
                )?;
            }
        }
    }
    for (i, fam) in off.blocks_a.iter().enumerate() {
        for l in 0..q {
            for j in 0..q {
                io::write_dense(
                    &blocks.join(format!("a{i}_{l:04}_{j:04}.mtx")),
                    &fam[l * q + j],
                )?;
            }
        }
    }
    for (i, fam) in off.blocks_b.iter().enumerate() {
        for (l, blk) in fam.iter().enumerate() {
            io::write_dense(&blocks.join(format!("b{i}_{l:04}.mtx")), blk)?;
        }
    }
    for (i, fam) in off.blocks_c.iter().enumerate() {
        for (j, blk) in fam.iter().enumerate() {
            io::write_dense(&blocks.join(format!("c{i}_{j:04}.mtx")), blk)?;
        }
    }
    Ok(())
}

/// Loads offline data persisted by [`save_offline`].
pub fn load_offline(dir: &Path) -> Result<OfflineData> {
    let index_path = dir.join("index.json");
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::Io {
        path: index_path.display().to_string(),
        source: e,
    })?;
    let index: OfflineIndex = serde_json::from_str(&text).map_err(|e| json_err(&index_path, e))?;
    let q = index.grid.num_nodes();
    let factors = dir.join("factors");
    let blocks = dir.join("blocks");

    let mut factors_x = Vec::with_capacity(q);
    let mut factors_y = Vec::with_capacity(q);
    for j in 0..q {
        factors_x.push(GramianFactor::new(
            io::read_dense(&factors.join(format!("x_{j:04}.mtx")))?,
            Side::Controllability,
            index.residuals_x[j],
        )?);
        factors_y.push(GramianFactor::new(
            io::read_dense(&factors.join(format!("y_{j:04}.mtx")))?,
            Side::Observability,
            index.residuals_y[j],
        )?);
    }
    let read_pair_family = |prefix: &str, count: usize| -> Result<Vec<Vec<DMatrix<f64>>>> {
        (0..count)
            .map(|i| {
                let mut fam = Vec::with_capacity(q * q);
                for l in 0..q {
                    for j in 0..q {
                        fam.push(io::read_dense(
                            &blocks.join(format!("{prefix}{i}_{l:04}_{j:04}.mtx")),
                        )?);
                    }
                }
                Ok(fam)
            })
            .collect()
    };
    let blocks_e = read_pair_family("e", index.q_e)?;
    let blocks_a = read_pair_family("a", index.q_a)?;
    let blocks_b = (0..index.q_b)
        .map(|i| {
            (0..q)
                .map(|l| io::read_dense(&blocks.join(format!("b{i}_{l:04}.mtx"))))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let blocks_c = (0..index.q_c)
        .map(|i| {
            (0..q)
                .map(|j| io::read_dense(&blocks.join(format!("c{i}_{j:04}.mtx"))))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(OfflineData {
        grid: index.grid,
        factors_x,
        factors_y,
        blocks_e,
        blocks_a,
        blocks_b,
        blocks_c,
        adi_tol: index.adi_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::make_heat_benchmark;

    #[test]
    fn colon_range_matches_matlab_semantics() {
        assert_eq!(colon_range(1.0, 1.0, 10.0).unwrap().len(), 10);
        assert_eq!(colon_range(4.0, 3.0, 10.0).unwrap(), vec![4.0, 7.0, 10.0]);
        assert_eq!(colon_range(5.0, 0.2, 10.0).unwrap().len(), 26);
        assert_eq!(colon_range(0.0, 0.1, 1.0).unwrap().len(), 11);
    }

    #[test]
    fn hat_weights_1d_examples() {
        let grid = ParamGrid::line(vec![1.0, 2.0, 3.0]).unwrap();
        let w = hat_weights(&grid, &[1.5]).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5, 0.0]);
        assert_eq!(w.active, vec![0, 1]);

        let at_node = hat_weights(&grid, &[2.0]).unwrap();
        assert_eq!(at_node.weights, vec![0.0, 1.0, 0.0]);
        assert_eq!(at_node.active, vec![1]);

        assert!(matches!(
            hat_weights(&grid, &[3.5]),
            Err(Error::Extrapolation { .. })
        ));
    }

    #[test]
    fn hat_weights_2d_bilinear_example() {
        let grid = ParamGrid::tensor(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let w = hat_weights(&grid, &[0.25, 0.75]).unwrap();
        // Nodes ordered (0,0), (0,1), (1,0), (1,1).
        assert_eq!(w.weights, vec![0.1875, 0.5625, 0.0625, 0.1875]);
        assert_eq!(w.active.len(), 4);
    }

    #[test]
    fn hat_weights_partition_of_unity() {
        let grid = ParamGrid::tensor(vec![1.0, 2.5, 4.0, 9.0], vec![4.0, 7.0, 10.0]).unwrap();
        for &(a, b) in &[(1.0, 4.0), (2.7, 8.3), (9.0, 10.0), (3.9999, 4.0001)] {
            let w = hat_weights(&grid, &[a, b]).unwrap();
            let sum: f64 = w.weights.iter().sum();
            assert!((sum - 1.0).abs() <= 4.0 * f64::EPSILON, "sum = {sum:.17}");
            assert!(w.weights.iter().all(|&v| v >= 0.0));
            assert!(w.active.len() <= 4);
        }
        let line = ParamGrid::line(vec![0.0, 0.3, 1.1]).unwrap();
        for mu in [0.0, 0.15, 0.3, 0.99, 1.1] {
            let w = hat_weights(&line, &[mu]).unwrap();
            assert_eq!(w.weights.iter().sum::<f64>(), 1.0);
            assert!(w.active.len() <= 2);
        }
    }

    #[test]
    fn single_node_grid_weights() {
        let grid = ParamGrid::line(vec![2.0]).unwrap();
        let w = hat_weights(&grid, &[2.0]).unwrap();
        assert_eq!(w.weights, vec![1.0]);
        assert!(hat_weights(&grid, &[2.5]).is_err());
    }

    #[test]
    fn inverse_distance_weights_collapse_at_nodes() {
        let grid = ParamGrid::line(vec![0.0, 1.0, 2.0]).unwrap();
        let w = weights(&grid, &[1.0], WeightScheme::InverseDistance).unwrap();
        assert_eq!(w.weights[1], 1.0);
        let w = weights(&grid, &[0.5], WeightScheme::InverseDistance).unwrap();
        assert_eq!(w.active.len(), 3);
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((w.weights[0] - w.weights[1]).abs() < 1e-14);
    }

    fn pseudo(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        DMatrix::from_fn(n, m, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn interp_factor_weighted_sum_oracle() {
        let x1 = GramianFactor::new(pseudo(10, 3, 1), Side::Controllability, 0.0).unwrap();
        let x2 = GramianFactor::new(pseudo(10, 3, 2), Side::Controllability, 0.0).unwrap();
        let w = WeightVector {
            weights: vec![0.3, 0.7],
            active: vec![0, 1],
        };
        let x = interp_factor(&w, &[&x1, &x2]).unwrap();
        let expected = x1.product() * 0.3 + x2.product() * 0.7;
        assert!((x.product() - &expected).norm() <= 1e-14 * expected.norm());
        assert_eq!(x.rank(), 6);
    }

    #[test]
    fn interp_factor_at_node_returns_the_node_factor() {
        let x1 = GramianFactor::new(pseudo(10, 4, 5), Side::Controllability, 0.0).unwrap();
        let x2 = GramianFactor::new(pseudo(10, 4, 6), Side::Controllability, 0.0).unwrap();
        let w = WeightVector {
            weights: vec![0.0, 1.0],
            active: vec![1],
        };
        let x = interp_factor(&w, &[&x1, &x2]).unwrap();
        assert_eq!(x.factor(), x2.factor());
    }

    #[test]
    fn interp_factor_rejects_zero_weights() {
        let x1 = GramianFactor::new(pseudo(10, 3, 1), Side::Controllability, 0.0).unwrap();
        let w = WeightVector {
            weights: vec![0.0],
            active: vec![],
        };
        assert!(interp_factor(&w, &[&x1]).is_err());
    }

    #[test]
    fn weighted_sum_stays_psd() {
        for seed in 0..10 {
            let xs: Vec<GramianFactor> = (0..3)
                .map(|i| {
                    GramianFactor::new(pseudo(12, 4, 100 * seed + i), Side::Controllability, 0.0)
                        .unwrap()
                })
                .collect();
            let raw = pseudo(3, 1, 999 + seed);
            let mut w: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            let wv = WeightVector {
                weights: w,
                active: vec![0, 1, 2],
            };
            let refs: Vec<&GramianFactor> = xs.iter().collect();
            let combined = interp_factor(&wv, &refs).unwrap().product();
            let trace = combined.trace();
            let min_eig = combined
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(f64::INFINITY, |a, &v| a.min(v));
            assert!(min_eig >= -1e-12 * trace);
        }
    }

    /// Shared fixture: small heat benchmark with a 2x2 training grid.
    fn small_offline() -> (crate::system::ParametricSystem, OfflineData) {
        let sys = make_heat_benchmark(8).unwrap();
        let grid = ParamGrid::tensor(vec![1.0, 10.0], vec![4.0, 10.0]).unwrap();
        let off = offline_precompute(&sys, &grid, 1e-10).unwrap();
        (sys, off)
    }

    #[test]
    fn offline_block_counts() {
        let (sys, off) = small_offline();
        let q = off.grid.num_nodes();
        assert_eq!(off.blocks_e.len(), sys.e_terms().len());
        assert_eq!(off.blocks_a.len(), sys.a_terms().len());
        for fam in &off.blocks_e {
            assert_eq!(fam.len(), q * q);
        }
        for fam in &off.blocks_a {
            assert_eq!(fam.len(), q * q);
        }
    }

    #[test]
    fn online_matches_direct_path() {
        let (sys, off) = small_offline();
        let coeffs = sys.coeffs();
        let rule = OrderRule::Tolerance(1e-8);
        for mu in [[2.0, 5.0], [7.3, 8.1], [9.99, 4.02]] {
            let online = online_reduce(&off, &coeffs, &mu, rule, WeightScheme::LinearHat).unwrap();
            let direct = direct_reduce(&sys, &off, &mu, rule, WeightScheme::LinearHat).unwrap();
            assert_eq!(online.order(), direct.order());
            for (m0, m1, name) in [
                (&online.er, &direct.er, "Er"),
                (&online.ar, &direct.ar, "Ar"),
                (&online.br, &direct.br, "Br"),
                (&online.cr, &direct.cr, "Cr"),
            ] {
                let rel = (m0 - m1).norm() / m1.norm().max(1e-300);
                assert!(rel <= 1e-10, "{name} at {mu:?}: rel {rel:.3e}");
            }
        }
    }

    #[test]
    fn online_at_node_equals_exact_bt() {
        let (sys, off) = small_offline();
        let coeffs = sys.coeffs();
        let rule = OrderRule::Tolerance(1e-8);
        let mu = off.grid.node(2);
        let online = online_reduce(&off, &coeffs, &mu, rule, WeightScheme::LinearHat).unwrap();
        let asm = sys.assemble(&mu).unwrap();
        let exact =
            crate::bt::bt_reduce(&asm, &off.factors_x[2], &off.factors_y[2], rule).unwrap();
        for (m0, m1) in [
            (&online.er, &exact.er),
            (&online.ar, &exact.ar),
            (&online.br, &exact.br),
            (&online.cr, &exact.cr),
        ] {
            assert!((m0 - m1).norm() <= 1e-10 * m1.norm().max(1e-300));
        }
    }

    #[test]
    fn online_touches_no_full_order_objects() {
        let (sys, off) = small_offline();
        let coeffs = sys.coeffs();
        let (_rom, touched) = instrument::counting(|| {
            online_reduce(
                &off,
                &coeffs,
                &[3.3, 6.6],
                OrderRule::Tolerance(1e-8),
                WeightScheme::LinearHat,
            )
            .unwrap()
        });
        assert_eq!(touched, 0, "online stage touched full-order objects");
    }

    #[test]
    fn online_is_local_in_the_active_support() {
        let (sys, _) = small_offline();
        // 3x2 grid: mu in the left cell must ignore the rightmost column.
        let grid = ParamGrid::tensor(vec![1.0, 5.0, 10.0], vec![4.0, 10.0]).unwrap();
        let off = offline_precompute(&sys, &grid, 1e-10).unwrap();
        let coeffs = sys.coeffs();
        let mu = [2.0, 6.0];
        let rule = OrderRule::Tolerance(1e-8);
        let rom0 = online_reduce(&off, &coeffs, &mu, rule, WeightScheme::LinearHat).unwrap();

        // Corrupt the factors and blocks of the far node (axis1 = 10).
        let mut off2 = off;
        let far: Vec<usize> = (0..off2.grid.num_nodes())
            .filter(|&j| off2.grid.node(j)[0] == 10.0)
            .collect();
        let q = off2.grid.num_nodes();
        for &j in &far {
            for fam in off2.blocks_e.iter_mut().chain(off2.blocks_a.iter_mut()) {
                for l in 0..q {
                    fam[l * q + j].fill(7.7);
                    fam[j * q + l].fill(7.7);
                }
            }
            for fam in off2.blocks_b.iter_mut() {
                fam[j].fill(7.7);
            }
            for fam in off2.blocks_c.iter_mut() {
                fam[j].fill(7.7);
            }
        }
        let rom1 = online_reduce(&off2, &coeffs, &mu, rule, WeightScheme::LinearHat).unwrap();
        for (m0, m1) in [
            (&rom0.er, &rom1.er),
            (&rom0.ar, &rom1.ar),
            (&rom0.br, &rom1.br),
            (&rom0.cr, &rom1.cr),
        ] {
            assert_eq!(m0.as_slice(), m1.as_slice(), "far node leaked into query");
        }
    }

    #[test]
    fn offline_roundtrip_is_bit_exact() {
        let (_, off) = small_offline();
        let dir = std::env::temp_dir().join("parabt_offline_roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        save_offline(&dir, &off).unwrap();
        let back = load_offline(&dir).unwrap();
        assert_eq!(back.grid, off.grid);
        for (a, b) in off.factors_x.iter().zip(&back.factors_x) {
            assert_eq!(a.factor().as_slice(), b.factor().as_slice());
        }
        for (fa, fb) in off.blocks_a.iter().zip(&back.blocks_a) {
            for (a, b) in fa.iter().zip(fb) {
                assert_eq!(a.as_slice(), b.as_slice());
            }
        }
    }
}
