//! Parametric descriptor systems with affine matrix decomposition.
//!
//! A system is a family `E(mu) x' = A(mu) x + B(mu) u`, `y = C(mu) x` where
//! each matrix is a short sum of parameter-independent matrices weighted by
//! scalar coefficient functions. The module also generates the desk-scale
//! heat-conduction benchmark and ingests external systems from Matrix Market
//! files described by a JSON manifest.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::io;
use crate::matrix::{linear_combination, CooMatrix, SysMatrix, DENSE_LIMIT};

/// Axis-aligned parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > 2 {
            return Err(Error::Argument(
                "parameter box must have 1 or 2 axes".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::Argument("parameter box has lo > hi".into()));
        }
        Ok(ParamBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Membership with a tiny relative slack so floating-point grid endpoints
    /// (e.g. `5 + 25 * 0.2`) are not rejected.
    pub fn contains(&self, mu: &[f64]) -> bool {
        if mu.len() != self.dim() {
            return false;
        }
        mu.iter().zip(self.lo.iter().zip(&self.hi)).all(|(m, (l, h))| {
            let slack = 1e-9 * (h - l).max(1.0);
            *m >= l - slack && *m <= h + slack
        })
    }

    fn describe(&self) -> String {
        let axes: Vec<String> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| format!("[{l}, {h}]"))
            .collect();
        axes.join(" x ")
    }
}

/// Scalar coefficient function of the parameter: a constant or a monomial
/// `c * mu1^a1 * mu2^a2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CoeffFn {
    Constant(f64),
    Monomial { c: f64, exps: [u32; 2] },
}

impl CoeffFn {
    pub fn eval(&self, mu: &[f64]) -> f64 {
        match self {
            CoeffFn::Constant(c) => *c,
            CoeffFn::Monomial { c, exps } => {
                let mut v = *c;
                for (axis, &e) in exps.iter().enumerate() {
                    if e > 0 {
                        v *= mu[axis].powi(e as i32);
                    }
                }
                v
            }
        }
    }

    fn max_axis(&self) -> usize {
        match self {
            CoeffFn::Constant(_) => 0,
            CoeffFn::Monomial { exps, .. } => {
                if exps[1] > 0 {
                    2
                } else if exps[0] > 0 {
                    1
                } else {
                    0
                }
            }
        }
    }
}

/// Coefficient structure of a system without any full-order matrices; this is
/// all the online stage of the algebraic method is allowed to see.
#[derive(Debug, Clone)]
pub struct SystemCoeffs {
    pub e: Vec<CoeffFn>,
    pub a: Vec<CoeffFn>,
    pub b: Vec<CoeffFn>,
    pub c: Vec<CoeffFn>,
    pub param_domain: ParamBox,
}

/// A parametric descriptor system in affine form.
#[derive(Debug, Clone)]
pub struct ParametricSystem {
    state_dim: usize,
    input_dim: usize,
    output_dim: usize,
    e_terms: Vec<(CoeffFn, SysMatrix)>,
    a_terms: Vec<(CoeffFn, SysMatrix)>,
    b_terms: Vec<(CoeffFn, DMatrix<f64>)>,
    c_terms: Vec<(CoeffFn, DMatrix<f64>)>,
    param_domain: ParamBox,
}

/// System matrices evaluated at one parameter value.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub e: SysMatrix,
    pub a: SysMatrix,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub mu: Vec<f64>,
}

impl ParametricSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        output_dim: usize,
        e_terms: Vec<(CoeffFn, SysMatrix)>,
        a_terms: Vec<(CoeffFn, SysMatrix)>,
        b_terms: Vec<(CoeffFn, DMatrix<f64>)>,
        c_terms: Vec<(CoeffFn, DMatrix<f64>)>,
        param_domain: ParamBox,
    ) -> Result<Self> {
        let n = state_dim;
        if n == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::Argument("dimensions must be positive".into()));
        }
        if e_terms.is_empty() || a_terms.is_empty() || b_terms.is_empty() || c_terms.is_empty() {
            return Err(Error::Argument("every term list needs >= 1 term".into()));
        }
        for (name, terms) in [("E", &e_terms), ("A", &a_terms)] {
            for (k, (_, m)) in terms.iter().enumerate() {
                if m.nrows() != n || m.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "{name} term {k} is {}x{}, expected {n}x{n}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
            }
        }
        for (k, (_, m)) in b_terms.iter().enumerate() {
            if m.nrows() != n || m.ncols() != input_dim {
                return Err(Error::Dimension(format!(
                    "B term {k} is {}x{}, expected {n}x{input_dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for (k, (_, m)) in c_terms.iter().enumerate() {
            if m.nrows() != output_dim || m.ncols() != n {
                return Err(Error::Dimension(format!(
                    "C term {k} is {}x{}, expected {output_dim}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let pd = param_domain.dim();
        let max_axis = e_terms
            .iter()
            .chain(&a_terms)
            .map(|(f, _)| f.max_axis())
            .chain(b_terms.iter().map(|(f, _)| f.max_axis()))
            .chain(c_terms.iter().map(|(f, _)| f.max_axis()))
            .max()
            .unwrap_or(0);
        if max_axis > pd {
            return Err(Error::Argument(format!(
                "coefficient uses parameter axis {max_axis} but the domain has {pd} axes"
            )));
        }
        Ok(ParametricSystem {
            state_dim,
            input_dim,
            output_dim,
            e_terms,
            a_terms,
            b_terms,
            c_terms,
            param_domain,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
    pub fn param_dim(&self) -> usize {
        self.param_domain.dim()
    }
    pub fn param_domain(&self) -> &ParamBox {
        &self.param_domain
    }
    pub fn e_terms(&self) -> &[(CoeffFn, SysMatrix)] {
        &self.e_terms
    }
    pub fn a_terms(&self) -> &[(CoeffFn, SysMatrix)] {
        &self.a_terms
    }
    pub fn b_terms(&self) -> &[(CoeffFn, DMatrix<f64>)] {
        &self.b_terms
    }
    pub fn c_terms(&self) -> &[(CoeffFn, DMatrix<f64>)] {
        &self.c_terms
    }

    /// The coefficient-only view used by n-independent online code.
    pub fn coeffs(&self) -> SystemCoeffs {
        SystemCoeffs {
            e: self.e_terms.iter().map(|(f, _)| f.clone()).collect(),
            a: self.a_terms.iter().map(|(f, _)| f.clone()).collect(),
            b: self.b_terms.iter().map(|(f, _)| f.clone()).collect(),
            c: self.c_terms.iter().map(|(f, _)| f.clone()).collect(),
            param_domain: self.param_domain.clone(),
        }
    }

    /// Evaluates the affine combinations at `mu`.
    pub fn assemble(&self, mu: &[f64]) -> Result<AssembledSystem> {
        if !self.param_domain.contains(mu) {
            return Err(Error::OutOfDomain {
                mu: mu.to_vec(),
                domain: self.param_domain.describe(),
            });
        }
        Ok(self.assemble_unchecked(mu))
    }

    /// Assembly without the domain check; useful for structural analysis
    /// outside the declared box.
    pub fn assemble_unchecked(&self, mu: &[f64]) -> AssembledSystem {
        instrument::bump();
        let combo = |terms: &[(CoeffFn, SysMatrix)]| {
            let scaled: Vec<(f64, &SysMatrix)> =
                terms.iter().map(|(f, m)| (f.eval(mu), m)).collect();
            linear_combination(&scaled).expect("validated at construction")
        };
        let dense_combo = |terms: &[(CoeffFn, DMatrix<f64>)]| {
            let mut acc = DMatrix::zeros(terms[0].1.nrows(), terms[0].1.ncols());
            for (f, m) in terms {
                acc += m * f.eval(mu);
            }
            acc
        };
        AssembledSystem {
            e: combo(&self.e_terms),
            a: combo(&self.a_terms),
            b: dense_combo(&self.b_terms),
            c: dense_combo(&self.c_terms),
            mu: mu.to_vec(),
        }
    }
}

impl AssembledSystem {
    pub fn state_dim(&self) -> usize {
        self.e.nrows()
    }

    /// Verifies that all eigenvalues of the pencil `lambda E - A` have
    /// negative real part. Dense eigensolve; guarded to desk scale.
    pub fn check_stable(&self) -> Result<()> {
        let n = self.state_dim();
        if n > 2000 {
            return Err(Error::SizeGuard(format!(
                "stability check is a dense eigensolve, refused for n = {n} > 2000"
            )));
        }
        let e = self.e.to_dense();
        let a = self.a.to_dense();
        let lu = e.lu();
        if lu.determinant() == 0.0 {
            return Err(Error::Solver("E(mu) is singular".into()));
        }
        let f = lu
            .solve(&a)
            .ok_or_else(|| Error::Solver("E(mu) is singular".into()))?;
        let eigs = f.complex_eigenvalues();
        let max_re = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        if max_re >= 0.0 {
            return Err(Error::Solver(format!(
                "pencil is not stable: max Re(lambda) = {max_re:.3e}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Heat-conduction benchmark
// ---------------------------------------------------------------------------

const DISC_RADIUS: f64 = 0.5;
const DISC_CENTERS: [(f64, f64); 2] = [(1.0, 1.0), (3.0, 3.0)];

/// Builds the two-parameter heat-conduction benchmark on `(0,4)^2`.
///
/// A uniform finite-difference grid with `grid_side` interior nodes per axis
/// discretizes `theta_t = div(sigma grad theta) + f` with homogeneous
/// Dirichlet boundary, `f = 1`, and conductivity `1 + mu1` on the disc of
/// radius 0.5 at (1,1), `1 + mu2` on the disc at (3,3), and 1 elsewhere. The
/// stiffness splits as `A(mu) = mu1 A1 + mu2 A2 + A3` with `A1`, `A2`
/// symmetric negative semidefinite and `A3` symmetric negative definite; the
/// lumped mass matrix is `E = h^2 I` and the output is the mean temperature.
/// The parameter domain is `[1,10] x [4,10]`.
pub fn make_heat_benchmark(grid_side: usize) -> Result<ParametricSystem> {
    let (terms, h, n) = heat_stiffness_terms(grid_side)?;
    let [a1, a2, a3] = terms;
    let e = scaled_identity(n, h * h);
    let b = DMatrix::from_element(n, 1, h * h);
    let c = DMatrix::from_element(1, n, 1.0 / n as f64);
    ParametricSystem::new(
        n,
        1,
        1,
        vec![(CoeffFn::Constant(1.0), e)],
        vec![
            (CoeffFn::Monomial { c: 1.0, exps: [1, 0] }, a1),
            (CoeffFn::Monomial { c: 1.0, exps: [0, 1] }, a2),
            (CoeffFn::Constant(1.0), a3),
        ],
        vec![(CoeffFn::Constant(1.0), b)],
        vec![(CoeffFn::Constant(1.0), c)],
        ParamBox::new(vec![1.0, 4.0], vec![10.0, 10.0])?,
    )
}

/// One-parameter variant of the heat benchmark with `mu2` frozen: the
/// stiffness becomes `A(mu) = mu A1 + (frozen_mu2 A2 + A3)`, mirroring the
/// anemometer-style structure `A1 + mu A2` with a single parameter in a box.
pub fn make_heat_benchmark_1param(grid_side: usize, frozen_mu2: f64) -> Result<ParametricSystem> {
    if !(4.0..=10.0).contains(&frozen_mu2) {
        return Err(Error::Argument(format!(
            "frozen_mu2 = {frozen_mu2} outside [4, 10]"
        )));
    }
    let (terms, h, n) = heat_stiffness_terms(grid_side)?;
    let [a1, a2, a3] = terms;
    let e = scaled_identity(n, h * h);
    let b = DMatrix::from_element(n, 1, h * h);
    let c = DMatrix::from_element(1, n, 1.0 / n as f64);
    ParametricSystem::new(
        n,
        1,
        1,
        vec![(CoeffFn::Constant(1.0), e)],
        vec![
            (CoeffFn::Monomial { c: 1.0, exps: [1, 0] }, a1),
            (CoeffFn::Constant(frozen_mu2), a2),
            (CoeffFn::Constant(1.0), a3),
        ],
        vec![(CoeffFn::Constant(1.0), b)],
        vec![(CoeffFn::Constant(1.0), c)],
        ParamBox::new(vec![1.0], vec![10.0])?,
    )
}

fn scaled_identity(n: usize, s: f64) -> SysMatrix {
    if n <= DENSE_LIMIT {
        SysMatrix::Dense(DMatrix::identity(n, n) * s)
    } else {
        SysMatrix::Sparse(
            CooMatrix::new(n, n, (0..n).map(|i| (i, i, s)).collect()).expect("diag"),
        )
    }
}

/// Builds `[A1, A2, A3]` for the heat benchmark: edge-flux finite differences
/// with the conductivity indicator evaluated at edge midpoints.
fn heat_stiffness_terms(grid_side: usize) -> Result<([SysMatrix; 3], f64, usize)> {
    if grid_side < 8 {
        return Err(Error::Argument(format!(
            "grid_side = {grid_side} too small; need >= 8 so both discs are resolved"
        )));
    }
    let s = grid_side;
    let n = s * s;
    let h = 4.0 / (s as f64 + 1.0);
    let coord = |k: usize| (k as f64 + 1.0) * h;
    let idx = |ix: usize, iy: usize| ix * s + iy;

    let region = |x: f64, y: f64| -> usize {
        for (d, (cx, cy)) in DISC_CENTERS.iter().enumerate() {
            let dx = x - cx;
            let dy = y - cy;
            if (dx * dx + dy * dy).sqrt() <= DISC_RADIUS {
                return d + 1;
            }
        }
        0
    };

    // One triplet list per term: 0 -> A1 (disc 1), 1 -> A2 (disc 2), 2 -> A3 (base).
    let mut trip: [Vec<(usize, usize, f64)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut add_edge = |u: usize, v: Option<usize>, mx: f64, my: f64| {
        let r = region(mx, my);
        // Base conductivity contributes on every edge; the disc terms only
        // inside their disc.
        let mut targets = vec![2usize];
        if r > 0 {
            targets.push(r - 1);
        }
        for t in targets {
            trip[t].push((u, u, -1.0));
            if let Some(v) = v {
                trip[t].push((u, v, 1.0));
            }
        }
    };

    for ix in 0..s {
        for iy in 0..s {
            let u = idx(ix, iy);
            let (x, y) = (coord(ix), coord(iy));
            // Four edges; boundary neighbors are Dirichlet ghosts.
            let right = if ix + 1 < s { Some(idx(ix + 1, iy)) } else { None };
            add_edge(u, right, x + h / 2.0, y);
            let left = if ix > 0 { Some(idx(ix - 1, iy)) } else { None };
            add_edge(u, left, x - h / 2.0, y);
            let up = if iy + 1 < s { Some(idx(ix, iy + 1)) } else { None };
            add_edge(u, up, x, y + h / 2.0);
            let down = if iy > 0 { Some(idx(ix, iy - 1)) } else { None };
            add_edge(u, down, x, y - h / 2.0);
        }
    }

    for (name, t) in [("A1", &trip[0]), ("A2", &trip[1])] {
        if t.is_empty() {
            return Err(Error::Argument(format!(
                "grid_side = {grid_side} resolves no edges of the {name} disc"
            )));
        }
    }

    let to_sys = |entries: Vec<(usize, usize, f64)>| -> Result<SysMatrix> {
        let mut coo = CooMatrix::new(n, n, entries)?;
        coo.consolidate();
        if n <= DENSE_LIMIT {
            let mut d = DMatrix::zeros(n, n);
            for &(i, j, v) in &coo.entries {
                d[(i, j)] += v;
            }
            Ok(SysMatrix::Dense(d))
        } else {
            Ok(SysMatrix::Sparse(coo))
        }
    };
    let [t1, t2, t3] = trip;
    Ok(([to_sys(t1)?, to_sys(t2)?, to_sys(t3)?], h, n))
}

// ---------------------------------------------------------------------------
// Manifest ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCoeff {
    c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exp: Option<[u32; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTerm {
    coeff: ManifestCoeff,
    file: String,
}

/// JSON manifest describing a system stored as Matrix Market files.
#[derive(Debug, Serialize, Deserialize)]
pub struct SystemManifest {
    state_dim: usize,
    input_dim: usize,
    output_dim: usize,
    param_domain: Vec<[f64; 2]>,
    e_terms: Vec<ManifestTerm>,
    a_terms: Vec<ManifestTerm>,
    b_terms: Vec<ManifestTerm>,
    c_terms: Vec<ManifestTerm>,
}

fn coeff_from_manifest(mc: &ManifestCoeff) -> CoeffFn {
    match mc.exp {
        None | Some([0, 0]) => CoeffFn::Constant(mc.c),
        Some(exps) => CoeffFn::Monomial { c: mc.c, exps },
    }
}

fn coeff_to_manifest(f: &CoeffFn) -> ManifestCoeff {
    match f {
        CoeffFn::Constant(c) => ManifestCoeff { c: *c, exp: None },
        CoeffFn::Monomial { c, exps } => ManifestCoeff {
            c: *c,
            exp: Some(*exps),
        },
    }
}

/// Loads a parametric system from a manifest; matrix paths resolve relative
/// to the manifest's directory.
pub fn load_system(manifest_path: &Path) -> Result<ParametricSystem> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    let man: SystemManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |f: &str| -> PathBuf { base.join(f) };

    let read_terms = |terms: &[ManifestTerm]| -> Result<Vec<(CoeffFn, SysMatrix)>> {
        terms
            .iter()
            .map(|t| Ok((coeff_from_manifest(&t.coeff), io::read_matrix(&resolve(&t.file))?)))
            .collect()
    };
    let read_dense_terms = |terms: &[ManifestTerm]| -> Result<Vec<(CoeffFn, DMatrix<f64>)>> {
        terms
            .iter()
            .map(|t| {
                Ok((
                    coeff_from_manifest(&t.coeff),
                    io::read_dense(&resolve(&t.file))?,
                ))
            })
            .collect()
    };

    let (lo, hi) = man
        .param_domain
        .iter()
        .map(|ax| (ax[0], ax[1]))
        .unzip::<f64, f64, Vec<f64>, Vec<f64>>();

    ParametricSystem::new(
        man.state_dim,
        man.input_dim,
        man.output_dim,
        read_terms(&man.e_terms)?,
        read_terms(&man.a_terms)?,
        read_dense_terms(&man.b_terms)?,
        read_dense_terms(&man.c_terms)?,
        ParamBox::new(lo, hi)?,
    )
}

/// Writes a system as `manifest.json` plus one Matrix Market file per term.
/// Returns the manifest path.
pub fn save_system(dir: &Path, sys: &ParametricSystem) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut man = SystemManifest {
        state_dim: sys.state_dim,
        input_dim: sys.input_dim,
        output_dim: sys.output_dim,
        param_domain: sys
            .param_domain
            .lo
            .iter()
            .zip(&sys.param_domain.hi)
            .map(|(l, h)| [*l, *h])
            .collect(),
        e_terms: Vec::new(),
        a_terms: Vec::new(),
        b_terms: Vec::new(),
        c_terms: Vec::new(),
    };
    for (k, (f, m)) in sys.e_terms.iter().enumerate() {
        let file = format!("E{k}.mtx");
        io::write_sys(&dir.join(&file), m)?;
        man.e_terms.push(ManifestTerm {
            coeff: coeff_to_manifest(f),
            file,
        });
    }
    for (k, (f, m)) in sys.a_terms.iter().enumerate() {
        let file = format!("A{k}.mtx");
        io::write_sys(&dir.join(&file), m)?;
        man.a_terms.push(ManifestTerm {
            coeff: coeff_to_manifest(f),
            file,
        });
    }
    for (k, (f, m)) in sys.b_terms.iter().enumerate() {
        let file = format!("B{k}.mtx");
        io::write_dense(&dir.join(&file), m)?;
        man.b_terms.push(ManifestTerm {
            coeff: coeff_to_manifest(f),
            file,
        });
    }
    for (k, (f, m)) in sys.c_terms.iter().enumerate() {
        let file = format!("C{k}.mtx");
        io::write_dense(&dir.join(&file), m)?;
        man.c_terms.push(ManifestTerm {
            coeff: coeff_to_manifest(f),
            file,
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&man).map_err(|e| Error::Json {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(path)
}
