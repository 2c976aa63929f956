//! Spline bases, difference penalties, identifiability constraints and design assembly.
//!
//! Bases are cubic B-splines on equally spaced knots extended past the data range, so a
//! coefficient sequence that is linear in its index reproduces a linear function of the
//! covariate and lies in the null space of the second-difference penalty. Outside the
//! training range a basis is extrapolated linearly from the boundary value and slope.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{PredictionCell, Segment};
use crate::error::{DsmError, Result};
use crate::linalg;

const DEGREE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    dim: usize,
    lo: f64,
    hi: f64,
}

impl BSplineBasis {
    pub fn from_values(values: &[f64], dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(DsmError::invalid(format!("basis dimension must be at least 4, got {dim}")));
        }
        let mut distinct: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < dim {
            return Err(DsmError::invalid(format!(
                "need at least {dim} distinct covariate values for a basis of dimension {dim}, found {}",
                distinct.len()
            )));
        }
        Ok(Self::on_range(distinct[0], *distinct.last().unwrap(), dim))
    }

    pub fn on_range(lo: f64, hi: f64, dim: usize) -> Self {
        let intervals = dim - DEGREE;
        let step = (hi - lo) / intervals as f64;
        let knots = (0..dim + DEGREE + 1)
            .map(|j| lo + (j as f64 - DEGREE as f64) * step)
            .collect();
        Self { knots, dim, lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn span(&self, x: f64) -> usize {
        let last = self.dim - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        let mut s = DEGREE;
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// Nonzero B-splines of degree `p` at `x` in knot span `span` (Cox–de Boor).
    fn basis_funs(&self, span: usize, x: f64, p: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    fn eval_inside(&self, x: f64, out: &mut [f64]) {
        let s = self.span(x);
        let n = self.basis_funs(s, x, DEGREE);
        for (r, v) in n.into_iter().enumerate() {
            out[s - DEGREE + r] = v;
        }
    }

    fn deriv_inside(&self, x: f64, out: &mut [f64]) {
        let s = self.span(x);
        let n2 = self.basis_funs(s, x, DEGREE - 1);
        let t = &self.knots;
        // B'_{j,3} = 3/(t_{j+3}-t_j) B_{j,2} - 3/(t_{j+4}-t_{j+1}) B_{j+1,2}
        let pf = DEGREE as f64;
        for (r, &v) in n2.iter().enumerate() {
            let i = s - (DEGREE - 1) + r;
            // B_{i,2} contributes positively to B'_{i,3} and negatively to B'_{i-1,3}
            if i < self.dim {
                out[i] += pf / (t[i + DEGREE] - t[i]) * v;
            }
            if i >= 1 {
                out[i - 1] -= pf / (t[i + DEGREE] - t[i]) * v;
            }
        }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if x < self.lo || x > self.hi {
            let edge = if x < self.lo { self.lo } else { self.hi };
            let mut d = vec![0.0; self.dim];
            self.eval_inside(edge, &mut out);
            self.deriv_inside(edge, &mut d);
            for (o, dv) in out.iter_mut().zip(d) {
                *o += (x - edge) * dv;
            }
        } else {
            self.eval_inside(x, &mut out);
        }
        out
    }

    pub fn derivative(&self, x: f64) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        self.deriv_inside(x.clamp(self.lo, self.hi), &mut d);
        d
    }

    pub fn design(&self, values: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(values.len(), self.dim);
        for (i, &x) in values.iter().enumerate() {
            for (j, v) in self.eval(x).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Second-order difference penalty DᵀD.
    pub fn penalty(&self) -> DMatrix<f64> {
        difference_penalty(self.dim)
    }
}

pub fn difference_penalty(k: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(k - 2, k);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -2.0;
        d[(i, i + 2)] = 1.0;
    }
    d.transpose() * d
}

/// Cubic B-spline columns and their second-difference penalty.
pub fn build_basis_1d(values: &[f64], basis_dim: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = BSplineBasis::from_values(values, basis_dim)?;
    Ok((b.design(values), b.penalty()))
}

/// Row-wise Kronecker product of two bases; column index is `ix * ky + iy`.
pub fn row_kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, ka, kb) = (a.nrows(), a.ncols(), b.ncols());
    let mut m = DMatrix::zeros(n, ka * kb);
    for i in 0..n {
        for p in 0..ka {
            let av = a[(i, p)];
            if av == 0.0 {
                continue;
            }
            for q in 0..kb {
                m[(i, p * kb + q)] = av * b[(i, q)];
            }
        }
    }
    m
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Tensor-product columns with the x-direction and y-direction roughness penalties.
pub fn build_tensor_2d(
    values_x: &[f64],
    values_y: &[f64],
    basis_dims: (usize, usize),
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let bx = BSplineBasis::from_values(values_x, basis_dims.0)?;
    let by = BSplineBasis::from_values(values_y, basis_dims.1)?;
    let tb = TermBasis::Tensor {
        cov_x: String::new(),
        cov_y: String::new(),
        bx,
        by,
    };
    let cols = row_kronecker(&tb.marginal(0).design(values_x), &tb.marginal(1).design(values_y));
    let pens = tb.raw_penalties();
    Ok((cols, pens[0].clone(), pens[1].clone()))
}

/// Sum-to-zero reparameterization of a term block: returns `X Z`, `Z`, and `Zᵀ S Z` per penalty.
pub fn apply_constraints(
    columns: &DMatrix<f64>,
    penalties: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let sums = DVector::from_iterator(columns.ncols(), columns.column_iter().map(|c| c.sum()));
    let z = linalg::null_complement(&sums)
        .ok_or_else(|| DsmError::invalid("identifiability constraint is degenerate (column sums vanish)"))?;
    let xz = columns * &z;
    let gram = xz.transpose() * &xz;
    if linalg::numerical_rank(&gram, 1e-12) < z.ncols() {
        return Err(DsmError::invalid("term columns are rank deficient after the sum-to-zero constraint"));
    }
    let pens = penalties
        .iter()
        .map(|s| {
            let mut m = z.transpose() * s * &z;
            linalg::symmetrize(&mut m);
            m
        })
        .collect();
    Ok((xz, z, pens))
}

/// Full-rank version of a penalty: identity weight added on its null-space directions.
pub fn null_space_ridge(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(linalg::symmetrized(s));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v));
    let mut out = s.clone();
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= 1e-9 * max {
            let u = eig.eigenvectors.column(j);
            out += u * u.transpose();
        }
    }
    linalg::symmetrize(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothKind {
    Univariate,
    #[serde(alias = "tensor")]
    Tensor2d,
    FactorSmooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub name: String,
    pub covariates: Vec<String>,
    #[serde(rename = "type")]
    pub kind: SmoothKind,
    #[serde(default)]
    pub basis_dim: Vec<usize>,
    #[serde(default)]
    pub factor: Option<String>,
}

impl SmoothSpec {
    pub fn univariate(name: &str, cov: &str, k: usize) -> Self {
        Self {
            name: name.into(),
            covariates: vec![cov.into()],
            kind: SmoothKind::Univariate,
            basis_dim: vec![k],
            factor: None,
        }
    }

    pub fn tensor(name: &str, cx: &str, cy: &str, kx: usize, ky: usize) -> Self {
        Self {
            name: name.into(),
            covariates: vec![cx.into(), cy.into()],
            kind: SmoothKind::Tensor2d,
            basis_dim: vec![kx, ky],
            factor: None,
        }
    }

    pub fn factor_smooth(name: &str, covariates: &[&str], basis_dim: &[usize], factor: &str) -> Self {
        Self {
            name: name.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            kind: SmoothKind::FactorSmooth,
            basis_dim: basis_dim.to_vec(),
            factor: Some(factor.into()),
        }
    }

    fn dims(&self) -> Result<Vec<usize>> {
        let n = self.covariates.len();
        if !(1..=2).contains(&n) {
            return Err(DsmError::invalid(format!("smooth '{}' needs 1 or 2 covariates", self.name)));
        }
        if self.kind == SmoothKind::Tensor2d && n != 2 {
            return Err(DsmError::invalid(format!("tensor smooth '{}' needs 2 covariates", self.name)));
        }
        if self.kind == SmoothKind::Univariate && n != 1 {
            return Err(DsmError::invalid(format!("univariate smooth '{}' needs 1 covariate", self.name)));
        }
        let default = if n == 2 { 5 } else { 10 };
        let dims = match self.basis_dim.len() {
            0 => vec![default; n],
            1 => vec![self.basis_dim[0]; n],
            _ => self.basis_dim[..n].to_vec(),
        };
        if dims.iter().any(|&k| k < 4) {
            return Err(DsmError::invalid(format!("smooth '{}': basis_dim must be at least 4", self.name)));
        }
        Ok(dims)
    }
}

/// Covariate columns feeding the design.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    pub n: usize,
    pub numeric: BTreeMap<String, Vec<f64>>,
    pub factor: BTreeMap<String, Vec<String>>,
}

impl Frame {
    pub fn from_segments(segments: &[Segment]) -> Self {
        let mut numeric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, s) in segments.iter().enumerate() {
            for (k, &v) in &s.density {
                numeric.entry(k.clone()).or_insert_with(|| vec![f64::NAN; segments.len()])[i] = v;
            }
        }
        Self {
            n: segments.len(),
            numeric,
            factor: BTreeMap::new(),
        }
    }

    pub fn from_grid(cells: &[PredictionCell]) -> Self {
        let mut numeric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, c) in cells.iter().enumerate() {
            for (k, &v) in &c.density {
                numeric.entry(k.clone()).or_insert_with(|| vec![f64::NAN; cells.len()])[i] = v;
            }
        }
        Self {
            n: cells.len(),
            numeric,
            factor: BTreeMap::new(),
        }
    }

    pub fn with_factor(mut self, name: &str, values: Vec<String>) -> Self {
        assert_eq!(values.len(), self.n, "factor column length mismatch");
        self.factor.insert(name.to_string(), values);
        self
    }

    pub fn num(&self, name: &str) -> Result<&[f64]> {
        let col = self
            .numeric
            .get(name)
            .ok_or_else(|| DsmError::invalid(format!("covariate '{name}' not available")))?;
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(DsmError::invalid(format!("covariate '{name}' missing or non-finite at row {}", i + 1)));
        }
        Ok(col)
    }

    pub fn fac(&self, name: &str) -> Result<&[String]> {
        self.factor
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| DsmError::invalid(format!("factor '{name}' not available")))
    }

    /// Repeats every row `times` times, block by block (all rows for copy 0, then copy 1, ...).
    pub fn replicate(&self, times: usize) -> Self {
        let rep_num = |v: &Vec<f64>| (0..times).flat_map(|_| v.iter().copied()).collect();
        let rep_fac = |v: &Vec<String>| (0..times).flat_map(|_| v.iter().cloned()).collect();
        Self {
            n: self.n * times,
            numeric: self.numeric.iter().map(|(k, v)| (k.clone(), rep_num(v))).collect(),
            factor: self.factor.iter().map(|(k, v)| (k.clone(), rep_fac(v))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermBasis {
    Univariate {
        cov: String,
        basis: BSplineBasis,
    },
    Tensor {
        cov_x: String,
        cov_y: String,
        bx: BSplineBasis,
        by: BSplineBasis,
    },
}

impl TermBasis {
    fn build(spec: &SmoothSpec, frame: &Frame) -> Result<Self> {
        let dims = spec.dims()?;
        if spec.covariates.len() == 1 {
            let cov = &spec.covariates[0];
            Ok(TermBasis::Univariate {
                cov: cov.clone(),
                basis: BSplineBasis::from_values(frame.num(cov)?, dims[0])?,
            })
        } else {
            let (cx, cy) = (&spec.covariates[0], &spec.covariates[1]);
            Ok(TermBasis::Tensor {
                cov_x: cx.clone(),
                cov_y: cy.clone(),
                bx: BSplineBasis::from_values(frame.num(cx)?, dims[0])?,
                by: BSplineBasis::from_values(frame.num(cy)?, dims[1])?,
            })
        }
    }

    fn marginal(&self, i: usize) -> &BSplineBasis {
        match (self, i) {
            (TermBasis::Univariate { basis, .. }, _) => basis,
            (TermBasis::Tensor { bx, .. }, 0) => bx,
            (TermBasis::Tensor { by, .. }, _) => by,
        }
    }

    pub fn raw_dim(&self) -> usize {
        match self {
            TermBasis::Univariate { basis, .. } => basis.dim(),
            TermBasis::Tensor { bx, by, .. } => bx.dim() * by.dim(),
        }
    }

    fn columns(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        match self {
            TermBasis::Univariate { cov, basis } => Ok(basis.design(frame.num(cov)?)),
            TermBasis::Tensor { cov_x, cov_y, bx, by } => {
                Ok(row_kronecker(&bx.design(frame.num(cov_x)?), &by.design(frame.num(cov_y)?)))
            }
        }
    }

    fn raw_penalties(&self) -> Vec<DMatrix<f64>> {
        match self {
            TermBasis::Univariate { basis, .. } => vec![basis.penalty()],
            TermBasis::Tensor { bx, by, .. } => {
                let ix = DMatrix::<f64>::identity(bx.dim(), bx.dim());
                let iy = DMatrix::<f64>::identity(by.dim(), by.dim());
                vec![kronecker(&bx.penalty(), &iy), kronecker(&ix, &by.penalty())]
            }
        }
    }

    fn covariates(&self) -> Vec<&str> {
        match self {
            TermBasis::Univariate { cov, .. } => vec![cov],
            TermBasis::Tensor { cov_x, cov_y, .. } => vec![cov_x, cov_y],
        }
    }

    /// Rows whose covariates fall outside the training range.
    fn extrapolated_rows(&self, frame: &Frame) -> Result<usize> {
        let mut n = 0;
        for (i, cov) in self.covariates().into_iter().enumerate() {
            let (lo, hi) = self.marginal(i).range();
            n += frame.num(cov)?.iter().filter(|&&v| v < lo || v > hi).count();
        }
        Ok(n)
    }
}

/// Fitted construction of a model term, reusable for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PreparedTerm {
    Smooth {
        name: String,
        basis: TermBasis,
        constraint: DMatrix<f64>,
    },
    FactorSmooth {
        name: String,
        basis: TermBasis,
        constraint: DMatrix<f64>,
        factor: String,
        levels: Vec<String>,
    },
    /// Unpenalized reference-coded factor main effect.
    Factor { name: String, levels: Vec<String> },
}

impl PreparedTerm {
    pub fn name(&self) -> &str {
        match self {
            PreparedTerm::Smooth { name, .. }
            | PreparedTerm::FactorSmooth { name, .. }
            | PreparedTerm::Factor { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            PreparedTerm::Smooth { constraint, .. } => constraint.ncols(),
            PreparedTerm::FactorSmooth { constraint, levels, .. } => constraint.ncols() * levels.len(),
            PreparedTerm::Factor { levels, .. } => levels.len() - 1,
        }
    }

    pub fn columns(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        match self {
            PreparedTerm::Smooth { basis, constraint, .. } => Ok(basis.columns(frame)? * constraint),
            PreparedTerm::FactorSmooth {
                basis,
                constraint,
                factor,
                levels,
                ..
            } => {
                let base = basis.columns(frame)? * constraint;
                let labels = frame.fac(factor)?;
                let kc = constraint.ncols();
                let mut m = DMatrix::zeros(frame.n, kc * levels.len());
                m.columns_mut(0, kc).copy_from(&base);
                for (i, lab) in labels.iter().enumerate() {
                    let li = levels.iter().position(|l| l == lab).ok_or_else(|| {
                        DsmError::invalid(format!("level '{lab}' of '{factor}' unknown to the model"))
                    })?;
                    if li > 0 {
                        for c in 0..kc {
                            m[(i, li * kc + c)] = base[(i, c)];
                        }
                    }
                }
                Ok(m)
            }
            PreparedTerm::Factor { name, levels } => {
                let labels = frame.fac(name)?;
                let mut m = DMatrix::zeros(frame.n, levels.len() - 1);
                for (i, lab) in labels.iter().enumerate() {
                    let li = levels.iter().position(|l| l == lab).ok_or_else(|| {
                        DsmError::invalid(format!("level '{lab}' of '{name}' unknown to the model"))
                    })?;
                    if li > 0 {
                        m[(i, li - 1)] = 1.0;
                    }
                }
                Ok(m)
            }
        }
    }

    pub fn extrapolated_rows(&self, frame: &Frame) -> Result<usize> {
        match self {
            PreparedTerm::Smooth { basis, .. } | PreparedTerm::FactorSmooth { basis, .. } => {
                basis.extrapolated_rows(frame)
            }
            PreparedTerm::Factor { .. } => Ok(0),
        }
    }
}

/// How a penalty's smoothing parameter is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    /// Estimated by REML.
    Free,
    /// Tied to the scale parameter so that the prior precision stays fixed.
    ScaleTied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub name: String,
    pub start: usize,
    pub block: DMatrix<f64>,
    pub rank: usize,
    pub rule: LambdaRule,
}

impl Penalty {
    pub fn new(name: &str, start: usize, block: DMatrix<f64>, rule: LambdaRule) -> Self {
        let rank = linalg::numerical_rank(&block, 1e-9);
        Self {
            name: name.to_string(),
            start,
            block,
            rank,
            rule,
        }
    }

    pub fn width(&self) -> usize {
        self.block.nrows()
    }

    pub fn embed(&self, p: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(p, p);
        m.view_mut((self.start, self.start), (self.width(), self.width()))
            .copy_from(&self.block);
        m
    }

    pub fn quad_form(&self, beta: &DVector<f64>) -> f64 {
        let b = beta.rows(self.start, self.width()).into_owned();
        b.dot(&(&self.block * &b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermInfo {
    pub name: String,
    pub start: usize,
    pub width: usize,
    pub penalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignBundle {
    pub x: DMatrix<f64>,
    pub penalties: Vec<Penalty>,
    pub terms: Vec<TermInfo>,
    pub prepared: Vec<PreparedTerm>,
    /// Extra trailing columns that do not enter prediction (e.g. the detection random effect).
    pub extra_columns: usize,
}

impl DesignBundle {
    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    /// Number of coefficients that enter prediction.
    pub fn n_predictive(&self) -> usize {
        self.x.ncols() - self.extra_columns
    }

    pub fn free_penalties(&self) -> usize {
        self.penalties.iter().filter(|p| p.rule == LambdaRule::Free).count()
    }

    /// Prediction matrix at new covariates, reusing knots and constraints, zero-padded over
    /// any extra columns. Returns the matrix and the number of rows needing extrapolation.
    pub fn predict_matrix(&self, frame: &Frame) -> Result<(DMatrix<f64>, usize)> {
        let mut m = DMatrix::zeros(frame.n, self.ncols());
        m.column_mut(0).fill(1.0);
        let mut col = 1;
        let mut extrap = 0;
        for t in &self.prepared {
            let c = t.columns(frame)?;
            m.view_mut((0, col), (frame.n, c.ncols())).copy_from(&c);
            col += c.ncols();
            extrap += t.extrapolated_rows(frame)?;
        }
        Ok((m, extrap))
    }
}

/// Assembles intercept + parametric factors + smooth terms (in that order).
pub fn build_design(smooths: &[SmoothSpec], factors: &[(String, Vec<String>)], frame: &Frame) -> Result<DesignBundle> {
    let mut prepared = Vec::new();
    for (name, levels) in factors {
        if levels.len() >= 2 {
            prepared.push(PreparedTerm::Factor {
                name: name.clone(),
                levels: levels.clone(),
            });
        }
    }
    let mut pending_pens: Vec<(usize, String, Vec<DMatrix<f64>>)> = Vec::new();
    for spec in smooths {
        let basis = TermBasis::build(spec, frame)?;
        let raw = basis.columns(frame)?;
        let raw_pens = basis.raw_penalties();
        let (_, z, cpens) = apply_constraints(&raw, &raw_pens)?;
        match spec.kind {
            SmoothKind::FactorSmooth => {
                let factor = spec
                    .factor
                    .clone()
                    .ok_or_else(|| DsmError::invalid(format!("factor-smooth '{}' needs a factor", spec.name)))?;
                let labels = frame.fac(&factor)?;
                let mut levels: Vec<String> = factors
                    .iter()
                    .find(|(n, _)| *n == factor)
                    .map(|(_, l)| l.clone())
                    .unwrap_or_else(|| {
                        let mut l: Vec<String> = labels.to_vec();
                        l.sort();
                        l.dedup();
                        l
                    });
                levels.dedup();
                for l in &levels {
                    if !labels.iter().any(|x| x == l) {
                        return Err(DsmError::invalid(format!(
                            "factor-smooth '{}': level '{l}' has no rows",
                            spec.name
                        )));
                    }
                }
                let kc = z.ncols();
                let mut pens: Vec<DMatrix<f64>> = cpens
                    .iter()
                    .map(|s| {
                        let mut m = DMatrix::zeros(kc * levels.len(), kc * levels.len());
                        m.view_mut((0, 0), (kc, kc)).copy_from(s);
                        m
                    })
                    .collect();
                if levels.len() > 1 {
                    let total: DMatrix<f64> = cpens.iter().fold(DMatrix::zeros(kc, kc), |a, s| a + s);
                    let dev = null_space_ridge(&total);
                    let mut m = DMatrix::zeros(kc * levels.len(), kc * levels.len());
                    for l in 1..levels.len() {
                        m.view_mut((l * kc, l * kc), (kc, kc)).copy_from(&dev);
                    }
                    pens.push(m);
                }
                pending_pens.push((prepared.len(), spec.name.clone(), pens));
                prepared.push(PreparedTerm::FactorSmooth {
                    name: spec.name.clone(),
                    basis,
                    constraint: z,
                    factor,
                    levels,
                });
            }
            _ => {
                pending_pens.push((prepared.len(), spec.name.clone(), cpens));
                prepared.push(PreparedTerm::Smooth {
                    name: spec.name.clone(),
                    basis,
                    constraint: z,
                });
            }
        }
    }

    let p = 1 + prepared.iter().map(PreparedTerm::width).sum::<usize>();
    let mut x = DMatrix::zeros(frame.n, p);
    x.column_mut(0).fill(1.0);
    let mut terms = vec![TermInfo {
        name: "(Intercept)".into(),
        start: 0,
        width: 1,
        penalized: false,
    }];
    let mut starts = Vec::new();
    let mut col = 1;
    for t in &prepared {
        let c = t.columns(frame)?;
        x.view_mut((0, col), (frame.n, c.ncols())).copy_from(&c);
        starts.push(col);
        terms.push(TermInfo {
            name: t.name().to_string(),
            start: col,
            width: c.ncols(),
            penalized: !matches!(t, PreparedTerm::Factor { .. }),
        });
        col += c.ncols();
    }
    let mut penalties = Vec::new();
    for (ti, name, pens) in pending_pens {
        let n = pens.len();
        for (k, s) in pens.into_iter().enumerate() {
            let label = if n == 1 {
                name.clone()
            } else if matches!(prepared[ti], PreparedTerm::FactorSmooth { .. }) && k == n - 1 {
                format!("{name}:deviation")
            } else {
                format!("{name}:{}", k + 1)
            };
            penalties.push(Penalty::new(&label, starts[ti], s, LambdaRule::Free));
        }
    }
    Ok(DesignBundle {
        x,
        penalties,
        terms,
        prepared,
        extra_columns: 0,
    })
}
