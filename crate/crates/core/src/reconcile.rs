//! Coherent forecasts from base forecasts or bottom-level samples.
//!
//! The flow pipeline reconciles by sampling bottom-level vectors and summing
//! them through `S`. The closed-form baselines all have the shape
//! `ỹ = S P ŷ` (MinT, OLS, bottom-up) or `ỹ = M ŷ` (fixed orthogonal
//! projection onto the coherent subspace).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::HierarchyTree;

/// A `count × horizon × width` array of sample paths, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePaths {
    pub count: usize,
    pub horizon: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SamplePaths {
    pub fn zeros(count: usize, horizon: usize, width: usize) -> Self {
        Self {
            count,
            horizon,
            width,
            data: vec![0.0; count * horizon * width],
        }
    }

    pub fn get(&self, sample: usize, step: usize) -> &[f64] {
        let o = (sample * self.horizon + step) * self.width;
        &self.data[o..o + self.width]
    }

    pub fn get_mut(&mut self, sample: usize, step: usize) -> &mut [f64] {
        let o = (sample * self.horizon + step) * self.width;
        &mut self.data[o..o + self.width]
    }

    /// Values of one coordinate across samples at a step.
    pub fn column(&self, step: usize, k: usize) -> Vec<f64> {
        (0..self.count).map(|s| self.get(s, step)[k]).collect()
    }
}

/// Coherent sample paths over all `n` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    pub paths: SamplePaths,
    pub hierarchy: Arc<HierarchyTree>,
    /// Timestamp labels of the forecast steps.
    pub timestamps: Vec<String>,
}

impl ForecastEnsemble {
    pub fn samples(&self) -> usize {
        self.paths.count
    }

    pub fn horizon(&self) -> usize {
        self.paths.horizon
    }

    /// Largest per-step coherency error over every path.
    pub fn max_coherency_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..self.paths.count {
            for t in 0..self.paths.horizon {
                worst = worst.max(self.hierarchy.coherency_error(self.paths.get(s, t)).unwrap());
            }
        }
        worst
    }

    /// Per-step, per-node median over samples (`horizon × n`).
    pub fn median(&self) -> Vec<Vec<f64>> {
        (0..self.horizon())
            .map(|t| {
                (0..self.paths.width)
                    .map(|k| crate::metrics::empirical_quantile(&self.paths.column(t, k), 0.5).unwrap())
                    .collect()
            })
            .collect()
    }
}

/// Maps every bottom-level sample through `S`.
pub fn bottom_up(
    bottom: &SamplePaths,
    hierarchy: Arc<HierarchyTree>,
    timestamps: Vec<String>,
) -> Result<ForecastEnsemble> {
    if bottom.width != hierarchy.m() {
        return Err(Error::dim("bottom_up samples", hierarchy.m(), bottom.width));
    }
    if timestamps.len() != bottom.horizon {
        return Err(Error::dim("bottom_up timestamps", bottom.horizon, timestamps.len()));
    }
    let mut out = SamplePaths::zeros(bottom.count, bottom.horizon, hierarchy.n());
    for s in 0..bottom.count {
        for t in 0..bottom.horizon {
            let y = hierarchy.aggregate(bottom.get(s, t))?;
            out.get_mut(s, t).copy_from_slice(&y);
        }
    }
    Ok(ForecastEnsemble {
        paths: out,
        hierarchy,
        timestamps,
    })
}

/// `m × n` map from base forecasts to bottom-level forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix(pub DMatrix<f64>);

impl ProjectionMatrix {
    /// `P = [0 | I_m]`: keep the bottom-level base forecasts.
    pub fn bottom_up(tree: &HierarchyTree) -> Self {
        let mut p = DMatrix::zeros(tree.m(), tree.n());
        for j in 0..tree.m() {
            p[(j, tree.r() + j)] = 1.0;
        }
        Self(p)
    }

    /// `S P ŷ`.
    pub fn reconcile(&self, s: &DMatrix<f64>, base: &[f64]) -> Result<Vec<f64>> {
        if base.len() != self.0.ncols() {
            return Err(Error::dim("reconcile base forecast", self.0.ncols(), base.len()));
        }
        let b = &self.0 * DVector::from_column_slice(base);
        Ok((s * b).iter().copied().collect())
    }
}

fn cholesky_or_report(w: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = w.nrows();
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (w[(i, j)] - w[(j, i)]).abs())
        .fold(0.0, f64::max);
    let scale = w.amax().max(1.0);
    if asym > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric (max asymmetry {asym:e})")));
    }
    if let Some(c) = w.clone().cholesky() {
        return Ok(c);
    }
    // name the first failing pivot and the smallest eigenvalue
    let mut pivot = n;
    for k in 1..=n {
        if w.view((0, 0), (k, k)).into_owned().cholesky().is_none() {
            pivot = k - 1;
            break;
        }
    }
    let min_eig = w.clone().symmetric_eigenvalues().min();
    Err(Error::NotPositiveDefinite(format!(
        "{what}: Cholesky fails at pivot {pivot}, smallest eigenvalue {min_eig:e}"
    )))
}

/// Solves `G X = B` for symmetric `G`, Cholesky first, column-pivoted QR as fallback.
fn solve_spd(g: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(c) = g.clone().cholesky() {
        return Ok(c.solve(b));
    }
    let qr = g.clone().col_piv_qr();
    qr.solve(b)
        .ok_or_else(|| Error::Singular(format!("{what} is singular")))
}

/// MinT projection `P = (Sᵀ W⁻¹ S)⁻¹ Sᵀ W⁻¹` for an SPD covariance `W`.
pub fn mint_projection(s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<ProjectionMatrix> {
    let n = s.nrows();
    if w.shape() != (n, n) {
        return Err(Error::dim("MinT covariance", format!("{n}x{n}"), format!("{}x{}", w.nrows(), w.ncols())));
    }
    let chol = cholesky_or_report(w, "MinT covariance W")?;
    let winv_s = chol.solve(s); // n × m
    let g = s.transpose() * &winv_s; // m × m
    let rhs = winv_s.transpose(); // m × n, equals Sᵀ W⁻¹ by symmetry
    let p = solve_spd(&g, &rhs, "Sᵀ W⁻¹ S")?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MinT projection".into()));
    }
    Ok(ProjectionMatrix(p))
}

/// Covariance estimator for MinT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MintMode {
    /// Identity weights (ordinary least squares).
    Ols,
    /// Shrinkage of the sample covariance towards its diagonal.
    Shr,
}

/// Shrinkage covariance with its intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageEstimate {
    pub covariance: DMatrix<f64>,
    pub lambda: f64,
    pub jitter: f64,
}

/// `W` for MinT from `T × n` one-step in-sample residuals.
pub fn mint_weights(residuals: &DMatrix<f64>, mode: MintMode) -> Result<DMatrix<f64>> {
    if residuals.nrows() < 2 {
        return Err(Error::Data(format!(
            "MinT needs at least 2 residual rows, got {}",
            residuals.nrows()
        )));
    }
    match mode {
        MintMode::Ols => Ok(DMatrix::identity(residuals.ncols(), residuals.ncols())),
        MintMode::Shr => Ok(shrinkage_covariance(residuals)?.covariance),
    }
}

/// Diagonal-target shrinkage estimate (Schäfer–Strimmer intensity on the
/// uncentred second-moment matrix, as used for MinT-shr).
pub fn shrinkage_covariance(x: &DMatrix<f64>) -> Result<ShrinkageEstimate> {
    let (t, n) = x.shape();
    if t < 2 {
        return Err(Error::Data(format!("shrinkage needs at least 2 rows, got {t}")));
    }
    let tf = t as f64;
    let cov = x.transpose() * x / tf;
    let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    let mut xs = x.clone();
    for j in 0..n {
        let inv = if sd[j] > 0.0 { 1.0 / sd[j] } else { 0.0 };
        xs.column_mut(j).iter_mut().for_each(|v| *v *= inv);
    }
    let corr = xs.transpose() * &xs / tf;
    let xs2 = xs.map(|v| v * v);
    let mut num = 0.0;
    let mut den = 0.0;
    let cross2 = xs2.transpose() * &xs2;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = (cross2[(i, j)] - (tf * corr[(i, j)]).powi(2) / tf) / (tf * (tf - 1.0));
            num += v;
            den += corr[(i, j)].powi(2);
        }
    }
    let lambda = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 1.0 };
    let mut w = cov.clone() * (1.0 - lambda);
    for i in 0..n {
        w[(i, i)] = cov[(i, i)];
    }
    let mut jitter = 0.0;
    if w.clone().cholesky().is_none() {
        jitter = 1e-8 * w.trace().max(f64::MIN_POSITIVE) / n as f64;
        if jitter == 0.0 || !jitter.is_finite() {
            jitter = 1e-8;
        }
        for i in 0..n {
            w[(i, i)] += jitter;
        }
    }
    Ok(ShrinkageEstimate {
        covariance: w,
        lambda,
        jitter,
    })
}

/// Fixed orthogonal projection onto the coherent subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct HierE2EProjection(pub DMatrix<f64>);

impl HierE2EProjection {
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.0.ncols() {
            return Err(Error::dim("projection input", self.0.ncols(), y.len()));
        }
        Ok((&self.0 * DVector::from_column_slice(y)).iter().copied().collect())
    }
}

/// `M = I − Aᵀ (A Aᵀ)⁻¹ A`.
pub fn hier_e2e_projection(a: &DMatrix<f64>) -> Result<HierE2EProjection> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Ok(HierE2EProjection(DMatrix::identity(n, n)));
    }
    let aat = a * a.transpose();
    let singular = || Error::Singular("A Aᵀ (structure matrix lacks full row rank)".into());
    let scale = aat.diagonal().amax().sqrt();
    let chol = aat.cholesky().ok_or_else(singular)?;
    // rounding leaves pivots of order sqrt(eps) * scale on rank-deficient input
    if chol.l_dirty().diagonal().iter().any(|&d| !(d > 1e-6 * scale)) {
        return Err(singular());
    }
    let m = DMatrix::identity(n, n) - a.transpose() * chol.solve(a);
    Ok(HierE2EProjection(m))
}

/// Bottom-up aggregation of `horizon × m` point forecasts to `horizon × n`.
pub fn naive_bu(bottom: &[Vec<f64>], tree: &HierarchyTree) -> Result<Vec<Vec<f64>>> {
    bottom.iter().map(|b| tree.aggregate(b)).collect()
}

/// Repeats the last `period` observed values of each column.
pub fn seasonal_naive(history: &[Vec<f64>], period: usize, horizon: usize) -> Result<Vec<Vec<f64>>> {
    if period == 0 || history.len() < period {
        return Err(Error::Data(format!(
            "seasonal naive needs period >= 1 and at least {period} observations, got {}",
            history.len()
        )));
    }
    let t = history.len();
    Ok((0..horizon).map(|h| history[t - period + h % period].clone()).collect())
}

/// Column means repeated over the horizon.
pub fn mean_forecast(history: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
    let Some(first) = history.first() else {
        return Err(Error::Data("mean forecast needs at least one observation".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for row in history {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / history.len() as f64;
        }
    }
    Ok(vec![mean; horizon])
}

/// One-step in-sample seasonal-naive residuals `y_t − y_{t−period}` (`(T − period) × n`).
pub fn seasonal_naive_residuals(values: &DMatrix<f64>, period: usize) -> Result<DMatrix<f64>> {
    let t = values.nrows();
    if period == 0 || t <= period {
        return Err(Error::Data(format!("need more than {period} rows for residuals, got {t}")));
    }
    Ok(values.rows(period, t - period) - values.rows(0, t - period))
}

/// Closed-form reconcilers offered by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    NaiveBu,
    MintOls,
    MintShr,
    HierE2eProj,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive-bu" => Ok(Self::NaiveBu),
            "mint-ols" => Ok(Self::MintOls),
            "mint-shr" => Ok(Self::MintShr),
            "hier-e2e-proj" => Ok(Self::HierE2eProj),
            other => Err(Error::Config(format!("unknown reconciler '{other}'"))),
        }
    }
}

/// A ready-to-apply linear reconciler.
#[derive(Debug, Clone)]
pub enum LinearReconciler {
    Projection { s: DMatrix<f64>, p: ProjectionMatrix },
    Orthogonal(HierE2EProjection),
}

impl LinearReconciler {
    /// Builds the reconciler; `residuals` are required for `mint-shr` only.
    pub fn new(method: Baseline, tree: &HierarchyTree, residuals: Option<&DMatrix<f64>>) -> Result<Self> {
        let s = tree.aggregation_matrix();
        Ok(match method {
            Baseline::NaiveBu => Self::Projection {
                p: ProjectionMatrix::bottom_up(tree),
                s,
            },
            Baseline::MintOls => {
                let w = DMatrix::identity(tree.n(), tree.n());
                Self::Projection {
                    p: mint_projection(&s, &w)?,
                    s,
                }
            }
            Baseline::MintShr => {
                let r = residuals.ok_or_else(|| Error::Data("mint-shr needs in-sample residuals".into()))?;
                if r.ncols() != tree.n() {
                    return Err(Error::dim("residual columns", tree.n(), r.ncols()));
                }
                let w = mint_weights(r, MintMode::Shr)?;
                Self::Projection {
                    p: mint_projection(&s, &w)?,
                    s,
                }
            }
            Baseline::HierE2eProj => Self::Orthogonal(hier_e2e_projection(&tree.structure_matrix())?),
        })
    }

    pub fn apply(&self, base: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Projection { s, p } => p.reconcile(s, base),
            Self::Orthogonal(m) => m.apply(base),
        }
    }

    /// Reconciles every path of an `n`-wide set of base sample paths.
    pub fn apply_paths(
        &self,
        base: &SamplePaths,
        hierarchy: Arc<HierarchyTree>,
        timestamps: Vec<String>,
    ) -> Result<ForecastEnsemble> {
        if base.width != hierarchy.n() {
            return Err(Error::dim("base forecast width", hierarchy.n(), base.width));
        }
        let mut out = SamplePaths::zeros(base.count, base.horizon, base.width);
        for s in 0..base.count {
            for t in 0..base.horizon {
                let y = self.apply(base.get(s, t))?;
                out.get_mut(s, t).copy_from_slice(&y);
            }
        }
        Ok(ForecastEnsemble {
            paths: out,
            hierarchy,
            timestamps,
        })
    }
}
