//! Discrete CRPS over a quantile grid, plus point-error metrics on the median.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconcile::ForecastEnsemble;

/// Strictly increasing quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid(Vec<f64>);

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("quantile grid is empty".into()));
        }
        if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Config("quantile levels must lie in (0, 1)".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("quantile levels must be strictly increasing".into()));
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }
}

impl Default for QuantileGrid {
    /// 0.05, 0.10, …, 0.95.
    fn default() -> Self {
        Self((1..=19).map(|k| k as f64 / 20.0).collect())
    }
}

/// Type-7 quantile: linear interpolation between the closest order statistics.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Data("quantile of an empty sample".into()));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// `QS_q = 2 (1{y ≤ pred} − q)(pred − y)`.
pub fn quantile_score(pred: f64, y: f64, q: f64) -> f64 {
    let ind = if y <= pred { 1.0 } else { 0.0 };
    2.0 * (ind - q) * (pred - y)
}

/// Mean quantile score over the grid for one sample set and actual.
pub fn crps_samples(samples: &[f64], y: f64, grid: &QuantileGrid) -> Result<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for &q in grid.levels() {
        total += quantile_score(quantile_sorted(&sorted, q)?, y, q);
    }
    Ok(total / grid.levels().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesScore {
    pub series_id: String,
    pub level: usize,
    /// Mean over steps of the per-step CRPS, in series units.
    pub crps: f64,
    /// Sum of per-step CRPS divided by the sum of |actual|; `None` when all actuals are zero.
    pub crps_normalized: Option<f64>,
    pub mae: f64,
    /// Mean |error| / |actual| over steps with a non-zero actual.
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScore {
    pub level: usize,
    pub series: usize,
    pub crps: f64,
    pub crps_normalized: Option<f64>,
    pub mae: f64,
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Mean of the per-series absolute CRPS.
    pub crps: f64,
    /// Mean of the per-series normalized CRPS (series with all-zero actuals excluded).
    pub crps_normalized: Option<f64>,
    pub mae: f64,
    pub mape: Option<f64>,
    pub normalization: String,
    pub quantiles: Vec<f64>,
    pub sample_count: usize,
    pub horizon: usize,
    pub per_level: Vec<LevelScore>,
    pub per_series: Vec<SeriesScore>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores an ensemble against `horizon × n` actuals in node order.
pub fn crps(ensemble: &ForecastEnsemble, actuals: &[Vec<f64>], grid: &QuantileGrid) -> Result<ScoreReport> {
    let tree = &ensemble.hierarchy;
    let (horizon, n) = (ensemble.horizon(), tree.n());
    if actuals.len() != horizon {
        return Err(Error::dim("actuals horizon", horizon, actuals.len()));
    }
    if let Some(row) = actuals.iter().find(|r| r.len() != n) {
        return Err(Error::dim("actuals width", n, row.len()));
    }
    if ensemble.paths.width != n {
        return Err(Error::dim("ensemble width", n, ensemble.paths.width));
    }
    if ensemble.samples() == 0 {
        return Err(Error::Data("ensemble has no samples".into()));
    }

    let per_series: Vec<SeriesScore> = (0..n)
        .map(|i| {
            let mut crps_sum = 0.0;
            let mut abs_sum = 0.0;
            let mut err_sum = 0.0;
            let mut ape = Vec::new();
            for (t, row) in actuals.iter().enumerate() {
                let samples = ensemble.paths.column(t, i);
                let y = row[i];
                crps_sum += crps_samples(&samples, y, grid)?;
                abs_sum += y.abs();
                let err = (empirical_quantile(&samples, 0.5)? - y).abs();
                err_sum += err;
                if y != 0.0 {
                    ape.push(err / y.abs());
                }
            }
            let h = horizon as f64;
            Ok(SeriesScore {
                series_id: tree.id(i).to_string(),
                level: tree.depth(i),
                crps: crps_sum / h,
                crps_normalized: (abs_sum > 0.0).then(|| crps_sum / abs_sum),
                mae: err_sum / h,
                mape: (!ape.is_empty()).then(|| ape.iter().sum::<f64>() / ape.len() as f64),
            })
        })
        .collect::<Result<_>>()?;

    let per_level = (0..tree.levels())
        .map(|level| {
            let members: Vec<&SeriesScore> = per_series.iter().filter(|s| s.level == level).collect();
            LevelScore {
                level,
                series: members.len(),
                crps: mean(members.iter().map(|s| s.crps)),
                crps_normalized: mean_opt(members.iter().map(|s| s.crps_normalized)),
                mae: mean(members.iter().map(|s| s.mae)),
                mape: mean_opt(members.iter().map(|s| s.mape)),
            }
        })
        .collect();

    Ok(ScoreReport {
        crps: mean(per_series.iter().map(|s| s.crps)),
        crps_normalized: mean_opt(per_series.iter().map(|s| s.crps_normalized)),
        mae: mean(per_series.iter().map(|s| s.mae)),
        mape: mean_opt(per_series.iter().map(|s| s.mape)),
        normalization: "crps: mean over steps of the grid-averaged quantile score, in series units; \
                        crps_normalized: per-series sum of CRPS over steps divided by sum of |actual|; \
                        overall and per-level values are means of per-series values"
            .into(),
        quantiles: grid.levels().to_vec(),
        sample_count: ensemble.samples(),
        horizon,
        per_level,
        per_series,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl ScoreReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV `level,series_id,crps,mae,mape` (absolute CRPS). Level rows use
    /// series id `*`, the overall row uses level `all`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "series_id", "crps", "mae", "mape"])?;
        for s in &self.per_series {
            w.write_record([
                s.level.to_string(),
                s.series_id.clone(),
                s.crps.to_string(),
                s.mae.to_string(),
                fmt_opt(s.mape),
            ])?;
        }
        for l in &self.per_level {
            w.write_record([
                l.level.to_string(),
                "*".into(),
                l.crps.to_string(),
                l.mae.to_string(),
                fmt_opt(l.mape),
            ])?;
        }
        w.write_record([
            "all".into(),
            "*".into(),
            self.crps.to_string(),
            self.mae.to_string(),
            fmt_opt(self.mape),
        ])?;
        w.flush()?;
        Ok(())
    }
}
