//! File formats, calendar covariates and the synthetic hierarchical generator.
//!
//! * hierarchy CSV: `parent,child`, one edge per line;
//! * panel CSV: `timestamp,series_id,value[,cov_1..cov_c]` in long format;
//! * ensemble CSV: `sample_id,step,node_id,value`.
//!
//! Timestamps are either integers or `YYYY-MM-DD` dates.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyTree, PanelSeries};
use crate::reconcile::{ForecastEnsemble, SamplePaths};

pub fn read_hierarchy<R: Read>(input: R) -> Result<HierarchyTree> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "parent" || &headers[1] != "child" {
        return Err(Error::Data(format!(
            "hierarchy header must be 'parent,child', got '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        edges.push((rec[0].to_string(), rec[1].to_string()));
    }
    HierarchyTree::from_edges(&edges)
}

pub fn load_hierarchy(path: &Path) -> Result<HierarchyTree> {
    read_hierarchy(File::open(path).map_err(|e| io_context(e, path))?)
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_hierarchy<W: Write>(tree: &HierarchyTree, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parent", "child"])?;
    for (p, c) in tree.edges() {
        w.write_record([p, c])?;
    }
    w.flush()?;
    Ok(())
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeFormat {
    Integer,
    Date,
}

/// Parses an integer or `YYYY-MM-DD` timestamp.
pub fn parse_timestamp(s: &str) -> Result<(i64, TimeFormat)> {
    if let Ok(v) = s.parse::<i64>() {
        return Ok((v, TimeFormat::Integer));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(((d - epoch()).num_days(), TimeFormat::Date));
    }
    Err(Error::Data(format!("unparseable timestamp '{s}'")))
}

pub fn format_timestamp(value: i64, format: TimeFormat) -> String {
    match format {
        TimeFormat::Integer => value.to_string(),
        TimeFormat::Date => (epoch() + Duration::days(value)).format("%Y-%m-%d").to_string(),
    }
}

/// Labels for the `horizon` steps that follow the panel.
pub fn future_labels(panel: &PanelSeries, horizon: usize) -> Vec<String> {
    let last = *panel.timestamps.last().expect("non-empty panel");
    let step = if panel.len() >= 2 {
        panel.timestamps[1] - panel.timestamps[0]
    } else {
        1
    };
    let format = panel
        .labels
        .last()
        .and_then(|l| parse_timestamp(l).ok())
        .map_or(TimeFormat::Integer, |(_, f)| f);
    (1..=horizon as i64)
        .map(|k| format_timestamp(last + k * step, format))
        .collect()
}

/// How covariates are obtained for a panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CovariateSource {
    /// Generated from the row index: `[index / scale, sin, cos]` with the given period.
    Calendar { period: usize, scale: f64 },
    /// Read from the panel file; future values must be supplied for forecasting.
    External,
}

/// Calendar covariates for absolute rows `start..start + len`.
pub fn calendar_covariates(start: usize, len: usize, period: usize, scale: f64) -> DMatrix<f64> {
    let p = period.max(1) as f64;
    DMatrix::from_fn(len, 3, |i, j| {
        let t = (start + i) as f64;
        match j {
            0 => t / scale,
            1 => (2.0 * PI * t / p).sin(),
            _ => (2.0 * PI * t / p).cos(),
        }
    })
}

/// A validated panel plus what was learned while loading it.
#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: PanelSeries,
    pub covariates: CovariateSource,
    /// Largest coherency violation found in the file's upper levels.
    pub max_coherency_error: f64,
}

/// Tolerance above which inconsistent upper-level values trigger a warning.
pub const COHERENCY_WARN_TOL: f64 = 1e-6;

/// Pivots a long-format panel into tree node order.
///
/// Per-series covariate columns are concatenated series-major into the
/// `T × (n·c)` covariate matrix. Without covariate columns, calendar
/// covariates with `calendar_period` are generated.
pub fn read_panel<R: Read>(tree: Arc<HierarchyTree>, input: R, calendar_period: usize) -> Result<LoadedPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "timestamp" || &headers[1] != "series_id" || &headers[2] != "value" {
        return Err(Error::Data("panel header must start with 'timestamp,series_id,value'".into()));
    }
    let c = headers.len() - 3;
    for (k, h) in headers.iter().skip(3).enumerate() {
        if h != format!("cov_{}", k + 1) {
            return Err(Error::Data(format!("expected covariate column 'cov_{}', got '{h}'", k + 1)));
        }
    }

    let n = tree.n();
    let mut rows: HashMap<i64, usize> = HashMap::new();
    let mut stamps: Vec<(i64, String)> = Vec::new();
    let mut cells: Vec<Vec<Option<(f64, Vec<f64>)>>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let ts = &rec[0];
        let (t, _) = parse_timestamp(ts)?;
        let id = &rec[1];
        let col = tree
            .index_of(id)
            .ok_or_else(|| Error::Data(format!("unknown series_id '{id}' on line {}", line + 2)))?;
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("bad {what} '{s}' at ({ts}, {id})")))
        };
        let value = parse(&rec[2], "value")?;
        let covs = (0..c).map(|k| parse(&rec[3 + k], "covariate")).collect::<Result<Vec<_>>>()?;
        let r = *rows.entry(t).or_insert_with(|| {
            stamps.push((t, ts.to_string()));
            cells.push(vec![None; n]);
            cells.len() - 1
        });
        if cells[r][col].is_some() {
            return Err(Error::Data(format!("duplicate cell ({ts}, {id})")));
        }
        cells[r][col] = Some((value, covs));
    }
    if stamps.is_empty() {
        return Err(Error::Data("panel has no rows".into()));
    }

    let mut order: Vec<usize> = (0..stamps.len()).collect();
    order.sort_by_key(|&r| stamps[r].0);
    let t_len = order.len();
    let mut values = DMatrix::zeros(t_len, n);
    let mut covariates = DMatrix::zeros(t_len, n * c);
    for (row, &r) in order.iter().enumerate() {
        for col in 0..n {
            let (v, covs) = cells[r][col].as_ref().ok_or_else(|| {
                Error::Data(format!("missing cell ({}, {})", stamps[r].1, tree.id(col)))
            })?;
            values[(row, col)] = *v;
            for (k, x) in covs.iter().enumerate() {
                covariates[(row, col * c + k)] = *x;
            }
        }
    }
    let timestamps: Vec<i64> = order.iter().map(|&r| stamps[r].0).collect();
    let labels: Vec<String> = order.iter().map(|&r| stamps[r].1.clone()).collect();

    let (covariates, source) = if c == 0 {
        let scale = t_len as f64;
        (
            calendar_covariates(0, t_len, calendar_period, scale),
            CovariateSource::Calendar {
                period: calendar_period,
                scale,
            },
        )
    } else {
        (covariates, CovariateSource::External)
    };

    let panel = PanelSeries::new(values, covariates, timestamps, labels, tree)?;
    let max_err = panel.max_coherency_error();
    if max_err > COHERENCY_WARN_TOL {
        warn!("panel upper levels disagree with bottom-level sums: max coherency error {max_err:e}");
    }
    Ok(LoadedPanel {
        panel,
        covariates: source,
        max_coherency_error: max_err,
    })
}

pub fn load_panel(hierarchy_path: &Path, panel_path: &Path, calendar_period: usize) -> Result<LoadedPanel> {
    let tree = Arc::new(load_hierarchy(hierarchy_path)?);
    read_panel(tree, File::open(panel_path).map_err(|e| io_context(e, panel_path))?, calendar_period)
}

/// Writes values (and external covariates, if `with_covariates`) in long format.
pub fn write_panel<W: Write>(panel: &PanelSeries, with_covariates: bool, out: W) -> Result<()> {
    let tree = &panel.hierarchy;
    let c = if with_covariates { panel.n_covariates() / tree.n() } else { 0 };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string(), "series_id".into(), "value".into()];
    header.extend((1..=c).map(|k| format!("cov_{k}")));
    w.write_record(&header)?;
    for t in 0..panel.len() {
        for i in 0..tree.n() {
            let mut rec = vec![panel.labels[t].clone(), tree.id(i).to_string(), panel.values[(t, i)].to_string()];
            rec.extend((0..c).map(|k| panel.covariates[(t, i * c + k)].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ensemble<W: Write>(ensemble: &ForecastEnsemble, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(out));
    w.write_record(["sample_id", "step", "node_id", "value"])?;
    let tree = &ensemble.hierarchy;
    for s in 0..ensemble.samples() {
        for t in 0..ensemble.horizon() {
            for (i, v) in ensemble.paths.get(s, t).iter().enumerate() {
                w.write_record([s.to_string(), (t + 1).to_string(), tree.id(i).to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `sample_id,step,node_id,value` rows (steps are 1-based) into an
/// `n`-wide set of paths. Every (sample, step, node) cell must be present.
pub fn read_sample_paths<R: Read>(tree: &HierarchyTree, input: R) -> Result<SamplePaths> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["sample_id", "step", "node_id", "value"] {
        return Err(Error::Data("ensemble header must be 'sample_id,step,node_id,value'".into()));
    }
    let mut cells = Vec::new();
    let (mut count, mut horizon) = (0usize, 0usize);
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Data(format!("bad {what} in ensemble row {:?}", rec.iter().collect::<Vec<_>>()));
        let s: usize = rec[0].parse().map_err(|_| bad("sample_id"))?;
        let t: usize = rec[1].parse().map_err(|_| bad("step"))?;
        if t == 0 {
            return Err(bad("step"));
        }
        let i = tree
            .index_of(&rec[2])
            .ok_or_else(|| Error::Data(format!("unknown node_id '{}'", &rec[2])))?;
        let v: f64 = rec[3].parse().map_err(|_| bad("value"))?;
        count = count.max(s + 1);
        horizon = horizon.max(t);
        cells.push((s, t - 1, i, v));
    }
    let n = tree.n();
    let mut paths = SamplePaths::zeros(count, horizon, n);
    let mut seen = vec![false; count * horizon * n];
    for (s, t, i, v) in cells {
        let k = (s * horizon + t) * n + i;
        if seen[k] {
            return Err(Error::Data(format!("duplicate ensemble cell ({s}, {}, {})", t + 1, tree.id(i))));
        }
        seen[k] = true;
        paths.data[k] = v;
    }
    if let Some(k) = seen.iter().position(|&x| !x) {
        let (s, rest) = (k / (horizon * n), k % (horizon * n));
        return Err(Error::Data(format!(
            "missing ensemble cell (sample {s}, step {}, node {})",
            rest / n + 1,
            tree.id(rest % n)
        )));
    }
    Ok(paths)
}

pub fn write_matrix<W: Write>(m: &DMatrix<f64>, row_ids: &[String], col_ids: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(col_ids.iter().cloned());
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut rec = vec![row_ids[i].clone()];
        rec.extend((0..m.ncols()).map(|j| m[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Bottom-level process for synthetic panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianAr1,
    SeasonalSine,
    HeavyTailAr1,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-ar1" => Ok(Self::GaussianAr1),
            "seasonal-sine" => Ok(Self::SeasonalSine),
            "heavy-tail-ar1" => Ok(Self::HeavyTailAr1),
            _ => Err(Error::Config(format!("unknown synthetic family '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub depth: usize,
    pub branching: usize,
    pub length: usize,
    pub family: Family,
    pub noise: f64,
    pub seed: u64,
    /// Season length for `seasonal-sine`.
    pub period: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            depth: 2,
            branching: 2,
            length: 200,
            family: Family::GaussianAr1,
            noise: 1.0,
            seed: 0,
            period: 12,
        }
    }
}

/// Per-leaf generator parameters, echoed to the sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafProcess {
    pub id: String,
    pub level: f64,
    pub phi: f64,
    pub start: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSidecar {
    pub spec: SyntheticSpec,
    pub leaves: Vec<LeafProcess>,
    /// Degrees of freedom of the heavy-tailed innovations.
    pub student_t_dof: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub panel: PanelSeries,
    pub sidecar: SyntheticSidecar,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.branching < 1 || self.length < 16 {
            return Err(Error::Config(format!(
                "synthetic spec needs depth >= 1, branching >= 1, length >= 16 (got {}, {}, {})",
                self.depth, self.branching, self.length
            )));
        }
        if !(self.noise >= 0.0) || self.period == 0 {
            return Err(Error::Config("noise must be >= 0 and period >= 1".into()));
        }
        Ok(())
    }

    /// Balanced tree: `total` at the root, node `L{d}_{k}` the `k`-th node at depth `d`.
    pub fn tree(&self) -> Result<HierarchyTree> {
        let mut edges = Vec::new();
        let mut prev = vec!["total".to_string()];
        for d in 1..=self.depth {
            let mut cur = Vec::new();
            for p in &prev {
                for _ in 0..self.branching {
                    let id = format!("L{d}_{}", cur.len());
                    edges.push((p.clone(), id.clone()));
                    cur.push(id);
                }
            }
            prev = cur;
        }
        HierarchyTree::from_edges(&edges)
    }
}

pub const STUDENT_T_DOF: f64 = 3.0;

/// Simulates bottom series and sums them up the tree. Calendar covariates
/// use `spec.period`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let tree = Arc::new(spec.tree()?);
    let (m, r, t_len) = (tree.m(), tree.r(), spec.length);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let leaves: Vec<LeafProcess> = (0..m)
        .map(|j| {
            let level = 10.0 + rng.random_range(0.0..10.0);
            LeafProcess {
                id: tree.id(r + j).to_string(),
                level,
                phi: rng.random_range(0.6..0.9),
                start: level + rng.random_range(-5.0..5.0),
                amplitude: rng.random_range(2.0..5.0),
                phase: rng.random_range(0.0..2.0 * PI),
                noise: spec.noise,
            }
        })
        .collect();
    let student = StudentT::new(STUDENT_T_DOF).unwrap();
    // scale t(3) innovations to unit variance
    let t_scale = ((STUDENT_T_DOF - 2.0) / STUDENT_T_DOF).sqrt();

    let mut values = DMatrix::zeros(t_len, tree.n());
    for (j, leaf) in leaves.iter().enumerate() {
        let mut prev = leaf.start;
        for t in 0..t_len {
            let eps: f64 = match spec.family {
                Family::HeavyTailAr1 => student.sample(&mut rng) * t_scale,
                _ => rng.sample(StandardNormal),
            };
            let v = match spec.family {
                Family::GaussianAr1 | Family::HeavyTailAr1 => {
                    if t == 0 {
                        leaf.start
                    } else {
                        leaf.level + leaf.phi * (prev - leaf.level) + leaf.noise * eps
                    }
                }
                Family::SeasonalSine => {
                    leaf.level
                        + leaf.amplitude * (2.0 * PI * t as f64 / spec.period as f64 + leaf.phase).sin()
                        + leaf.noise * eps
                }
            };
            values[(t, r + j)] = v;
            prev = v;
        }
    }
    for t in 0..t_len {
        let bottom: Vec<f64> = (0..m).map(|j| values[(t, r + j)]).collect();
        let y = tree.aggregate(&bottom)?;
        for i in 0..r {
            values[(t, i)] = y[i];
        }
    }
    let timestamps: Vec<i64> = (0..t_len as i64).collect();
    let labels = timestamps.iter().map(|t| t.to_string()).collect();
    let covariates = calendar_covariates(0, t_len, spec.period, t_len as f64);
    let panel = PanelSeries::new(values, covariates, timestamps, labels, tree)?;
    Ok(SyntheticData {
        panel,
        sidecar: SyntheticSidecar {
            spec: spec.clone(),
            leaves,
            student_t_dof: STUDENT_T_DOF,
        },
    })
}

/// Writes `hierarchy.csv`, `panel.csv` and `synthetic.json` into `dir`.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_hierarchy(&data.panel.hierarchy, File::create(dir.join("hierarchy.csv"))?)?;
    write_panel(&data.panel, false, BufWriter::new(File::create(dir.join("panel.csv"))?))?;
    let json = serde_json::to_string_pretty(&data.sidecar)?;
    std::fs::write(dir.join("synthetic.json"), json + "\n")?;
    Ok(())
}
