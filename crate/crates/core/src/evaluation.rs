//! Error metrics, train/test splits and the baseline predictors.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{solve, InferConfig, InferError, SimilarityGraph};
use crate::network::{RoadClass, RoadNetwork, SegmentId};
use crate::seeds::rng_for;
use crate::trajectory::VolumeTensor;

/// Samples with ground truth below this are left out of MAPE.
pub const MAPE_MIN_TRUTH: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples")]
    Empty,
    #[error("prediction and truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("every sample has ground truth below {MAPE_MIN_TRUTH}")]
    AllFiltered,
    #[error("predictions miss {} test cells, first (segment, interval) = {:?}", .0.len(), .0.first())]
    Coverage(Vec<(SegmentId, usize)>),
    #[error("split needs at least {need} monitored segments, found {found}")]
    TooFewMonitored { need: usize, found: usize },
    #[error("need at least {need} training segments, found {found}")]
    TooFewTraining { need: usize, found: usize },
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Mean of `|pred − truth| / truth` over samples with `truth >= 5`.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let (sum, cnt) = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t >= MAPE_MIN_TRUTH)
        .fold((0.0, 0usize), |(s, c), (p, t)| (s + (p - t).abs() / t, c + 1));
    if cnt == 0 {
        return Err(EvalError::AllFiltered);
    }
    Ok(sum / cnt as f64)
}

/// Disjoint partition of the monitored segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub train: Vec<SegmentId>,
    pub validation: Vec<SegmentId>,
    pub test: Vec<SegmentId>,
    pub seed: u64,
}

impl EvalSplit {
    /// Shuffles the monitored set, holds out 20% for test, then 20% of the
    /// remainder for validation. Each part is returned sorted.
    pub fn new(monitored: &BTreeSet<SegmentId>, seed: u64) -> Result<Self, EvalError> {
        if monitored.len() < 3 {
            return Err(EvalError::TooFewMonitored { need: 3, found: monitored.len() });
        }
        let mut ids: Vec<SegmentId> = monitored.iter().copied().collect();
        ids.shuffle(&mut rng_for(seed, "eval/split"));
        let n_test = ((ids.len() as f64 * 0.2).round() as usize).max(1);
        let n_val = (((ids.len() - n_test) as f64 * 0.2).round() as usize).max(1);
        let mut test = ids[..n_test].to_vec();
        let mut validation = ids[n_test..n_test + n_val].to_vec();
        let mut train = ids[n_test + n_val..].to_vec();
        test.sort_unstable();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(EvalSplit { train, validation, test, seed })
    }

    /// Ground truth restricted to the training rows.
    pub fn observed(&self, truth: &VolumeTensor) -> VolumeTensor {
        truth.masked_to_rows(&self.train)
    }
}

fn per_interval_mean(truth: &VolumeTensor, rows: &[SegmentId]) -> Vec<f64> {
    (0..truth.n)
        .map(|t| rows.iter().map(|&i| truth.get(i, t)).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn prediction_from_rows(truth: &VolumeTensor, split: &EvalSplit, mut row_for: impl FnMut(SegmentId) -> Vec<f64>) -> VolumeTensor {
    let mut out = split.observed(truth);
    for i in 0..truth.m {
        if split.train.binary_search(&i).is_ok() {
            continue;
        }
        let r = row_for(i);
        for (t, v) in r.into_iter().enumerate() {
            out.set(i, t, v);
        }
    }
    out
}

/// Mean series of the `k` training segments with the nearest centroids
/// (ties broken by lower id).
pub fn baseline_spatial_knn(k: usize, split: &EvalSplit, net: &RoadNetwork, truth: &VolumeTensor) -> Result<VolumeTensor, EvalError> {
    if k == 0 || split.train.len() < k {
        return Err(EvalError::TooFewTraining { need: k.max(1), found: split.train.len() });
    }
    let centroid = |i: SegmentId| net.centroid(i).expect("segment ids come from the network");
    Ok(prediction_from_rows(truth, split, |i| {
        let (x, y) = centroid(i);
        let mut cand: Vec<(f64, SegmentId)> = split
            .train
            .iter()
            .map(|&j| {
                let (a, b) = centroid(j);
                ((a - x).powi(2) + (b - y).powi(2), j)
            })
            .collect();
        cand.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        let near: Vec<SegmentId> = cand[..k].iter().map(|c| c.1).collect();
        per_interval_mean(truth, &near)
    }))
}

/// Per-(class, interval) training mean; a class with no training segment
/// falls back to the global per-interval mean.
pub fn baseline_contextual_average(split: &EvalSplit, net: &RoadNetwork, truth: &VolumeTensor) -> Result<VolumeTensor, EvalError> {
    if split.train.is_empty() {
        return Err(EvalError::TooFewTraining { need: 1, found: 0 });
    }
    let global = per_interval_mean(truth, &split.train);
    let by_class: Vec<(RoadClass, Option<Vec<f64>>)> = RoadClass::ALL
        .iter()
        .map(|&c| {
            let rows: Vec<SegmentId> = split.train.iter().copied().filter(|&i| net.segments()[i].road_class == c).collect();
            if rows.is_empty() {
                log::warn!("no training segment of class {c}; using the global mean");
                (c, None)
            } else {
                (c, Some(per_interval_mean(truth, &rows)))
            }
        })
        .collect();
    Ok(prediction_from_rows(truth, split, |i| {
        let c = net.segments()[i].road_class;
        by_class.iter().find(|(k, _)| *k == c).and_then(|(_, v)| v.clone()).unwrap_or_else(|| global.clone())
    }))
}

/// Raw geospatial features: length, lanes, major indicator, speed limit.
pub fn geo_features(net: &RoadNetwork, i: SegmentId) -> [f64; 4] {
    let s = &net.segments()[i];
    [s.length, s.lanes as f64, f64::from(u8::from(s.road_class == RoadClass::Major)), s.speed_limit]
}

/// Column means and standard deviations over `rows` (sd 0 for constant columns).
fn standardizer(net: &RoadNetwork, rows: &[SegmentId]) -> ([f64; 4], [f64; 4]) {
    let k = rows.len() as f64;
    let mut mean = [0.0; 4];
    for &i in rows {
        for (m, f) in mean.iter_mut().zip(geo_features(net, i)) {
            *m += f / k;
        }
    }
    let mut sd = [0.0; 4];
    for &i in rows {
        for ((s, f), m) in sd.iter_mut().zip(geo_features(net, i)).zip(mean) {
            *s += (f - m).powi(2) / k;
        }
    }
    (mean, sd.map(f64::sqrt))
}

fn standardize(f: [f64; 4], mean: [f64; 4], sd: [f64; 4]) -> [f64; 4] {
    let mut z = [0.0; 4];
    for k in 0..4 {
        z[k] = if sd[k] > 1e-12 { (f[k] - mean[k]) / sd[k] } else { 0.0 };
    }
    z
}

/// Ridge damping for singular directions of the standardized design.
pub const LR_RIDGE: f64 = 1e-6;

/// Per-interval least squares on standardized geospatial features with an
/// intercept.
pub fn baseline_linear_regression(split: &EvalSplit, net: &RoadNetwork, truth: &VolumeTensor) -> Result<VolumeTensor, EvalError> {
    let p = 4;
    if split.train.len() < 2 {
        return Err(EvalError::TooFewTraining { need: 2, found: split.train.len() });
    }
    let (mean, sd) = standardizer(net, &split.train);
    let x = DMatrix::from_fn(split.train.len(), p, |r, c| standardize(geo_features(net, split.train[r]), mean, sd)[c]);
    let eig = (x.transpose() * &x).symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    // damp only the near-singular directions so well-posed fits stay exact
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&e| if e > 1e-9 * top.max(1.0) { 1.0 / e } else { 1.0 / (e.max(0.0) + LR_RIDGE) })
        .collect();
    let coef_for = |y: &DVector<f64>| -> DVector<f64> {
        let ybar = y.mean();
        let rhs = x.transpose() * y.map(|v| v - ybar);
        let proj = eig.eigenvectors.transpose() * rhs;
        let scaled = DVector::from_iterator(p, proj.iter().zip(&inv).map(|(a, b)| a * b));
        let beta = &eig.eigenvectors * scaled;
        let mut out = DVector::zeros(p + 1);
        out[0] = ybar;
        out.rows_mut(1, p).copy_from(&beta);
        out
    };
    let coefs: Vec<DVector<f64>> = (0..truth.n)
        .map(|t| coef_for(&DVector::from_iterator(split.train.len(), split.train.iter().map(|&i| truth.get(i, t)))))
        .collect();
    Ok(prediction_from_rows(truth, split, |i| {
        let z = standardize(geo_features(net, i), mean, sd);
        coefs.iter().map(|c| c[0] + (0..p).map(|k| c[k + 1] * z[k]).sum::<f64>()).collect()
    }))
}

/// `a_ij = exp(−‖f_i − f_j‖² / σ²)` on z-scored features, `σ` the median
/// pairwise distance (1 when that is 0).
pub fn graph_ssl_affinity(net: &RoadNetwork) -> Vec<(SegmentId, SegmentId, f64)> {
    let m = net.num_segments();
    let all: Vec<SegmentId> = (0..m).collect();
    let (mean, sd) = standardizer(net, &all);
    let f: Vec<[f64; 4]> = all.iter().map(|&i| standardize(geo_features(net, i), mean, sd)).collect();
    let d2 = |a: usize, b: usize| f[a].iter().zip(&f[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut dists: Vec<f64> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).map(|(a, b)| d2(a, b).sqrt()).collect();
    dists.sort_by(f64::total_cmp);
    let sigma = match dists.len() {
        0 => 1.0,
        k if k % 2 == 1 => dists[k / 2],
        k => (dists[k / 2 - 1] + dists[k / 2]) / 2.0,
    };
    let sigma = if sigma > 0.0 { sigma } else { 1.0 };
    (0..m)
        .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
        .map(|(a, b)| (a, b, (-d2(a, b) / (sigma * sigma)).exp()))
        .collect()
}

/// Harmonic propagation per interval over the all-pairs feature affinity.
pub fn baseline_graph_ssl(split: &EvalSplit, net: &RoadNetwork, truth: &VolumeTensor, cfg: &InferConfig) -> Result<VolumeTensor, EvalError> {
    let (m, n) = (truth.m, truth.n);
    let aff = graph_ssl_affinity(net);
    let graph = SimilarityGraph::from_pairs(m, n, (0..n).flat_map(|t| aff.iter().map(move |&(a, b, w)| (a * n + t, b * n + t, w))));
    Ok(solve(&split.observed(truth), &graph, cfg)?.volumes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub rmse: f64,
    /// `None` when every sample was filtered out.
    pub mape: Option<f64>,
    pub count: usize,
    pub mape_count: usize,
}

impl MetricRow {
    fn from_samples(pred: &[f64], truth: &[f64]) -> Result<Self, EvalError> {
        let mape_count = truth.iter().filter(|&&t| t >= MAPE_MIN_TRUTH).count();
        Ok(MetricRow {
            rmse: rmse(pred, truth)?,
            mape: if mape_count > 0 { Some(mape(pred, truth)?) } else { None },
            count: pred.len(),
            mape_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: MetricRow,
    pub per_class: Vec<(RoadClass, Option<MetricRow>)>,
    /// Hour of day `0..24` for each interval's start.
    pub per_hour: Vec<(usize, Option<MetricRow>)>,
}

/// Scores predictions on every interval of the test segments.
pub fn evaluate_run(pred: &VolumeTensor, truth: &VolumeTensor, net: &RoadNetwork, split: &EvalSplit) -> Result<MetricReport, EvalError> {
    let mut missing = Vec::new();
    for &i in &split.test {
        for t in 0..truth.n {
            let ok = i < pred.m && t < pred.n && pred.n == truth.n && pred.get(i, t).is_finite();
            if !ok {
                missing.push((i, t));
            }
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::Coverage(missing));
    }
    let hour_of = |t: usize| ((t as f64 * truth.interval_seconds / 3600.0).floor() as usize) % 24;
    let collect = |keep: &dyn Fn(SegmentId, usize) -> bool| {
        let (mut p, mut q) = (Vec::new(), Vec::new());
        for &i in &split.test {
            for t in 0..truth.n {
                if keep(i, t) {
                    p.push(pred.get(i, t));
                    q.push(truth.get(i, t));
                }
            }
        }
        (p, q)
    };
    let row = |keep: &dyn Fn(SegmentId, usize) -> bool| -> Result<Option<MetricRow>, EvalError> {
        let (p, q) = collect(keep);
        if p.is_empty() {
            Ok(None)
        } else {
            MetricRow::from_samples(&p, &q).map(Some)
        }
    };
    let overall = row(&|_, _| true)?.ok_or(EvalError::Empty)?;
    let per_class = RoadClass::ALL
        .iter()
        .map(|&c| Ok((c, row(&|i, _| net.segments()[i].road_class == c)?)))
        .collect::<Result<_, EvalError>>()?;
    let per_hour = (0..24).map(|h| Ok((h, row(&|_, t| hour_of(t) == h)?))).collect::<Result<_, EvalError>>()?;
    Ok(MetricReport { overall, per_class, per_hour })
}

fn mean_row(rows: &[&MetricRow]) -> Option<MetricRow> {
    if rows.is_empty() {
        return None;
    }
    let k = rows.len() as f64;
    let mapes: Vec<f64> = rows.iter().filter_map(|r| r.mape).collect();
    Some(MetricRow {
        rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / k,
        mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
        count: rows.iter().map(|r| r.count).sum(),
        mape_count: rows.iter().map(|r| r.mape_count).sum(),
    })
}

/// Arithmetic mean of each metric over runs; counts are summed.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    let overall = mean_row(&reports.iter().map(|r| &r.overall).collect::<Vec<_>>()).ok_or(EvalError::Empty)?;
    let per_class = first
        .per_class
        .iter()
        .enumerate()
        .map(|(k, (c, _))| (*c, mean_row(&reports.iter().filter_map(|r| r.per_class[k].1.as_ref()).collect::<Vec<_>>())))
        .collect();
    let per_hour = first
        .per_hour
        .iter()
        .enumerate()
        .map(|(k, (h, _))| (*h, mean_row(&reports.iter().filter_map(|r| r.per_hour[k].1.as_ref()).collect::<Vec<_>>())))
        .collect();
    Ok(MetricReport { overall, per_class, per_hour })
}

fn write_rows<W: Write, K: ToString>(w: W, key: &str, rows: impl Iterator<Item = (K, Option<MetricRow>)>) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([key, "rmse", "mape", "count", "mape_count"])?;
    for (k, r) in rows {
        match r {
            Some(r) => wr.write_record([
                k.to_string(),
                r.rmse.to_string(),
                r.mape.map(|x| x.to_string()).unwrap_or_default(),
                r.count.to_string(),
                r.mape_count.to_string(),
            ])?,
            None => wr.write_record([k.to_string(), String::new(), String::new(), "0".into(), "0".into()])?,
        }
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_per_class_csv<W: Write>(report: &MetricReport, w: W) -> Result<(), EvalError> {
    write_rows(w, "road_class", report.per_class.iter().map(|(c, r)| (c.name(), r.clone())))
}

pub fn write_per_hour_csv<W: Write>(report: &MetricReport, w: W) -> Result<(), EvalError> {
    write_rows(w, "hour", report.per_hour.iter().map(|(h, r)| (*h, r.clone())))
}
