//! Error metrics and uncertainty diagnostics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::als::Variable;
use crate::dataset::{Dataset, SceneData, Split, OPTICAL_BANDS, SAR_BANDS_PER_ORBIT};
use crate::ensemble::{tiled_inference, EnsemblePrediction, Tiling};
use crate::model::ModelParameters;
use crate::training::Acquisitions;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub variable: Variable,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mbe: f64,
    pub mae_pct: f64,
    pub rmse_pct: f64,
    pub mbe_pct: f64,
    pub normalizer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub region: String,
    pub variables: Vec<VariableMetrics>,
}

impl MetricReport {
    pub fn get(&self, v: Variable) -> Option<&VariableMetrics> {
        self.variables.iter().find(|m| m.variable == v)
    }
}

fn mean_abs(pred: &[f64], refs: &[f64], idx: impl Iterator<Item = usize>) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0);
    for i in idx {
        s += (pred[i] - refs[i]).abs();
        n += 1;
    }
    (s / n as f64, n)
}

/// MAE, RMSE and MBE (prediction − reference) over the masked samples of one
/// variable; percentages are relative to `normalizer`.
pub fn variable_metrics(
    variable: Variable,
    pred: &[f64],
    refs: &[f64],
    mask: &[bool],
    normalizer: f64,
) -> Result<VariableMetrics> {
    if pred.len() != refs.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} references, {} mask entries",
            pred.len(),
            refs.len(),
            mask.len()
        )));
    }
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::InvalidInput(format!("normalizer {normalizer} must be positive")));
    }
    let (mae, n) = mean_abs(pred, refs, (0..pred.len()).filter(|&i| mask[i]));
    if n == 0 {
        return Err(Error::Empty("no masked samples".into()));
    }
    let (mut sq, mut bias) = (0.0, 0.0);
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let d = pred[i] - refs[i];
        sq += d * d;
        bias += d;
    }
    let rmse = (sq / n as f64).sqrt();
    let mbe = bias / n as f64;
    Ok(VariableMetrics {
        variable,
        n,
        mae,
        rmse,
        mbe,
        mae_pct: 100.0 * mae / normalizer,
        rmse_pct: 100.0 * rmse / normalizer,
        mbe_pct: 100.0 * mbe / normalizer,
        normalizer,
    })
}

/// Metrics of all five variables; `pred[v]` and `refs[v]` hold variable `v`.
pub fn compute_metrics(
    pred: &[Vec<f64>],
    refs: &[Vec<f64>],
    mask: &[bool],
    normalizers: &[f64; 5],
    region: &str,
) -> Result<MetricReport> {
    if pred.len() != 5 || refs.len() != 5 {
        return Err(Error::Shape("expected five variables".into()));
    }
    let variables = Variable::ALL
        .iter()
        .map(|&v| variable_metrics(v, &pred[v.index()], &refs[v.index()], mask, normalizers[v.index()]))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        region: region.to_string(),
        variables,
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8}", self.region)?;
        for m in &self.variables {
            write!(f, "{:>10}", m.variable.label())?;
        }
        writeln!(f)?;
        let rows: [(&str, fn(&VariableMetrics) -> f64); 6] = [
            ("MAE", |m| m.mae),
            ("MAE%", |m| m.mae_pct),
            ("RMSE", |m| m.rmse),
            ("RMSE%", |m| m.rmse_pct),
            ("MBE", |m| m.mbe),
            ("MBE%", |m| m.mbe_pct),
        ];
        for (name, get) in rows {
            write!(f, "{name:<8}")?;
            for m in &self.variables {
                let x = get(m);
                if name.ends_with('%') {
                    write!(f, "{:>10.2}", x)?;
                } else {
                    write!(f, "{:>10.3}", x)?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Sample count per (prediction bin, reference bin).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionHistogram {
    pub n_bins: usize,
    pub range: (f64, f64),
    /// Row-major: `counts[pred_bin * n_bins + ref_bin]`.
    pub counts: Vec<u64>,
}

impl ConfusionHistogram {
    pub fn count(&self, pred_bin: usize, ref_bin: usize) -> u64 {
        self.counts[pred_bin * self.n_bins + ref_bin]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn bin_of(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    let t = ((x - lo) / (hi - lo) * n as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(n - 1)
    }
}

/// 2-D histogram of predictions against references; out-of-range samples
/// land in the edge bins.
pub fn confusion_histogram(pred: &[f64], refs: &[f64], n_bins: usize, range: (f64, f64)) -> Result<ConfusionHistogram> {
    if n_bins < 2 {
        return Err(Error::InvalidInput("at least two bins are needed".into()));
    }
    if !(range.1 > range.0) {
        return Err(Error::InvalidInput(format!("empty range {range:?}")));
    }
    if pred.len() != refs.len() {
        return Err(Error::Shape(format!("{} predictions vs {} references", pred.len(), refs.len())));
    }
    let mut counts = vec![0; n_bins * n_bins];
    for (&p, &r) in pred.iter().zip(refs) {
        counts[bin_of(p, range.0, range.1, n_bins) * n_bins + bin_of(r, range.0, range.1, n_bins)] += 1;
    }
    Ok(ConfusionHistogram { n_bins, range, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBin {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Residual statistics binned by a query variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStructure {
    pub edges: Vec<f64>,
    /// `None` for bins without samples.
    pub bins: Vec<Option<ResidualBin>>,
}

/// Interpolated percentile of unsorted values; `NaN` when empty.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    crate::als::quantile_sorted(&s, q).unwrap_or(f64::NAN)
}

/// Equal-width bins over the query range after dropping queries above the
/// `clip` quantile; per bin, mean and standard deviation of the residuals.
pub fn residual_structure(query: &[f64], residuals: &[f64], b: usize, clip: f64) -> Result<ResidualStructure> {
    if b < 2 {
        return Err(Error::InvalidInput("at least two bins are needed".into()));
    }
    if query.len() != residuals.len() {
        return Err(Error::Shape(format!("{} queries vs {} residuals", query.len(), residuals.len())));
    }
    if query.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    let cut = percentile(query, clip);
    let lo = query.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = if cut > lo { cut } else { lo + 1.0 };
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); b];
    for (&q, &r) in query.iter().zip(residuals) {
        if q > cut {
            continue;
        }
        let a = &mut acc[bin_of(q, lo, hi, b)];
        a.0 += 1;
        a.1 += r;
        a.2 += r * r;
    }
    let edges = (0..=b).map(|i| lo + (hi - lo) * i as f64 / b as f64).collect();
    let bins = acc
        .into_iter()
        .map(|(n, s, sq)| {
            (n > 0).then(|| {
                let mean = s / n as f64;
                ResidualBin {
                    count: n,
                    mean,
                    std: (sq / n as f64 - mean * mean).max(0.0).sqrt(),
                }
            })
        })
        .collect();
    Ok(ResidualStructure { edges, bins })
}

/// Residuals of every variable binned by the reference of every variable:
/// `cells[target][query]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualGrid {
    pub cells: Vec<Vec<ResidualStructure>>,
}

pub fn residual_grid(pred: &[Vec<f64>], refs: &[Vec<f64>], b: usize, clip: f64) -> Result<ResidualGrid> {
    let cells = Variable::ALL
        .iter()
        .map(|t| {
            let res: Vec<f64> = pred[t.index()]
                .iter()
                .zip(&refs[t.index()])
                .map(|(p, r)| p - r)
                .collect();
            Variable::ALL
                .iter()
                .map(|q| residual_structure(&refs[q.index()], &res, b, clip))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(ResidualGrid { cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_variance: f64,
    pub rmv: f64,
    pub mse: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    /// Mean over bins of `|RMSE − RMV| / RMV`.
    pub fn mean_relative_gap(&self) -> f64 {
        self.bins.iter().map(|b| (b.rmse - b.rmv).abs() / b.rmv).sum::<f64>() / self.bins.len() as f64
    }
}

/// Sort by predicted variance, drop the `trim` fraction at each end and
/// split the rest into `n_bins` equal-count bins (sizes differ by at most
/// one); per bin compare root mean variance with root mean squared error.
pub fn calibration_curve(
    means: &[f64],
    variances: &[f64],
    refs: &[f64],
    n_bins: usize,
    trim: f64,
) -> Result<CalibrationCurve> {
    if means.len() != variances.len() || means.len() != refs.len() {
        return Err(Error::Shape("means, variances and references differ in length".into()));
    }
    if n_bins == 0 || !(0.0..0.5).contains(&trim) {
        return Err(Error::InvalidInput(format!("{n_bins} bins with trim {trim}")));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidInput(format!("variance {v} is not positive")));
    }
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]).then(a.cmp(&b)));
    let cut = (trim * means.len() as f64).floor() as usize;
    let kept = &order[cut..order.len() - cut];
    if kept.len() < n_bins {
        return Err(Error::InvalidInput(format!(
            "{} samples after trimming, fewer than {n_bins} bins",
            kept.len()
        )));
    }
    let (q, r) = (kept.len() / n_bins, kept.len() % n_bins);
    let mut start = 0;
    let bins = (0..n_bins)
        .map(|i| {
            let len = q + usize::from(i < r);
            let idx = &kept[start..start + len];
            start += len;
            let mv = idx.iter().map(|&j| variances[j]).sum::<f64>() / len as f64;
            let mse = idx.iter().map(|&j| (means[j] - refs[j]).powi(2)).sum::<f64>() / len as f64;
            CalibrationBin {
                lower: variances[idx[0]],
                upper: variances[idx[len - 1]],
                count: len,
                mean_variance: mv,
                rmv: mv.sqrt(),
                mse,
                rmse: mse.sqrt(),
            }
        })
        .collect();
    Ok(CalibrationCurve { bins })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub fraction: f64,
    pub count: usize,
    pub mae_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub points: Vec<RetentionPoint>,
}

/// MAE% over the `⌈p·n⌉` samples with the lowest predicted variance, for
/// each retained fraction `p`.
pub fn retention_curve(
    means: &[f64],
    variances: &[f64],
    refs: &[f64],
    fractions: &[f64],
    normalizer: f64,
) -> Result<RetentionCurve> {
    if means.len() != variances.len() || means.len() != refs.len() {
        return Err(Error::Shape("means, variances and references differ in length".into()));
    }
    if means.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    if fractions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) || fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("fractions must be ascending in (0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]).then(a.cmp(&b)));
    let n = means.len();
    let points = fractions
        .iter()
        .map(|&p| {
            let k = ((p * n as f64).ceil() as usize).clamp(1, n);
            // Sum in sample order so p = 1 reproduces the global MAE bit for bit.
            let mut keep = vec![false; n];
            order[..k].iter().for_each(|&i| keep[i] = true);
            let (mae, _) = mean_abs(means, refs, (0..n).filter(|&i| keep[i]));
            RetentionPoint {
                fraction: p,
                count: k,
                mae_pct: 100.0 * mae / normalizer,
            }
        })
        .collect();
    Ok(RetentionCurve { points })
}

/// `n` evenly spaced fractions `1/n, 2/n, …, 1`.
pub fn even_fractions(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `NaN` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean of each variable over forested training pixels.
pub fn training_means(dataset: &Dataset) -> Result<[f64; 5]> {
    let mut sum = [0.0; 5];
    let mut n = 0usize;
    for (si, scene) in dataset.scenes.iter().enumerate() {
        let w = scene.width();
        for rows in &dataset.row_splits(si)?.train {
            for cell in rows.start * w..rows.end * w {
                if scene.reference.forested[cell] {
                    n += 1;
                    for v in Variable::ALL {
                        sum[v.index()] += scene.reference.bands[v.index()][cell];
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("no forested training pixels".into()));
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Paired predictions and references at evaluated pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    /// `[variable][sample]`.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub refs: Vec<Vec<f64>>,
    /// `[member][variable][sample]`.
    pub member_means: Vec<Vec<Vec<f64>>>,
    pub member_variances: Vec<Vec<Vec<f64>>>,
}

impl Samples {
    pub fn new(members: usize) -> Self {
        let five = || vec![Vec::new(); 5];
        Self {
            means: five(),
            variances: five(),
            refs: five(),
            member_means: vec![five(); members],
            member_variances: vec![five(); members],
        }
    }

    pub fn len(&self) -> usize {
        self.refs[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append the forested, covered pixels of `rows`.
    pub fn extend_from(&mut self, pred: &EnsemblePrediction, scene: &SceneData, rows: &[Range<usize>]) -> Result<()> {
        let (h, w) = (scene.height(), scene.width());
        if pred.height() != h || pred.width() != w {
            return Err(Error::Shape("prediction and scene extents differ".into()));
        }
        if pred.members.len() != self.member_means.len() {
            return Err(Error::Shape("member count differs from the sample set".into()));
        }
        let plane = h * w;
        for r in rows {
            for cell in r.start * w..r.end * w {
                if !scene.reference.forested[cell] || !pred.covered(cell) {
                    continue;
                }
                for v in 0..5 {
                    let i = v * plane + cell;
                    self.means[v].push(pred.mean.data()[i]);
                    self.variances[v].push(pred.variance.data()[i]);
                    self.refs[v].push(scene.reference.bands[v][cell]);
                    for (k, m) in pred.members.iter().enumerate() {
                        self.member_means[k][v].push(m.means.data()[i]);
                        self.member_variances[k][v].push(m.variances.data()[i]);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn metrics(&self, normalizers: &[f64; 5], region: &str) -> Result<MetricReport> {
        compute_metrics(&self.means, &self.refs, &vec![true; self.len()], normalizers, region)
    }
}

/// Run the ensemble over every scene and collect the pixels of `split`,
/// using the first acquisition of each kind.
pub fn split_samples(
    members: &[ModelParameters<f32>],
    dataset: &Dataset,
    split: Split,
    tiling: &Tiling,
) -> Result<Samples> {
    let mut samples = Samples::new(members.len());
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let pred = tiled_inference(members, scene, Acquisitions::default(), tiling)?;
        samples.extend_from(&pred, scene, dataset.row_splits(i)?.ranges(split))?;
    }
    Ok(samples)
}

/// Everything the evaluation battery reports for one prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub metrics: MetricReport,
    pub confusion: Vec<ConfusionHistogram>,
    pub residuals: ResidualGrid,
    pub calibration: Vec<CalibrationCurve>,
    pub retention: Vec<RetentionCurve>,
    /// Spearman correlation between retained fraction and MAE%, per variable.
    pub retention_spearman: Vec<f64>,
}

pub const CALIBRATION_BINS: usize = 20;
pub const CALIBRATION_TRIM: f64 = 0.01;
pub const RESIDUAL_BINS: usize = 10;
pub const RESIDUAL_CLIP: f64 = 0.99;
pub const CONFUSION_BINS: usize = 25;
pub const RETENTION_STEPS: usize = 20;

pub fn diagnose(samples: &Samples, normalizers: &[f64; 5], region: &str) -> Result<Diagnostics> {
    let metrics = samples.metrics(normalizers, region)?;
    let confusion = Variable::ALL
        .iter()
        .map(|v| {
            let i = v.index();
            let hi = samples.refs[i].iter().chain(&samples.means[i]).copied().fold(0.0, f64::max);
            let range = if v.is_fraction() { (0.0, 1.0) } else { (0.0, hi.max(1e-9)) };
            confusion_histogram(&samples.means[i], &samples.refs[i], CONFUSION_BINS, range)
        })
        .collect::<Result<_>>()?;
    let residuals = residual_grid(&samples.means, &samples.refs, RESIDUAL_BINS, RESIDUAL_CLIP)?;
    let calibration = (0..5)
        .map(|i| {
            calibration_curve(
                &samples.means[i],
                &samples.variances[i],
                &samples.refs[i],
                CALIBRATION_BINS,
                CALIBRATION_TRIM,
            )
        })
        .collect::<Result<_>>()?;
    let fractions = even_fractions(RETENTION_STEPS);
    let retention: Vec<RetentionCurve> = (0..5)
        .map(|i| {
            retention_curve(
                &samples.means[i],
                &samples.variances[i],
                &samples.refs[i],
                &fractions,
                normalizers[i],
            )
        })
        .collect::<Result<_>>()?;
    let retention_spearman = retention
        .iter()
        .map(|c| {
            let p: Vec<f64> = c.points.iter().map(|q| q.fraction).collect();
            let e: Vec<f64> = c.points.iter().map(|q| q.mae_pct).collect();
            spearman(&p, &e)
        })
        .collect();
    Ok(Diagnostics {
        metrics,
        confusion,
        residuals,
        calibration,
        retention,
        retention_spearman,
    })
}

impl Diagnostics {
    /// JSON of everything plus one CSV per diagnostic; with `plot`, SVG
    /// renderings of the calibration, retention and confusion results.
    pub fn write(&self, dir: &Path, plot: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("diagnostics.json"), serde_json::to_vec_pretty(self)?)?;
        fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&self.metrics)?)?;
        fs::write(dir.join("metrics.txt"), self.metrics.to_string())?;

        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        w.write_record(["variable", "n", "mae", "rmse", "mbe", "mae_pct", "rmse_pct", "mbe_pct"])?;
        for m in &self.metrics.variables {
            w.write_record([
                m.variable.name().to_string(),
                m.n.to_string(),
                m.mae.to_string(),
                m.rmse.to_string(),
                m.mbe.to_string(),
                m.mae_pct.to_string(),
                m.rmse_pct.to_string(),
                m.mbe_pct.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("calibration.csv"))?;
        w.write_record(["variable", "bin", "lower", "upper", "count", "rmv", "rmse"])?;
        for (v, c) in Variable::ALL.iter().zip(&self.calibration) {
            for (i, b) in c.bins.iter().enumerate() {
                w.write_record([
                    v.name().to_string(),
                    i.to_string(),
                    b.lower.to_string(),
                    b.upper.to_string(),
                    b.count.to_string(),
                    b.rmv.to_string(),
                    b.rmse.to_string(),
                ])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("retention.csv"))?;
        w.write_record(["variable", "fraction", "count", "mae_pct"])?;
        for (v, c) in Variable::ALL.iter().zip(&self.retention) {
            for p in &c.points {
                w.write_record([v.name().to_string(), p.fraction.to_string(), p.count.to_string(), p.mae_pct.to_string()])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("residuals.csv"))?;
        w.write_record(["target", "query", "bin", "lower", "upper", "count", "mean", "std"])?;
        for (t, row) in Variable::ALL.iter().zip(&self.residuals.cells) {
            for (q, s) in Variable::ALL.iter().zip(row) {
                for (i, b) in s.bins.iter().enumerate() {
                    let (count, mean, std) = b.as_ref().map_or((0, String::new(), String::new()), |b| {
                        (b.count, b.mean.to_string(), b.std.to_string())
                    });
                    w.write_record([
                        t.name().to_string(),
                        q.name().to_string(),
                        i.to_string(),
                        s.edges[i].to_string(),
                        s.edges[i + 1].to_string(),
                        count.to_string(),
                        mean,
                        std,
                    ])?;
                }
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("confusion.csv"))?;
        w.write_record(["variable", "pred_bin", "ref_bin", "count"])?;
        for (v, h) in Variable::ALL.iter().zip(&self.confusion) {
            for p in 0..h.n_bins {
                for r in 0..h.n_bins {
                    w.write_record([v.name().to_string(), p.to_string(), r.to_string(), h.count(p, r).to_string()])?;
                }
            }
        }
        w.flush()?;

        if plot {
            for (v, c) in Variable::ALL.iter().zip(&self.calibration) {
                let pts: Vec<(f64, f64)> = c.bins.iter().map(|b| (b.rmv, b.rmse)).collect();
                let svg = line_plot(&format!("{} calibration", v.label()), "RMV", "RMSE", &pts, true);
                fs::write(dir.join(format!("calibration_{}.svg", v.name())), svg)?;
            }
            for (v, c) in Variable::ALL.iter().zip(&self.retention) {
                let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fraction, p.mae_pct)).collect();
                let svg = line_plot(&format!("{} retention", v.label()), "retained fraction", "MAE %", &pts, false);
                fs::write(dir.join(format!("retention_{}.svg", v.name())), svg)?;
            }
            for (v, h) in Variable::ALL.iter().zip(&self.confusion) {
                fs::write(dir.join(format!("confusion_{}.svg", v.name())), heatmap(v.label(), h))?;
            }
        }
        Ok(())
    }
}

const SVG_SIZE: f64 = 320.0;
const SVG_PAD: f64 = 40.0;

/// Minimal SVG polyline with axes; `identity` adds the y = x reference.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)], identity: bool) -> String {
    let mut hi_x = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    let mut hi_y = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    if identity {
        hi_x = hi_x.max(hi_y);
        hi_y = hi_x;
    }
    let (hi_x, hi_y) = (hi_x.max(1e-12), hi_y.max(1e-12));
    let span = SVG_SIZE - 2.0 * SVG_PAD;
    let sx = |x: f64| SVG_PAD + x / hi_x * span;
    let sy = |y: f64| SVG_SIZE - SVG_PAD - y / hi_y * span;
    let mut s = Vec::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle">{title}</text>"#, SVG_SIZE / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{p} {p} V{b} H{r}" fill="none" stroke="black"/>"#,
        p = SVG_PAD,
        b = SVG_SIZE - SVG_PAD,
        r = SVG_SIZE - SVG_PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel} (max {hi_x:.3})</text>"#, SVG_SIZE / 2.0, SVG_SIZE - 10.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {0})" text-anchor="middle">{ylabel} (max {hi_y:.3})</text>"#, SVG_SIZE / 2.0);
    if identity {
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4"/>"#,
            sx(0.0),
            sy(0.0),
            sx(hi_x),
            sy(hi_y)
        );
    }
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
    let _ = writeln!(s, "</svg>");
    String::from_utf8(s).unwrap_or_default()
}

/// Log-scaled count heatmap, prediction on the vertical axis.
pub fn heatmap(title: &str, h: &ConfusionHistogram) -> String {
    let n = h.n_bins;
    let cell = (SVG_SIZE - 2.0 * SVG_PAD) / n as f64;
    let top = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = Vec::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle">{title}: prediction vs reference</text>"#, SVG_SIZE / 2.0);
    for p in 0..n {
        for r in 0..n {
            let c = h.count(p, r);
            if c == 0 {
                continue;
            }
            let shade = 1.0 - (1.0 + c as f64).ln() / (1.0 + top).ln();
            let g = (255.0 * shade) as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({g},{g},255)"/>"#,
                SVG_PAD + r as f64 * cell,
                SVG_SIZE - SVG_PAD - (p + 1) as f64 * cell
            );
        }
    }
    let _ = writeln!(s, "</svg>");
    String::from_utf8(s).unwrap_or_default()
}

/// Per-pixel features: the optical bands and SAR bands of the first
/// acquisitions, as laid out for `ablation`.
fn pixel_features(scene: &SceneData, optical: bool, sar: bool, cell: usize) -> Vec<f64> {
    let plane = scene.height() * scene.width();
    let mut f = Vec::with_capacity(OPTICAL_BANDS + 2 * SAR_BANDS_PER_ORBIT);
    if optical {
        f.extend((0..OPTICAL_BANDS).map(|b| scene.optical[0].data()[b * plane + cell] as f64));
    }
    if sar {
        for t in [&scene.sar_asc[0], &scene.sar_desc[0]] {
            f.extend((0..SAR_BANDS_PER_ORBIT).map(|b| t.data()[b * plane + cell] as f64));
        }
    }
    f
}

/// Closed-form ridge regression with standardized features and an
/// unpenalized intercept, one output column per variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// `[variable][feature]`.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
}

impl RidgeModel {
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || y.len() != n {
            return Err(Error::Empty("ridge regression needs paired training samples".into()));
        }
        let d = x[0].len();
        let k = y[0].len();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for row in x {
            for j in 0..d {
                mean[j] += row[j] / n as f64;
            }
        }
        for row in x {
            for j in 0..d {
                std[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
        let xm = DMatrix::from_fn(n, d, |i, j| (x[i][j] - mean[j]) / std[j]);
        let ym = DMatrix::from_fn(n, k, |i, j| y[i][j]);
        let y_mean: Vec<f64> = (0..k).map(|j| ym.column(j).mean()).collect();
        let yc = DMatrix::from_fn(n, k, |i, j| ym[(i, j)] - y_mean[j]);
        let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * lambda.max(0.0);
        let rhs = xm.transpose() * yc;
        let sol = gram
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or_else(|| Error::Infeasible("ridge system is singular".into()))?;
        let weights = (0..k).map(|j| sol.column(j).iter().copied().collect()).collect();
        Ok(Self {
            feature_mean: mean,
            feature_std: std,
            weights,
            intercepts: y_mean,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let z = DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(&self.feature_mean)
                .zip(&self.feature_std)
                .map(|((v, m), s)| (v - m) / s),
        );
        self.weights
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| b + w.iter().zip(z.iter()).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }
}

/// Per-pixel ridge baseline trained on forested training pixels and
/// evaluated on the forested pixels of `split`.
pub fn baseline_per_pixel(
    dataset: &Dataset,
    split: Split,
    optical: bool,
    sar: bool,
    lambda: f64,
) -> Result<MetricReport> {
    let collect = |which: Split| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (si, scene) in dataset.scenes.iter().enumerate() {
            let w = scene.width();
            for rows in dataset.row_splits(si)?.ranges(which) {
                for cell in rows.start * w..rows.end * w {
                    if scene.reference.forested[cell] {
                        x.push(pixel_features(scene, optical, sar, cell));
                        y.push((0..5).map(|v| scene.reference.bands[v][cell]).collect());
                    }
                }
            }
        }
        Ok((x, y))
    };
    let (xt, yt) = collect(Split::Train)?;
    let model = RidgeModel::fit(&xt, &yt, lambda)?;
    let (xe, ye) = collect(split)?;
    if xe.is_empty() {
        return Err(Error::Empty(format!("no forested pixels in the {split:?} split")));
    }
    let mut pred = vec![Vec::with_capacity(xe.len()); 5];
    let mut refs = vec![Vec::with_capacity(xe.len()); 5];
    for (xi, yi) in xe.iter().zip(&ye) {
        for (v, p) in model.predict(xi).into_iter().enumerate() {
            pred[v].push(p);
            refs[v].push(yi[v]);
        }
    }
    compute_metrics(&pred, &refs, &vec![true; xe.len()], &training_means(dataset)?, "ridge")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_metrics() {
        let m = variable_metrics(Variable::P95, &[1.0, 2.0], &[2.0, 4.0], &[true, true], 1.0).unwrap();
        assert_eq!(m.mae, 1.5);
        assert_eq!(m.mbe, -1.5);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spearman_of_monotone_pairs() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }
}
