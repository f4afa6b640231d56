//! Deep-ensemble aggregation, tiled scene inference and inverse-variance fusion.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::{GridSpec, Variable, NODATA};
use crate::dataset::SceneData;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, ModelParameters, LOG_VAR_CLAMP, N_OUTPUTS};
use crate::tensor::Tensor;
use crate::tile::{BandInfo, Tile};
use crate::training::{cut_inputs, Acquisitions};

/// Floor applied to variances before inversion during fusion.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Predictive Gaussian of one network: means and variances, both `[5, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub means: Tensor<f64>,
    pub variances: Tensor<f64>,
}

impl GaussianPrediction {
    pub fn new(means: Tensor<f64>, variances: Tensor<f64>) -> Result<Self> {
        if means.shape() != variances.shape() {
            return Err(Error::Shape(format!(
                "means {:?} vs variances {:?}",
                means.shape(),
                variances.shape()
            )));
        }
        if let Some(v) = variances.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidInput(format!("variance {v} is not positive and finite")));
        }
        Ok(Self { means, variances })
    }

    /// From network outputs: log-variances are clamped, then exponentiated.
    pub fn from_log_vars(means: Tensor<f64>, log_vars: &Tensor<f64>) -> Result<Self> {
        let variances = log_vars.map(|s| s.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp());
        Self::new(means, variances)
    }

    pub fn shape(&self) -> &[usize] {
        self.means.shape()
    }
}

/// Member predictions plus the moments of their equal-weight mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub members: Vec<GaussianPrediction>,
    pub mean: Tensor<f64>,
    pub variance: Tensor<f64>,
    /// Number of windows contributing to each pixel, for tiled predictions.
    pub coverage: Option<Vec<u32>>,
}

/// Mixture mean `(1/M) Σ μ_k` and variance `(1/M) Σ (σ²_k + (μ_k − μ̄)²)`.
pub fn aggregate(members: Vec<GaussianPrediction>) -> Result<EnsemblePrediction> {
    let first = members
        .first()
        .ok_or_else(|| Error::Empty("an ensemble needs at least one member".into()))?;
    let shape = first.shape().to_vec();
    if let Some(m) = members.iter().find(|m| m.shape() != shape.as_slice()) {
        return Err(Error::Shape(format!("member shape {:?} vs {:?}", m.shape(), shape)));
    }
    let m = members.len() as f64;
    let n = first.means.len();
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for k in &members {
        for (acc, &x) in mean.iter_mut().zip(k.means.data()) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m);
    for k in &members {
        for i in 0..n {
            let d = k.means.data()[i] - mean[i];
            var[i] += k.variances.data()[i] + d * d;
        }
    }
    var.iter_mut().for_each(|x| *x /= m);
    Ok(EnsemblePrediction {
        mean: Tensor::new(shape.clone(), mean)?,
        variance: Tensor::new(shape, var)?,
        members,
        coverage: None,
    })
}

/// Density at `y` of the equal-weight mixture of `(mean, variance)` components.
pub fn mixture_density_at(components: &[(f64, f64)], y: f64) -> f64 {
    let sum: f64 = components
        .iter()
        .map(|&(mu, var)| (-(y - mu).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt())
        .sum();
    sum / components.len() as f64
}

/// Elementwise mixture density of the members at `y`.
pub fn mixture_density(members: &[GaussianPrediction], y: &Tensor<f64>) -> Result<Tensor<f64>> {
    if members.is_empty() {
        return Err(Error::Empty("an ensemble needs at least one member".into()));
    }
    if let Some(m) = members.iter().find(|m| m.shape() != y.shape()) {
        return Err(Error::Shape(format!("member shape {:?} vs query {:?}", m.shape(), y.shape())));
    }
    let mut comps = Vec::with_capacity(members.len());
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            comps.clear();
            comps.extend(members.iter().map(|m| (m.means.data()[i], m.variances.data()[i])));
            mixture_density_at(&comps, yi)
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Sliding-window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub window: usize,
    pub stride: usize,
    pub keep: usize,
    /// Windows touching the scene border also retain the margin between
    /// their kept block and that border.
    pub extend_edges: bool,
    /// Windows per forward pass.
    pub batch: usize,
}

impl Default for Tiling {
    fn default() -> Self {
        Self {
            window: 15,
            stride: 9,
            keep: 11,
            extend_edges: true,
            batch: 16,
        }
    }
}

impl Tiling {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0
            || self.stride == 0
            || self.keep == 0
            || self.keep > self.window
            || (self.window - self.keep) % 2 != 0
            || self.batch == 0
        {
            return Err(Error::Config(format!("invalid tiling {self:?}")));
        }
        Ok(())
    }

    /// Window start offsets along an axis of length `n`; the last window is
    /// clamped to end at `n`.
    pub fn starts(&self, n: usize) -> Result<Vec<usize>> {
        if n < self.window {
            return Err(Error::InvalidInput(format!(
                "scene extent {n} is smaller than the {} pixel window",
                self.window
            )));
        }
        let last = n - self.window;
        let mut s: Vec<usize> = (0..=last).step_by(self.stride).collect();
        if *s.last().unwrap() != last {
            s.push(last);
        }
        Ok(s)
    }

    /// Retained range, relative to the window, for a window at `start`.
    pub fn retained(&self, start: usize, n: usize) -> std::ops::Range<usize> {
        let margin = (self.window - self.keep) / 2;
        let mut lo = margin;
        let mut hi = margin + self.keep;
        if self.extend_edges {
            if start == 0 {
                lo = 0;
            }
            if start + self.window == n {
                hi = self.window;
            }
        }
        lo..hi
    }
}

/// Input layout a model configuration was built for.
pub fn ablation_of(config: &ModelConfig) -> Result<Ablation> {
    Ablation::ALL
        .into_iter()
        .find(|a| a.optical_channels() == config.optical_channels && a.sar_channels() == config.sar_channels)
        .ok_or_else(|| {
            Error::Config(format!(
                "no input configuration with {} optical and {} SAR channels",
                config.optical_channels, config.sar_channels
            ))
        })
}

fn tile_member(
    params: &ModelParameters<f32>,
    scene: &SceneData,
    acq: Acquisitions,
    tiling: &Tiling,
) -> Result<(Vec<f64>, Vec<f64>, Vec<u32>)> {
    let ablation = ablation_of(params.config())?;
    let (h, w) = (scene.height(), scene.width());
    let rows = tiling.starts(h)?;
    let cols = tiling.starts(w)?;
    let windows: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let p = tiling.window;
    let plane = h * w;
    let mut mean = vec![0.0; N_OUTPUTS * plane];
    let mut var = vec![0.0; N_OUTPUTS * plane];
    let mut count = vec![0u32; plane];
    for chunk in windows.chunks(tiling.batch) {
        let b = chunk.len();
        let mut optical = Vec::new();
        let mut sar = Vec::new();
        for &(r, c) in chunk {
            let (o, s) = cut_inputs(scene, ablation, acq, r, c, p, p);
            optical.extend(o.unwrap_or_default());
            sar.extend(s.unwrap_or_default());
        }
        let oc = ablation.optical_channels();
        let sc = ablation.sar_channels();
        let optical = (oc > 0).then(|| Tensor::new(vec![b, oc, p, p], optical)).transpose()?;
        let sar = (sc > 0).then(|| Tensor::new(vec![b, sc, p, p], sar)).transpose()?;
        let (m, s) = params.predict(optical, sar)?;
        for (bi, &(r, c)) in chunk.iter().enumerate() {
            let rr = tiling.retained(r, h);
            let cr = tiling.retained(c, w);
            for dr in rr {
                for dc in cr.clone() {
                    let cell = (r + dr) * w + c + dc;
                    count[cell] += 1;
                    for v in 0..N_OUTPUTS {
                        let src = ((bi * N_OUTPUTS + v) * p + dr) * p + dc;
                        let sv = (s.data()[src] as f64).clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                        mean[v * plane + cell] += m.data()[src] as f64;
                        var[v * plane + cell] += sv.exp();
                    }
                }
            }
        }
    }
    for v in 0..N_OUTPUTS {
        for cell in 0..plane {
            let i = v * plane + cell;
            if count[cell] > 0 {
                mean[i] /= count[cell] as f64;
                var[i] /= count[cell] as f64;
            } else {
                // Placeholder for pixels no window retains; see `coverage`.
                mean[i] = 0.0;
                var[i] = 1.0;
            }
        }
    }
    Ok((mean, var, count))
}

/// Run every member over the scene with a sliding window and aggregate.
/// Overlapping retained outputs are averaged (means and variances
/// separately) before the members are combined.
pub fn tiled_inference(
    members: &[ModelParameters<f32>],
    scene: &SceneData,
    acq: Acquisitions,
    tiling: &Tiling,
) -> Result<EnsemblePrediction> {
    tiling.validate()?;
    scene.validate()?;
    let first = members
        .first()
        .ok_or_else(|| Error::Empty("no ensemble members".into()))?;
    if let Some(m) = members.iter().find(|m| {
        m.config().optical_channels != first.config().optical_channels
            || m.config().sar_channels != first.config().sar_channels
    }) {
        return Err(Error::Config(format!(
            "members disagree on inputs: {:?} vs {:?}",
            ablation_of(m.config()),
            ablation_of(first.config())
        )));
    }
    let outputs: Vec<(Vec<f64>, Vec<f64>, Vec<u32>)> = members
        .par_iter()
        .map(|m| tile_member(m, scene, acq, tiling))
        .collect::<Result<_>>()?;
    let shape = vec![N_OUTPUTS, scene.height(), scene.width()];
    let coverage = outputs[0].2.clone();
    let preds = outputs
        .into_iter()
        .map(|(m, v, _)| GaussianPrediction::new(Tensor::new(shape.clone(), m)?, Tensor::new(shape.clone(), v)?))
        .collect::<Result<Vec<_>>>()?;
    let mut out = aggregate(preds)?;
    out.coverage = Some(coverage);
    Ok(out)
}

/// Weighted mean `Σ μ_t/σ²_t / Σ 1/σ²_t` of one pixel and variable.
pub fn fuse_values(means: &[f64], variances: &[f64]) -> Result<f64> {
    if means.is_empty() || means.len() != variances.len() {
        return Err(Error::Shape(format!(
            "{} means vs {} variances",
            means.len(),
            variances.len()
        )));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!("variance {v} is not positive and finite")));
    }
    // Weights relative to the smallest variance: exact for T = 1 and equal variances.
    let vmin = variances.iter().fold(f64::INFINITY, |a, &v| a.min(v.max(VARIANCE_FLOOR)));
    let (mut num, mut den) = (0.0, 0.0);
    for (&m, &v) in means.iter().zip(variances) {
        let wgt = vmin / v.max(VARIANCE_FLOOR);
        num += wgt * m;
        den += wgt;
    }
    Ok(num / den)
}

/// Inverse-variance combination of several predictions of the same scene.
pub fn inverse_variance_fuse(predictions: &[&EnsemblePrediction]) -> Result<Tensor<f64>> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Empty("nothing to fuse".into()))?;
    let shape = first.mean.shape().to_vec();
    if let Some(p) = predictions.iter().find(|p| p.mean.shape() != shape.as_slice()) {
        return Err(Error::Shape(format!("prediction shape {:?} vs {:?}", p.mean.shape(), shape)));
    }
    let mut means = Vec::with_capacity(predictions.len());
    let mut vars = Vec::with_capacity(predictions.len());
    let data = (0..first.mean.len())
        .map(|i| {
            means.clear();
            vars.clear();
            means.extend(predictions.iter().map(|p| p.mean.data()[i]));
            vars.extend(predictions.iter().map(|p| p.variance.data()[i]));
            fuse_values(&means, &vars)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}

pub fn mean_band_name(v: Variable) -> String {
    format!("{}_mean", v.name())
}

pub fn variance_band_name(v: Variable) -> String {
    format!("{}_var", v.name())
}

pub const COVERAGE_BAND: &str = "coverage";

impl EnsemblePrediction {
    pub fn height(&self) -> usize {
        self.mean.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mean.shape()[2]
    }

    /// Whether pixel `cell` holds a prediction.
    pub fn covered(&self, cell: usize) -> bool {
        self.coverage.as_ref().is_none_or(|c| c[cell] > 0)
    }

    pub fn value(&self, v: Variable, cell: usize) -> (f64, f64) {
        let i = v.index() * self.height() * self.width() + cell;
        (self.mean.data()[i], self.variance.data()[i])
    }

    /// Tile with 5 mean bands, 5 variance bands and a coverage band;
    /// uncovered pixels hold the no-data value.
    pub fn to_tile(&self, grid: GridSpec) -> Result<Tile> {
        let plane = self.height() * self.width();
        if grid.len() != plane {
            return Err(Error::Shape(format!("grid {}x{} vs prediction", grid.width, grid.height)));
        }
        let mut bands = Vec::new();
        for (src, name, squared) in [(&self.mean, "mean", false), (&self.variance, "var", true)] {
            for v in Variable::ALL {
                let unit = match (v, squared) {
                    (Variable::P95 | Variable::MeanH, true) => "m^2".to_string(),
                    _ => v.unit().to_string(),
                };
                let data = (0..plane)
                    .map(|cell| {
                        if self.covered(cell) {
                            src.data()[v.index() * plane + cell] as f32
                        } else {
                            NODATA as f32
                        }
                    })
                    .collect();
                bands.push((
                    BandInfo {
                        name: format!("{}_{name}", v.name()),
                        unit,
                        nodata: Some(NODATA),
                    },
                    data,
                ));
            }
        }
        let cov = (0..plane)
            .map(|cell| self.coverage.as_ref().map_or(1.0, |c| c[cell] as f32))
            .collect();
        bands.push((
            BandInfo {
                name: COVERAGE_BAND.into(),
                unit: String::new(),
                nodata: None,
            },
            cov,
        ));
        Tile::new(&grid, bands, None)
    }

    /// Read a prediction tile. Member outputs are not stored, so the result
    /// holds the aggregate as its single member.
    pub fn from_tile(tile: &Tile) -> Result<Self> {
        let grid = tile.grid();
        let plane = grid.len();
        let coverage: Vec<u32> = tile
            .band(COVERAGE_BAND)
            .ok_or_else(|| Error::Format("prediction tile lacks a coverage band".into()))?
            .iter()
            .map(|&c| c.max(0.0) as u32)
            .collect();
        let mut mean = vec![0.0; N_OUTPUTS * plane];
        let mut var = vec![1.0; N_OUTPUTS * plane];
        for v in Variable::ALL {
            let m = tile
                .band(&mean_band_name(v))
                .ok_or_else(|| Error::Format(format!("prediction tile lacks {}", mean_band_name(v))))?;
            let s = tile
                .band(&variance_band_name(v))
                .ok_or_else(|| Error::Format(format!("prediction tile lacks {}", variance_band_name(v))))?;
            for cell in 0..plane {
                if coverage[cell] > 0 {
                    mean[v.index() * plane + cell] = m[cell] as f64;
                    var[v.index() * plane + cell] = s[cell] as f64;
                }
            }
        }
        let shape = vec![N_OUTPUTS, grid.height, grid.width];
        let member = GaussianPrediction::new(Tensor::new(shape.clone(), mean)?, Tensor::new(shape, var)?)?;
        let mut out = aggregate(vec![member])?;
        out.coverage = Some(coverage);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(m: &[f64], v: &[f64]) -> GaussianPrediction {
        GaussianPrediction::new(
            Tensor::new(vec![1, 1, m.len()], m.to_vec()).unwrap(),
            Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn two_member_fixture() {
        let e = aggregate(vec![pred(&[1.0], &[1.0]), pred(&[3.0], &[1.0])]).unwrap();
        assert_eq!(e.mean.data(), &[2.0]);
        assert_eq!(e.variance.data(), &[2.0]);
    }

    #[test]
    fn fusion_fixture() {
        assert_eq!(fuse_values(&[0.0, 10.0], &[1.0, 4.0]).unwrap(), 2.0);
        assert!(fuse_values(&[0.0, 1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn window_starts_clamp_to_the_edge() {
        let t = Tiling::default();
        assert_eq!(t.starts(33).unwrap(), vec![0, 9, 18]);
        assert_eq!(t.starts(40).unwrap(), vec![0, 9, 18, 25]);
        assert_eq!(t.starts(15).unwrap(), vec![0]);
        assert!(t.starts(14).is_err());
    }
}
