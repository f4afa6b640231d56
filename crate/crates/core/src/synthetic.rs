//! Synthetic scenes with known structure, for end-to-end checks.
//!
//! Canopy heights in a cell follow `dz = lo + s·v` with `v = u^(1/k)` and
//! `u` uniform, so P95, MeanH and Gini are closed-form in `(lo, s, k)`.
//! Smooth latent fields drive `(lo, s, k)`, density, cover and the forest
//! mask. Optical imagery is a noisy, partially saturating but invertible
//! function of the five variables; SAR backscatter depends on height and
//! cover only and carries multiplicative speckle.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::{
    quantile_sorted, CellFootprint, GridSpec, PointCloud, Return, StructureRaster, Variable,
    COVER_RESOLUTION, VEGETATION_THRESHOLD,
};
use crate::dataset::{Dataset, SceneData, SplitSpec, OPTICAL_BANDS, SAR_BANDS_PER_ORBIT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tile::Tile;

/// Saturation scale of the P95 optical band, in meters.
pub const P95_SCALE: f64 = 4.0;
/// Saturation scale of the MeanH optical band, in meters.
pub const MEANH_SCALE: f64 = 2.5;
/// Height normalizer of the SAR response, in meters.
pub const SAR_HEIGHT_SCALE: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub n_optical: usize,
    pub n_sar_per_orbit: usize,
    /// Standard deviation of additive optical noise, in reflectance units.
    pub optical_noise: f64,
    /// Equivalent number of looks of the SAR speckle.
    pub sar_looks: f64,
    /// Relative standard deviation of the reference (ALS) error.
    pub reference_noise: f64,
    pub forest_fraction: f64,
    /// Radius of the box filter applied twice to white noise.
    pub smoothing: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 90,
            height: 90,
            resolution: 10.0,
            n_optical: 3,
            n_sar_per_orbit: 2,
            optical_noise: 0.01,
            sar_looks: 4.0,
            reference_noise: 0.08,
            forest_fraction: 0.7,
            smoothing: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 15 || self.height < 15 {
            return Err(Error::InvalidInput(format!(
                "scene {}x{} is smaller than 15x15",
                self.width, self.height
            )));
        }
        if self.n_optical == 0 || self.n_sar_per_orbit == 0 {
            return Err(Error::Config("scenes need at least one acquisition of each kind".into()));
        }
        let ok = self.resolution > 0.0
            && self.optical_noise >= 0.0
            && self.sar_looks > 0.0
            && self.reference_noise >= 0.0
            && (0.0..=1.0).contains(&self.forest_fraction);
        if !ok {
            return Err(Error::Config(format!("invalid scene config {self:?}")));
        }
        Ok(())
    }
}

/// Canopy shape of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canopy {
    /// Lowest vegetation height, above the vegetation threshold.
    pub lo: f64,
    /// Height span above `lo`.
    pub span: f64,
    /// Power-law exponent; larger values put more returns near the top.
    pub shape: f64,
}

impl Canopy {
    /// `(p95, meanh, gini)` of the height distribution.
    pub fn moments(&self) -> (f64, f64, f64) {
        let k = self.shape;
        let mean_v = k / (k + 1.0);
        let meanh = self.lo + self.span * mean_v;
        let p95 = self.lo + self.span * 0.95f64.powf(1.0 / k);
        let gini = self.span * mean_v / (2.0 * k + 1.0) / meanh;
        (p95, meanh, gini)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
    /// Noise-free variables behind the imagery.
    pub truth: StructureRaster,
    /// Reference raster (truth with ALS error) and imagery.
    pub data: SceneData,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    config: SceneConfig,
}

impl SyntheticScene {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.data.save(dir)?;
        Tile::from(&self.truth).write(&dir.join("truth.fstr"))?;
        let meta = SceneMeta {
            seed: self.seed,
            config: self.config.clone(),
        };
        std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Derive an independent seed for stream `tag` of `seed` (SplitMix64).
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn box_blur(field: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; field.len()];
    let norm = 1.0 / (2 * r + 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in 0..=2 * r {
                let xx = (x + d).saturating_sub(r).min(w - 1);
                acc += field[y * w + xx];
            }
            tmp[y * w + x] = acc * norm;
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in 0..=2 * r {
                let yy = (y + d).saturating_sub(r).min(h - 1);
                acc += tmp[yy * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

/// White noise low-passed by two box-filter passes, standardized to zero
/// mean and unit variance.
pub fn smooth_field(rng: &mut impl Rng, w: usize, h: usize, radius: usize) -> Vec<f64> {
    let noise: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    let f = box_blur(&box_blur(&noise, w, h, radius), w, h, radius);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    f.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

fn squash(z: f64) -> f64 {
    1.0 / (1.0 + (-1.702 * z).exp())
}

/// Noise-free optical response to `[p95, meanh, dens, gini, cover]`. The
/// first five bands each encode one variable; the rest are mixtures.
pub fn optical_signal(v: &[f64; 5]) -> [f64; OPTICAL_BANDS] {
    let f0 = 1.0 - (-v[0] / P95_SCALE).exp();
    let f1 = 1.0 - (-v[1] / MEANH_SCALE).exp();
    let f2 = v[2];
    let f3 = 2.0 * v[3];
    let f4 = v[4];
    [
        f0,
        f1,
        f2,
        f3,
        f4,
        0.6 * f0 + 0.4 * f4,
        0.5 * f1 + 0.5 * f2,
        0.7 * f3 + 0.3 * f0,
        0.4 * f2 + 0.6 * f4,
        0.3 * f0 + 0.3 * f1 + 0.4 * f3,
        0.2 + 0.5 * f4 - 0.2 * f2,
        0.25 * (f0 + f1 + f2 + f4),
    ]
}

/// Closed-form inverse of the first five bands of [`optical_signal`].
pub fn invert_optical(bands: &[f64]) -> [f64; 5] {
    [
        -P95_SCALE * (1.0 - bands[0]).ln(),
        -MEANH_SCALE * (1.0 - bands[1]).ln(),
        bands[2],
        bands[3] / 2.0,
        bands[4],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orbit {
    Ascending,
    Descending,
}

/// Noise-free `[VH, VV]` backscatter in linear power units.
pub fn sar_signal(v: &[f64; 5], orbit: Orbit) -> [f64; SAR_BANDS_PER_ORBIT] {
    let gain = match orbit {
        Orbit::Ascending => 1.0,
        Orbit::Descending => 0.85,
    };
    let h = v[0] / SAR_HEIGHT_SCALE;
    let c = v[4];
    [
        gain * (0.006 + 0.045 * h * (0.3 + 0.7 * c)),
        gain * (0.04 + 0.05 * c + 0.015 * h),
    ]
}

fn pixel_variables(truth: &StructureRaster, i: usize) -> [f64; 5] {
    if truth.forested[i] {
        std::array::from_fn(|b| truth.bands[b][i])
    } else {
        [0.0; 5]
    }
}

/// Optical acquisition `[12, H, W]` with additive Gaussian noise.
pub fn render_optical(truth: &StructureRaster, seed: u64, noise: f64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = truth.grid.len();
    let mut data = vec![0.0f32; OPTICAL_BANDS * n];
    for i in 0..n {
        let s = optical_signal(&pixel_variables(truth, i));
        for (b, v) in s.iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            data[b * n + i] = (v + noise * e) as f32;
        }
    }
    Tensor::new(vec![OPTICAL_BANDS, truth.grid.height, truth.grid.width], data).expect("optical planes")
}

/// SAR acquisition `[2, H, W]` in dB with Gamma speckle of `looks` looks.
pub fn render_sar(truth: &StructureRaster, seed: u64, looks: f64, orbit: Orbit) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speckle = Gamma::new(looks, 1.0 / looks).expect("positive looks");
    let n = truth.grid.len();
    let mut data = vec![0.0f32; SAR_BANDS_PER_ORBIT * n];
    for i in 0..n {
        let s = sar_signal(&pixel_variables(truth, i), orbit);
        for (b, v) in s.iter().enumerate() {
            let g: f64 = speckle.sample(&mut rng);
            data[b * n + i] = (10.0 * (v * g).log10()) as f32;
        }
    }
    Tensor::new(vec![SAR_BANDS_PER_ORBIT, truth.grid.height, truth.grid.width], data).expect("SAR planes")
}

/// Noise-free variables and canopy parameters of a scene.
pub fn generate_truth(config: &SceneConfig, seed: u64) -> Result<(StructureRaster, Vec<Canopy>)> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let grid = GridSpec::new(0.0, h as f64 * config.resolution, config.resolution, w, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let fields: Vec<Vec<f64>> = (0..7)
        .map(|_| smooth_field(&mut rng, w, h, config.smoothing))
        .collect();
    let mut sorted_mask = fields[6].clone();
    sorted_mask.sort_by(f64::total_cmp);
    let cut = ((1.0 - config.forest_fraction) * (w * h) as f64) as usize;
    let threshold = if cut == 0 { f64::NEG_INFINITY } else { sorted_mask[cut - 1] };

    let mut truth = StructureRaster::empty(grid);
    let mut canopy = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let c = Canopy {
            // lo shares a component with span so tall stands start higher
            lo: 1.4 + 1.5 * squash(0.6 * fields[0][i] + 0.8 * fields[1][i]),
            span: 4.0 + 22.0 * squash(fields[0][i]),
            shape: 0.4 + 3.6 * squash(fields[2][i]),
        };
        canopy.push(c);
        if fields[6][i] <= threshold {
            continue;
        }
        let (p95, meanh, gini) = c.moments();
        let dens = 0.08 + 0.87 * squash(fields[3][i] + 0.5 * fields[0][i]);
        let cover = (dens * (1.2 + 0.6 * squash(fields[4][i]))).min(1.0);
        truth.forested[i] = true;
        for (b, v) in truth.bands.iter_mut().zip([p95, meanh, dens, gini, cover]) {
            b[i] = v;
        }
    }
    Ok((truth, canopy))
}

/// Reference raster: truth times `1 + σ·N(0, 1)`, kept inside the valid
/// variable ranges.
pub fn perturb_reference(truth: &StructureRaster, sigma: f64, seed: u64) -> StructureRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = truth.clone();
    for i in 0..truth.grid.len() {
        if !truth.forested[i] {
            continue;
        }
        let mut v: [f64; 5] = std::array::from_fn(|b| {
            let e: f64 = rng.sample(StandardNormal);
            (truth.bands[b][i] * (1.0 + sigma * e)).max(0.0)
        });
        for var in [Variable::Dens, Variable::Gini, Variable::Cover] {
            v[var.index()] = v[var.index()].min(1.0);
        }
        v[0] = v[0].max(v[1]);
        for (b, x) in out.bands.iter_mut().zip(v) {
            b[i] = x;
        }
    }
    out
}

pub fn generate_scene_with(config: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    let (truth, _) = generate_truth(config, seed)?;
    let reference = perturb_reference(&truth, config.reference_noise, sub_seed(seed, 1));
    let optical = (0..config.n_optical)
        .map(|a| render_optical(&truth, sub_seed(seed, 100 + a as u64), config.optical_noise))
        .collect();
    let sar = |orbit: Orbit, base: u64| {
        (0..config.n_sar_per_orbit)
            .map(|a| render_sar(&truth, sub_seed(seed, base + a as u64), config.sar_looks, orbit))
            .collect()
    };
    let data = SceneData {
        reference,
        optical,
        sar_asc: sar(Orbit::Ascending, 200),
        sar_desc: sar(Orbit::Descending, 300),
    };
    Ok(SyntheticScene {
        seed,
        config: config.clone(),
        truth,
        data,
    })
}

/// Scene of the given size with default noise settings.
pub fn generate_scene(seed: u64, width: usize, height: usize) -> Result<SyntheticScene> {
    let config = SceneConfig {
        width,
        height,
        ..SceneConfig::default()
    };
    generate_scene_with(&config, seed)
}

/// `n_scenes` independent scenes, scene `i` seeded with `sub_seed(seed, i)`.
pub fn generate_dataset(
    config: &SceneConfig,
    seed: u64,
    n_scenes: usize,
    split: SplitSpec,
) -> Result<(Vec<SyntheticScene>, Dataset)> {
    split.validate()?;
    if n_scenes == 0 {
        return Err(Error::InvalidInput("at least one scene is required".into()));
    }
    let scenes = (0..n_scenes)
        .into_par_iter()
        .map(|i| generate_scene_with(config, sub_seed(seed, 1000 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        scenes: scenes.iter().map(|s| s.data.clone()).collect(),
        split,
    };
    Ok((scenes, dataset))
}

/// Mean absolute pairwise difference `Σᵢ Σⱼ |vᵢ − vⱼ| / n²` of sorted values.
fn mean_abs_difference(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let s: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, v)| (2.0 * (k as f64 + 1.0) - n - 1.0) * v)
        .sum();
    2.0 * s / (n * n)
}

/// Heights of `n` vegetation returns with exactly the requested P95 and
/// MeanH, and Gini matched by bisection on the power-law exponent.
fn fit_heights(p95: f64, meanh: f64, gini: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    const ATTEMPTS: usize = 64;
    const K_RANGE: (f64, f64) = (0.1, 200.0);
    if gini == 0.0 || p95 == meanh {
        if gini != 0.0 || p95 != meanh {
            return Err(Error::Infeasible(format!(
                "gini {gini} with p95 {p95} and meanh {meanh}"
            )));
        }
        return Ok(vec![meanh; n]);
    }
    if n < 2 {
        return Err(Error::Infeasible("a spread of heights needs two vegetation returns".into()));
    }
    let target = 2.0 * meanh * gini / (p95 - meanh);
    for _ in 0..ATTEMPTS {
        let mut u: Vec<f64> = (0..n).map(|i| (i as f64 + rng.random::<f64>()) / n as f64).collect();
        u.iter_mut().for_each(|x| *x = x.max(1e-12));
        let stats = |k: f64| {
            let v: Vec<f64> = u.iter().map(|x| x.powf(1.0 / k)).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let q = quantile_sorted(&v, 0.95).expect("nonempty");
            (v, mean, q)
        };
        let ratio = |k: f64| {
            let (v, mean, q) = stats(k);
            mean_abs_difference(&v) / (q - mean)
        };
        let (mut lo, mut hi) = (K_RANGE.0.ln(), K_RANGE.1.ln());
        if !(ratio(lo.exp()) <= target && target <= ratio(hi.exp())) {
            continue;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if ratio(mid.exp()) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (v, mean, q) = stats((0.5 * (lo + hi)).exp());
        let b = (p95 - meanh) / (q - mean);
        let a = meanh - b * mean;
        if a + b * v[0] > VEGETATION_THRESHOLD {
            let mut dz: Vec<f64> = v.iter().map(|x| a + b * x).collect();
            dz.shuffle(rng);
            return Ok(dz);
        }
    }
    Err(Error::Infeasible(format!(
        "no height sample above {VEGETATION_THRESHOLD} m matches p95 {p95}, meanh {meanh}, gini {gini}"
    )))
}

/// Returns over one cell whose derived variables reproduce `vars`
/// (`[p95, meanh, dens, gini, cover]`) at `density` returns per m².
///
/// Cover is realized exactly as `round(100·cover)` occupied 1 m sub-cells,
/// density as `round(dens·n)` vegetation returns, and P95/MeanH exactly up
/// to floating point; Gini up to the bisection tolerance.
pub fn synthesize_point_cloud(
    vars: &[f64; 5],
    footprint: CellFootprint,
    density: f64,
    seed: u64,
) -> Result<Vec<Return>> {
    let [p95, meanh, dens, gini, cover] = *vars;
    if vars.iter().any(|v| !v.is_finite()) || !(density > 0.0) {
        return Err(Error::InvalidInput(format!("invalid request {vars:?} at density {density}")));
    }
    let unit = 0.0..=1.0;
    if !(unit.contains(&dens) && unit.contains(&gini) && unit.contains(&cover)) {
        return Err(Error::InvalidInput(format!("fractions out of range in {vars:?}")));
    }
    let side = (footprint.size / COVER_RESOLUTION).round() as usize;
    let n_sub = side * side;
    let n_total = (density * footprint.size * footprint.size).round() as usize;
    let n_veg = (dens * n_total as f64).round() as usize;
    let occupied = (cover * n_sub as f64).round() as usize;
    if (occupied == 0) != (n_veg == 0) {
        return Err(Error::Infeasible(format!(
            "cover {cover} with {n_veg} vegetation returns"
        )));
    }
    if n_veg < occupied {
        return Err(Error::Infeasible(format!(
            "{n_veg} vegetation returns cannot occupy {occupied} sub-cells"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heights = if n_veg > 0 {
        if !(p95 >= meanh && meanh > VEGETATION_THRESHOLD) {
            return Err(Error::Infeasible(format!(
                "vegetation heights need p95 >= meanh > {VEGETATION_THRESHOLD}, got {p95}, {meanh}"
            )));
        }
        fit_heights(p95, meanh, gini, n_veg, &mut rng)?
    } else {
        Vec::new()
    };
    let cells = sample(&mut rng, n_sub, occupied).into_vec();
    let inside = |cell: usize, rng: &mut ChaCha8Rng| {
        let (cx, cy) = ((cell % side) as f64, (cell / side) as f64);
        (
            footprint.x_min + (cx + rng.random_range(0.01..0.99)) * COVER_RESOLUTION,
            footprint.y_min + (cy + rng.random_range(0.01..0.99)) * COVER_RESOLUTION,
        )
    };
    let mut out = Vec::with_capacity(n_total);
    for (j, dz) in heights.into_iter().enumerate() {
        let cell = if j < occupied {
            cells[j]
        } else {
            cells[rng.random_range(0..occupied)]
        };
        let (x, y) = inside(cell, &mut rng);
        out.push(Return::new(x, y, dz));
    }
    for _ in n_veg..n_total {
        let (x, y) = inside(rng.random_range(0..n_sub), &mut rng);
        out.push(Return::new(x, y, rng.random_range(0.0..VEGETATION_THRESHOLD)));
    }
    Ok(out)
}

/// Point cloud over a whole raster: forested cells reproduce their
/// variables, other cells hold ground returns only.
pub fn synthesize_scene_cloud(truth: &StructureRaster, density: f64, seed: u64) -> Result<PointCloud> {
    let grid = truth.grid;
    let cells = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let fp = grid.footprint(i / grid.width, i % grid.width);
            let vars = if truth.forested[i] {
                pixel_variables(truth, i)
            } else {
                [0.0; 5]
            };
            synthesize_point_cloud(&vars, fp, density, sub_seed(seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointCloud {
        points: cells.into_iter().flatten().collect(),
    })
}
