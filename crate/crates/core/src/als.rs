//! Structural variables from height-normalized ALS point clouds.
//!
//! Heights above ground (`dz`) are split into vegetation returns
//! (`dz > 1.3 m`) and the rest. Per raster cell the five variables are the
//! 95th height percentile and mean height of vegetation returns, the share
//! of vegetation returns among all returns, the Gini coefficient of
//! vegetation heights, and the fraction of 1 m sub-cells holding at least
//! one vegetation return.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VEGETATION_THRESHOLD: f64 = 1.3;
pub const NODATA: f64 = -9999.0;
/// Side length of the occupancy sub-cells used for canopy cover.
pub const COVER_RESOLUTION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variable {
    P95,
    MeanH,
    Dens,
    Gini,
    Cover,
}

impl Variable {
    pub const ALL: [Variable; 5] = [
        Variable::P95,
        Variable::MeanH,
        Variable::Dens,
        Variable::Gini,
        Variable::Cover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::P95 => "p95",
            Variable::MeanH => "meanh",
            Variable::Dens => "dens",
            Variable::Gini => "gini",
            Variable::Cover => "cover",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variable::P95 => "P95",
            Variable::MeanH => "MeanH",
            Variable::Dens => "Dens",
            Variable::Gini => "Gini",
            Variable::Cover => "Cover",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Variable::P95 | Variable::MeanH => "m",
            Variable::Dens | Variable::Cover => "fraction",
            Variable::Gini => "index",
        }
    }

    /// Heights are unbounded above; the others live in `[0, 1]`.
    pub fn is_fraction(self) -> bool {
        !matches!(self, Variable::P95 | Variable::MeanH)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Return {
    pub x: f64,
    pub y: f64,
    pub dz: f64,
    pub is_vegetation: bool,
}

impl Return {
    pub fn new(x: f64, y: f64, dz: f64) -> Self {
        Self {
            x,
            y,
            dz,
            is_vegetation: is_vegetation(dz),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Return>,
}

impl PointCloud {
    /// Classify `(x, y, dz)` triples; non-finite heights are rejected.
    pub fn from_heights(points: impl IntoIterator<Item = (f64, f64, f64)>) -> Result<Self> {
        let points = points
            .into_iter()
            .map(|(x, y, dz)| {
                if dz.is_finite() && x.is_finite() && y.is_finite() {
                    Ok(Return::new(x, y, dz))
                } else {
                    Err(Error::InvalidInput(format!(
                        "non-finite return ({x}, {y}, {dz})"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn vegetation(&self) -> impl Iterator<Item = &Return> {
        self.points.iter().filter(|p| p.is_vegetation)
    }
}

pub fn is_vegetation(dz: f64) -> bool {
    dz > VEGETATION_THRESHOLD
}

/// Terrain elevation, used to turn absolute heights into `dz`.
pub trait GroundModel {
    fn elevation(&self, x: f64, y: f64) -> Option<f64>;
}

/// Horizontal terrain at a fixed elevation.
pub struct FlatGround(pub f64);

impl GroundModel for FlatGround {
    fn elevation(&self, _x: f64, _y: f64) -> Option<f64> {
        Some(self.0)
    }
}

/// Gridded terrain model, bilinearly interpolated between cell centers and
/// defined over the grid footprint.
pub struct GroundRaster {
    pub grid: GridSpec,
    pub elevation: Vec<f64>,
}

impl GroundModel for GroundRaster {
    fn elevation(&self, x: f64, y: f64) -> Option<f64> {
        self.grid.cell_of(x, y)?;
        sample_bilinear(&self.grid, &self.elevation, x, y, None)
    }
}

pub fn normalize_heights(
    points: &[(f64, f64, f64)],
    ground: &dyn GroundModel,
) -> Result<PointCloud> {
    let heights = points
        .iter()
        .map(|&(x, y, z)| {
            let g = ground.elevation(x, y).ok_or_else(|| {
                Error::InvalidInput(format!("point ({x}, {y}) lies outside the ground model"))
            })?;
            Ok((x, y, z - g))
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloud::from_heights(heights)
}

/// Quantile of ascending `sorted` data by linear interpolation between
/// closest ranks: position `1 + (n − 1)·q` in 1-based order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn compute_p95(veg_dz: &[f64]) -> Option<f64> {
    quantile_sorted(&sorted_copy(veg_dz), 0.95)
}

pub fn compute_meanh(veg_dz: &[f64]) -> Option<f64> {
    if veg_dz.is_empty() {
        return None;
    }
    Some(veg_dz.iter().sum::<f64>() / veg_dz.len() as f64)
}

pub fn compute_dens(n_vegetation: usize, n_total: usize) -> Option<f64> {
    (n_total > 0).then(|| n_vegetation as f64 / n_total as f64)
}

/// Half the relative mean absolute difference, `Σᵢ Σⱼ |xᵢ − xⱼ| / (2 n² x̄)`.
///
/// Evaluated in `O(n log n)` through the sorted identity
/// `Σᵢ Σⱼ |xᵢ − xⱼ| = 2 Σₖ (2k − n − 1) x₍ₖ₎`.
pub fn compute_gini(veg_dz: &[f64]) -> Option<f64> {
    let n = veg_dz.len();
    let mean = compute_meanh(veg_dz)?;
    if mean <= 0.0 {
        return None;
    }
    let sorted = sorted_copy(veg_dz);
    let nf = n as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| (2.0 * (k as f64 + 1.0) - nf - 1.0) * x)
        .sum();
    Some((weighted / (nf * nf * mean)).max(0.0))
}

/// Axis-aligned square footprint of one raster cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellFootprint {
    pub x_min: f64,
    pub y_min: f64,
    pub size: f64,
}

/// Fraction of `COVER_RESOLUTION`-sized sub-cells holding at least one
/// vegetation return. Returns outside the footprint are ignored.
pub fn compute_cover(veg_xy: &[(f64, f64)], footprint: CellFootprint) -> f64 {
    let n = (footprint.size / COVER_RESOLUTION).round().max(1.0) as usize;
    let mut occupied = vec![false; n * n];
    for &(x, y) in veg_xy {
        let cx = ((x - footprint.x_min) / COVER_RESOLUTION).floor();
        let cy = ((y - footprint.y_min) / COVER_RESOLUTION).floor();
        if cx < 0.0 || cy < 0.0 || cx >= n as f64 || cy >= n as f64 {
            continue;
        }
        occupied[cy as usize * n + cx as usize] = true;
    }
    occupied.iter().filter(|&&o| o).count() as f64 / (n * n) as f64
}

/// Raster geometry. `(x0, y0)` is the north-west corner; rows run
/// southwards. Cells are half-open in increasing coordinates, so a point on
/// a shared edge belongs to the cell with the higher coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x0: f64,
    pub y0: f64,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(x0: f64, y0: f64, resolution: f64, width: usize, height: usize) -> Result<Self> {
        let g = Self {
            x0,
            y0,
            resolution,
            width,
            height,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.resolution > 0.0) {
            return Err(Error::InvalidInput(format!(
                "degenerate grid {}x{} at resolution {}",
                self.width, self.height, self.resolution
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn y_south(&self) -> f64 {
        self.y0 - self.height as f64 * self.resolution
    }

    /// `(row, col)` of the cell containing `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.x0) / self.resolution).floor();
        let from_south = ((y - self.y_south()) / self.resolution).floor();
        if col < 0.0 || from_south < 0.0 || col >= self.width as f64 || from_south >= self.height as f64 {
            return None;
        }
        Some((self.height - 1 - from_south as usize, col as usize))
    }

    pub fn footprint(&self, row: usize, col: usize) -> CellFootprint {
        CellFootprint {
            x_min: self.x0 + col as f64 * self.resolution,
            y_min: self.y0 - (row + 1) as f64 * self.resolution,
            size: self.resolution,
        }
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x0 + (col as f64 + 0.5) * self.resolution,
            self.y0 - (row as f64 + 0.5) * self.resolution,
        )
    }
}

/// Five structural variables on a grid, plus the forested mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureRaster {
    pub grid: GridSpec,
    /// One row-major band per [`Variable`], `NODATA` where invalid.
    pub bands: [Vec<f64>; 5],
    pub forested: Vec<bool>,
}

impl StructureRaster {
    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            bands: std::array::from_fn(|_| vec![NODATA; n]),
            forested: vec![false; n],
        }
    }

    pub fn band(&self, v: Variable) -> &[f64] {
        &self.bands[v.index()]
    }

    pub fn value(&self, v: Variable, row: usize, col: usize) -> f64 {
        self.bands[v.index()][row * self.grid.width + col]
    }

    /// Check range invariants over valid cells.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.grid.len() {
            let vals: Vec<f64> = self.bands.iter().map(|b| b[i]).collect();
            if !self.forested[i] {
                if vals.iter().any(|&v| v != NODATA) {
                    return Err(Error::InvalidInput(format!(
                        "cell {i} is unforested but carries values"
                    )));
                }
                continue;
            }
            let [p95, meanh, dens, gini, cover] = vals[..] else {
                unreachable!()
            };
            let frac_ok = |v: f64| (0.0..=1.0).contains(&v);
            if !(frac_ok(dens) && frac_ok(gini) && frac_ok(cover) && meanh >= 0.0 && p95 >= meanh) {
                return Err(Error::InvalidInput(format!(
                    "cell {i} violates variable ranges: {vals:?}"
                )));
            }
        }
        Ok(())
    }
}

/// All five variables of one cell, or `None` without vegetation returns.
pub fn cell_variables(returns: &[Return], footprint: CellFootprint) -> Option<[f64; 5]> {
    let veg: Vec<&Return> = returns.iter().filter(|r| r.is_vegetation).collect();
    if veg.is_empty() {
        return None;
    }
    let dz: Vec<f64> = veg.iter().map(|r| r.dz).collect();
    let xy: Vec<(f64, f64)> = veg.iter().map(|r| (r.x, r.y)).collect();
    Some([
        compute_p95(&dz)?,
        compute_meanh(&dz)?,
        compute_dens(veg.len(), returns.len())?,
        compute_gini(&dz)?,
        compute_cover(&xy, footprint),
    ])
}

/// Assign returns to cells and derive the variables per cell. A cell is
/// forested iff it holds a vegetation return and `external_mask` (when
/// given) is true there.
pub fn rasterize_variables(
    cloud: &PointCloud,
    grid: &GridSpec,
    external_mask: Option<&[bool]>,
) -> Result<StructureRaster> {
    grid.validate()?;
    if let Some(m) = external_mask {
        if m.len() != grid.len() {
            return Err(Error::Shape(format!(
                "external mask has {} cells, grid {}",
                m.len(),
                grid.len()
            )));
        }
    }
    let mut buckets: Vec<Vec<Return>> = vec![Vec::new(); grid.len()];
    for p in &cloud.points {
        let (r, c) = grid.cell_of(p.x, p.y).ok_or_else(|| {
            Error::InvalidInput(format!("return ({}, {}) lies outside the grid", p.x, p.y))
        })?;
        buckets[r * grid.width + c].push(*p);
    }
    let cells: Vec<Option<[f64; 5]>> = buckets
        .par_iter()
        .enumerate()
        .map(|(i, returns)| {
            if external_mask.is_some_and(|m| !m[i]) {
                return None;
            }
            cell_variables(returns, grid.footprint(i / grid.width, i % grid.width))
        })
        .collect();
    let mut out = StructureRaster::empty(*grid);
    for (i, cell) in cells.into_iter().enumerate() {
        if let Some(vals) = cell {
            out.forested[i] = true;
            for (b, v) in out.bands.iter_mut().zip(vals) {
                b[i] = v;
            }
        }
    }
    Ok(out)
}

/// Bilinear sample of a band at `(x, y)` from cell-center values, clamping
/// to the edge outside the outermost centers. Neighbours carrying nonzero
/// weight that are `nodata` make the result `None`.
fn sample_bilinear(grid: &GridSpec, band: &[f64], x: f64, y: f64, nodata: Option<f64>) -> Option<f64> {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let fx = snap((x - grid.x0) / grid.resolution - 0.5)
        .clamp(0.0, (grid.width - 1) as f64);
    let fy = snap((grid.y0 - y) / grid.resolution - 0.5)
        .clamp(0.0, (grid.height - 1) as f64);
    let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(grid.width - 1), (r0 + 1).min(grid.height - 1));
    let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
    let taps = [
        (r0, c0, (1.0 - tx) * (1.0 - ty)),
        (r0, c1, tx * (1.0 - ty)),
        (r1, c0, (1.0 - tx) * ty),
        (r1, c1, tx * ty),
    ];
    let mut acc = 0.0;
    for (r, c, w) in taps {
        if w == 0.0 {
            continue;
        }
        let v = band[r * grid.width + c];
        if nodata.is_some_and(|nd| v == nd) {
            return None;
        }
        acc += w * v;
    }
    Some(acc)
}

/// Bilinear resampling onto `target`, evaluated at target cell centers.
pub fn bilinear_resample(raster: &StructureRaster, target: &GridSpec) -> Result<StructureRaster> {
    target.validate()?;
    if *target == raster.grid {
        return Ok(raster.clone());
    }
    let mut out = StructureRaster::empty(*target);
    for row in 0..target.height {
        for col in 0..target.width {
            let (x, y) = target.center(row, col);
            let i = row * target.width + col;
            let vals: Option<Vec<f64>> = raster
                .bands
                .iter()
                .map(|b| sample_bilinear(&raster.grid, b, x, y, Some(NODATA)))
                .collect();
            if let Some(vals) = vals {
                out.forested[i] = true;
                for (b, v) in out.bands.iter_mut().zip(vals) {
                    b[i] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Points read from CSV: absolute heights need a ground model, normalized
/// heights are used as-is.
pub enum PointsInput {
    Absolute(Vec<(f64, f64, f64)>),
    Normalized(PointCloud),
}

/// Read a CSV with header `x,y,z` or `x,y,dz`.
pub fn read_points_csv(path: &Path) -> Result<PointsInput> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_lowercase).collect();
    let normalized = match headers.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["x", "y", "z"] => false,
        ["x", "y", "dz"] => true,
        _ => {
            return Err(Error::Format(format!(
                "point CSV header must be x,y,z or x,y,dz, got {}",
                headers.join(",")
            )))
        }
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("bad numeric field in record {:?}", rec.position())))
        };
        rows.push((parse(0)?, parse(1)?, parse(2)?));
    }
    Ok(if normalized {
        PointsInput::Normalized(PointCloud::from_heights(rows)?)
    } else {
        PointsInput::Absolute(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vegetation_threshold_is_strict() {
        let pts = [(0.0, 0.0, 10.0), (0.0, 0.0, 9.0), (0.0, 0.0, 9.3)];
        let cloud = normalize_heights(&pts, &FlatGround(8.0)).unwrap();
        assert_eq!(cloud.points[0].dz, 2.0);
        assert!(cloud.points[0].is_vegetation);
        assert_eq!(cloud.points[1].dz, 1.0);
        assert!(!cloud.points[1].is_vegetation);
        assert!(!is_vegetation(1.3));
        assert!(is_vegetation(1.3 + 1e-12));
    }

    #[test]
    fn ground_lookup_outside_model_fails() {
        let grid = GridSpec::new(0.0, 10.0, 10.0, 1, 1).unwrap();
        let dtm = GroundRaster {
            grid,
            elevation: vec![3.0],
        };
        assert!(normalize_heights(&[(5.0, 5.0, 6.0)], &dtm).is_ok());
        assert!(normalize_heights(&[(15.0, 5.0, 6.0)], &dtm).is_err());
    }

    #[test]
    fn p95_examples() {
        assert_eq!(compute_p95(&[7.0; 13]), Some(7.0));
        assert_eq!(compute_p95(&[4.2]), Some(4.2));
        let seq: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((compute_p95(&seq).unwrap() - 95.05).abs() < 1e-12);
        assert_eq!(compute_p95(&[]), None);
    }

    #[test]
    fn meanh_and_dens_examples() {
        assert_eq!(compute_meanh(&[2.0, 4.0]), Some(3.0));
        assert_eq!(compute_meanh(&[5.5; 4]), Some(5.5));
        assert_eq!(compute_meanh(&[]), None);
        assert_eq!(compute_dens(10, 10), Some(1.0));
        assert_eq!(compute_dens(0, 10), Some(0.0));
        assert_eq!(compute_dens(3, 8), Some(0.375));
        assert_eq!(compute_dens(0, 0), None);
    }

    #[test]
    fn meanh_of_uniform_sample() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..1000).map(|_| rng.random_range(2.0..10.0)).collect();
        // σ of the mean: (8/√12)/√1000
        let sigma = 8.0 / 12f64.sqrt() / 1000f64.sqrt();
        assert!((compute_meanh(&v).unwrap() - 6.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn gini_examples() {
        assert_eq!(compute_gini(&[3.0; 9]), Some(0.0));
        assert_eq!(compute_gini(&[4.2]), Some(0.0));
        assert!((compute_gini(&[2.0, 4.0]).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(compute_gini(&[]), None);
    }

    #[test]
    fn cover_examples() {
        let fp = CellFootprint {
            x_min: 100.0,
            y_min: 200.0,
            size: 10.0,
        };
        assert_eq!(compute_cover(&[], fp), 0.0);
        let all: Vec<(f64, f64)> = (0..100)
            .map(|i| (100.5 + (i % 10) as f64, 200.5 + (i / 10) as f64))
            .collect();
        assert_eq!(compute_cover(&all, fp), 1.0);
        // 37 distinct sub-cells, some hit twice
        let mut pts: Vec<(f64, f64)> = all[..37].to_vec();
        pts.extend_from_slice(&all[..5]);
        assert_eq!(compute_cover(&pts, fp), 0.37);
    }

    #[test]
    fn boundary_points_go_to_higher_cell() {
        let grid = GridSpec::new(0.0, 20.0, 10.0, 2, 2).unwrap();
        // x = 10 is the edge between columns 0 and 1
        assert_eq!(grid.cell_of(10.0, 15.0), Some((0, 1)));
        // y = 10 is the edge between the southern row 1 and northern row 0
        assert_eq!(grid.cell_of(5.0, 10.0), Some((0, 0)));
        assert_eq!(grid.cell_of(5.0, 9.999), Some((1, 0)));
        assert_eq!(grid.cell_of(20.0, 5.0), None);
        assert_eq!(grid.cell_of(5.0, 20.0), None);
    }

    #[test]
    fn low_cloud_yields_no_forest() {
        let grid = GridSpec::new(0.0, 20.0, 10.0, 2, 2).unwrap();
        let cloud = PointCloud::from_heights((0..40).map(|i| {
            (i as f64 % 20.0, (i * 7) as f64 % 20.0, 0.1 * (i % 13) as f64)
        }))
        .unwrap();
        let r = rasterize_variables(&cloud, &grid, None).unwrap();
        assert!(r.forested.iter().all(|&f| !f));
        assert!(r.bands.iter().all(|b| b.iter().all(|&v| v == NODATA)));
    }

    #[test]
    fn external_mask_restricts_forest() {
        let grid = GridSpec::new(0.0, 10.0, 10.0, 2, 1).unwrap();
        let cloud = PointCloud::from_heights([(2.0, 5.0, 8.0), (12.0, 5.0, 9.0)]).unwrap();
        let r = rasterize_variables(&cloud, &grid, Some(&[true, false])).unwrap();
        assert_eq!(r.forested, vec![true, false]);
        assert_eq!(r.value(Variable::P95, 0, 0), 8.0);
        assert_eq!(r.value(Variable::P95, 0, 1), NODATA);
        assert!(rasterize_variables(&cloud, &GridSpec { width: 0, ..grid }, None).is_err());
    }

    #[test]
    fn resample_identity_constant_and_ramp() {
        let grid = GridSpec::new(0.0, 40.0, 10.0, 4, 4).unwrap();
        let mut r = StructureRaster::empty(grid);
        for i in 0..16 {
            r.forested[i] = true;
            let col = (i % 4) as f64;
            r.bands[0][i] = 3.0 * col + 1.0;
            r.bands[1][i] = 2.0;
            r.bands[2][i] = 0.5;
            r.bands[3][i] = 0.25;
            r.bands[4][i] = 0.75;
        }
        assert_eq!(bilinear_resample(&r, &grid).unwrap(), r);
        // half-cell shift east: centers move to col + 0.5
        let shifted = GridSpec { x0: 5.0, width: 3, ..grid };
        let s = bilinear_resample(&r, &shifted).unwrap();
        for row in 0..4 {
            for col in 0..3 {
                let expect = 3.0 * (col as f64 + 0.5) + 1.0;
                assert!((s.value(Variable::P95, row, col) - expect).abs() < 1e-12);
                assert_eq!(s.value(Variable::MeanH, row, col), 2.0);
            }
        }
    }

    #[test]
    fn resample_propagates_nodata() {
        let grid = GridSpec::new(0.0, 20.0, 10.0, 2, 2).unwrap();
        let mut r = StructureRaster::empty(grid);
        for i in 0..3 {
            r.forested[i] = true;
            for b in r.bands.iter_mut() {
                b[i] = 0.5;
            }
        }
        let shifted = GridSpec { x0: 5.0, y0: 15.0, width: 1, height: 1, ..grid };
        let s = bilinear_resample(&r, &shifted).unwrap();
        assert!(!s.forested[0]);
        assert_eq!(s.bands[0][0], NODATA);
    }
}
