//! Co-registered scenes, the stripe split, and their directory layout.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::als::{GridSpec, StructureRaster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tile::Tile;

pub const OPTICAL_BANDS: usize = 12;
/// VH and VV backscatter of one orbit direction.
pub const SAR_BANDS_PER_ORBIT: usize = 2;
pub const OPTICAL_BAND_NAMES: [&str; OPTICAL_BANDS] = [
    "b01", "b02", "b03", "b04", "b05", "b06", "b07", "b08", "b09", "b10", "b11", "b12",
];
pub const SAR_BAND_NAMES: [&str; SAR_BANDS_PER_ORBIT] = ["vh", "vv"];

/// One scene: reference structure raster plus every acquisition over it.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub reference: StructureRaster,
    /// `[12, H, W]` per optical acquisition.
    pub optical: Vec<Tensor<f32>>,
    /// `[2, H, W]` per ascending-orbit acquisition.
    pub sar_asc: Vec<Tensor<f32>>,
    /// `[2, H, W]` per descending-orbit acquisition.
    pub sar_desc: Vec<Tensor<f32>>,
}

impl SceneData {
    pub fn grid(&self) -> &GridSpec {
        &self.reference.grid
    }

    pub fn height(&self) -> usize {
        self.reference.grid.height
    }

    pub fn width(&self) -> usize {
        self.reference.grid.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.optical.is_empty() || self.sar_asc.is_empty() || self.sar_desc.is_empty() {
            return Err(Error::InvalidInput(
                "a scene needs at least one optical, ascending and descending acquisition".into(),
            ));
        }
        let check = |imgs: &[Tensor<f32>], c: usize, what: &str| -> Result<()> {
            for t in imgs {
                if t.shape() != [c, h, w] {
                    return Err(Error::Shape(format!(
                        "{what} acquisition {:?} does not match [{c}, {h}, {w}]",
                        t.shape()
                    )));
                }
            }
            Ok(())
        };
        check(&self.optical, OPTICAL_BANDS, "optical")?;
        check(&self.sar_asc, SAR_BANDS_PER_ORBIT, "ascending SAR")?;
        check(&self.sar_desc, SAR_BANDS_PER_ORBIT, "descending SAR")
    }

    /// The scene restricted to `rows`, with the grid origin moved to match.
    pub fn crop_rows(&self, rows: Range<usize>) -> Result<SceneData> {
        if rows.start >= rows.end || rows.end > self.height() {
            return Err(Error::InvalidInput(format!(
                "row range {rows:?} outside a scene of height {}",
                self.height()
            )));
        }
        let w = self.width();
        let g = self.grid();
        let grid = GridSpec {
            y0: g.y0 - rows.start as f64 * g.resolution,
            height: rows.len(),
            ..*g
        };
        let cells = rows.start * w..rows.end * w;
        let mut reference = StructureRaster::empty(grid);
        for (dst, src) in reference.bands.iter_mut().zip(&self.reference.bands) {
            dst.copy_from_slice(&src[cells.clone()]);
        }
        reference.forested.copy_from_slice(&self.reference.forested[cells]);
        let crop = |t: &Tensor<f32>| {
            let c = t.shape()[0];
            let plane = self.height() * w;
            let mut data = Vec::with_capacity(c * rows.len() * w);
            for ci in 0..c {
                data.extend_from_slice(&t.data()[ci * plane + rows.start * w..ci * plane + rows.end * w]);
            }
            Tensor::new(vec![c, rows.len(), w], data).expect("cropped planes")
        };
        Ok(SceneData {
            reference,
            optical: self.optical.iter().map(crop).collect(),
            sar_asc: self.sar_asc.iter().map(crop).collect(),
            sar_desc: self.sar_desc.iter().map(crop).collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        Tile::from(&self.reference).write(&dir.join("reference.fstr"))?;
        let grid = self.grid();
        let groups: [(&str, &[Tensor<f32>], &[&str], &str); 3] = [
            ("optical", &self.optical, &OPTICAL_BAND_NAMES, "reflectance"),
            ("sar_asc", &self.sar_asc, &SAR_BAND_NAMES, "dB"),
            ("sar_desc", &self.sar_desc, &SAR_BAND_NAMES, "dB"),
        ];
        for (prefix, imgs, names, unit) in groups {
            for (i, t) in imgs.iter().enumerate() {
                Tile::from_tensor(grid, t, names, unit)?.write(&dir.join(format!("{prefix}_{i:02}.fstr")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SceneData> {
        let reference = StructureRaster::try_from(&Tile::read(&dir.join("reference.fstr"))?)?;
        let read_group = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            let mut out = Vec::new();
            loop {
                let p = dir.join(format!("{prefix}_{:02}.fstr", out.len()));
                if !p.exists() {
                    return Ok(out);
                }
                let tile = Tile::read(&p)?;
                if tile.grid() != reference.grid {
                    return Err(Error::Shape(format!("{} is not aligned with the reference", p.display())));
                }
                out.push(tile.to_tensor());
            }
        };
        let scene = SceneData {
            optical: read_group("optical")?,
            sar_asc: read_group("sar_asc")?,
            sar_desc: read_group("sar_desc")?,
            reference,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Horizontal-stripe split: each stripe gives its northern rows to
/// training, the next rows to validation and the southern rows to test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub stripe_height: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    /// 900-pixel stripes split 540/180/180.
    pub fn full_scale() -> Self {
        Self {
            stripe_height: 900,
            train: 540,
            val: 180,
            test: 180,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stripe_height == 0 || self.train + self.val + self.test != self.stripe_height {
            return Err(Error::Config(format!(
                "split {}/{}/{} does not fill stripes of {} rows",
                self.train, self.val, self.test, self.stripe_height
            )));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    /// 90-pixel stripes split 54/18/18.
    fn default() -> Self {
        Self {
            stripe_height: 90,
            train: 54,
            val: 18,
            test: 18,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s}"))),
        }
    }
}

/// Row ranges of each split, in north-to-south order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSplits {
    pub train: Vec<Range<usize>>,
    pub val: Vec<Range<usize>>,
    pub test: Vec<Range<usize>>,
}

impl RowSplits {
    pub fn ranges(&self, split: Split) -> &[Range<usize>] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, row: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.ranges(s).iter().any(|r| r.contains(&row)))
    }
}

/// Assign the rows of a scene of `height` rows to the three splits. A
/// trailing partial stripe is divided in the same proportions.
pub fn split_dataset(height: usize, spec: &SplitSpec) -> Result<RowSplits> {
    spec.validate()?;
    let mut out = RowSplits::default();
    let mut push = |start: usize, lens: [usize; 3]| {
        let mut s = start;
        for (dst, len) in [&mut out.train, &mut out.val, &mut out.test].into_iter().zip(lens) {
            if len > 0 {
                dst.push(s..s + len);
            }
            s += len;
        }
    };
    let full = height / spec.stripe_height;
    for i in 0..full {
        push(i * spec.stripe_height, [spec.train, spec.val, spec.test]);
    }
    let rest = height - full * spec.stripe_height;
    if rest > 0 {
        let share = |n: usize| (rest as f64 * n as f64 / spec.stripe_height as f64).round() as usize;
        let train = share(spec.train).min(rest);
        let val = share(spec.val).min(rest - train);
        push(full * spec.stripe_height, [train, val, rest - train - val]);
    }
    Ok(out)
}

/// A set of scenes sharing one split specification.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneData>,
    pub split: SplitSpec,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    scenes: Vec<String>,
    split: SplitSpec,
}

impl Dataset {
    pub fn row_splits(&self, scene: usize) -> Result<RowSplits> {
        split_dataset(self.scenes[scene].height(), &self.split)
    }

    /// Scene directories `scene_000`, … plus `dataset.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (i, s) in self.scenes.iter().enumerate() {
            let name = format!("scene_{i:03}");
            s.save(&dir.join(&name))?;
            names.push(name);
        }
        let index = DatasetIndex {
            scenes: names,
            split: self.split,
        };
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
        index.split.validate()?;
        let scenes = index
            .scenes
            .iter()
            .map(|n| SceneData::load(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        if scenes.is_empty() {
            return Err(Error::Empty("dataset has no scenes".into()));
        }
        Ok(Dataset {
            scenes,
            split: index.split,
        })
    }
}
