//! On-disk raster tiles.
//!
//! Layout: the five magic bytes `FSTR1`, a little-endian `u32` holding the
//! byte length of the JSON header, the header itself, planar band data as
//! little-endian `f32`, and, when the header says so, one mask byte per cell.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::als::{GridSpec, StructureRaster, Variable, NODATA};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "FSTR1";
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandInfo {
    pub name: String,
    pub unit: String,
    pub nodata: Option<f64>,
}

impl BandInfo {
    pub fn new(name: impl Into<String>, unit: impl Into<String>, nodata: Option<f64>) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
            nodata,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileHeader {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// North-west corner.
    pub origin: [f64; 2],
    pub dtype: String,
    pub bands: Vec<BandInfo>,
    pub has_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub header: TileHeader,
    /// Row-major planes, one per entry of `header.bands`.
    pub bands: Vec<Vec<f32>>,
    pub mask: Option<Vec<bool>>,
}

impl Tile {
    pub fn new(grid: &GridSpec, bands: Vec<(BandInfo, Vec<f32>)>, mask: Option<Vec<bool>>) -> Result<Self> {
        let n = grid.len();
        if let Some((b, _)) = bands.iter().find(|(_, v)| v.len() != n) {
            return Err(Error::Shape(format!("band {} does not have {n} cells", b.name)));
        }
        if mask.as_ref().is_some_and(|m| m.len() != n) {
            return Err(Error::Shape(format!("mask does not have {n} cells")));
        }
        let (infos, planes) = bands.into_iter().unzip();
        Ok(Self {
            header: TileHeader {
                magic: MAGIC.into(),
                width: grid.width,
                height: grid.height,
                resolution: grid.resolution,
                origin: [grid.x0, grid.y0],
                dtype: DTYPE.into(),
                bands: infos,
                has_mask: mask.is_some(),
            },
            bands: planes,
            mask,
        })
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            x0: self.header.origin[0],
            y0: self.header.origin[1],
            resolution: self.header.resolution,
            width: self.header.width,
            height: self.header.height,
        }
    }

    pub fn band(&self, name: &str) -> Option<&[f32]> {
        self.header
            .bands
            .iter()
            .position(|b| b.name == name)
            .map(|i| self.bands[i].as_slice())
    }

    /// All bands as a `[C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.bands.concat();
        Tensor::new(
            vec![self.bands.len(), self.header.height, self.header.width],
            data,
        )
        .expect("tile planes match the header")
    }

    /// `[C, H, W]` tensor as an unmasked tile with the given band names.
    pub fn from_tensor(grid: &GridSpec, t: &Tensor<f32>, names: &[&str], unit: &str) -> Result<Self> {
        let [c, h, w] = t.shape()[..] else {
            return Err(Error::Shape(format!("expected [C, H, W], got {:?}", t.shape())));
        };
        if (h, w) != (grid.height, grid.width) || names.len() != c {
            return Err(Error::Shape(format!(
                "tensor {:?} does not fit a {}x{} grid with {} bands",
                t.shape(),
                grid.height,
                grid.width,
                names.len()
            )));
        }
        let bands = names
            .iter()
            .zip(t.data().chunks(h * w))
            .map(|(n, p)| (BandInfo::new(*n, unit, None), p.to_vec()))
            .collect();
        Self::new(grid, bands, None)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.header.width * self.header.height;
        let mut out = Vec::with_capacity(9 + header.len() + self.bands.len() * n * 4 + n);
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for band in &self.bands {
            for v in band {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(mask) = &self.mask {
            out.extend(mask.iter().map(|&m| m as u8));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(msg.to_string());
        if bytes.len() < 9 || &bytes[..5] != MAGIC.as_bytes() {
            return Err(fail("missing FSTR1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes.get(9..9 + hlen).ok_or_else(|| fail("truncated header"))?;
        let header: TileHeader =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad tile header: {e}")))?;
        if header.magic != MAGIC || header.dtype != DTYPE {
            return Err(fail("unsupported tile magic or dtype"));
        }
        let n = header.width * header.height;
        let payload = &bytes[9 + hlen..];
        let expected = header.bands.len() * n * 4 + if header.has_mask { n } else { 0 };
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "tile payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let bands = (0..header.bands.len())
            .map(|b| {
                payload[b * n * 4..(b + 1) * n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
            .collect();
        let mask = header.has_mask.then(|| {
            payload[header.bands.len() * n * 4..]
                .iter()
                .map(|&b| b != 0)
                .collect()
        });
        Ok(Self {
            header,
            bands,
            mask,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl From<&StructureRaster> for Tile {
    fn from(r: &StructureRaster) -> Self {
        let bands = Variable::ALL
            .iter()
            .map(|&v| {
                (
                    BandInfo::new(v.name(), v.unit(), Some(NODATA)),
                    r.band(v).iter().map(|&x| x as f32).collect(),
                )
            })
            .collect();
        Tile::new(&r.grid, bands, Some(r.forested.clone())).expect("raster bands match its grid")
    }
}

impl TryFrom<&Tile> for StructureRaster {
    type Error = Error;

    fn try_from(t: &Tile) -> Result<Self> {
        let mut out = StructureRaster::empty(t.grid());
        for v in Variable::ALL {
            let band = t
                .band(v.name())
                .ok_or_else(|| Error::Format(format!("tile lacks band {}", v.name())))?;
            out.bands[v.index()] = band.iter().map(|&x| x as f64).collect();
        }
        out.forested = match &t.mask {
            Some(m) => m.clone(),
            None => out.bands[0].iter().map(|&v| v != NODATA).collect(),
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_is_lossless() {
        let grid = GridSpec::new(100.0, 500.0, 10.0, 3, 2).unwrap();
        let a: Vec<f32> = vec![1.5, -2.25, f32::MAX, 0.0, -0.0, 1e-30];
        let b: Vec<f32> = vec![NODATA as f32; 6];
        let tile = Tile::new(
            &grid,
            vec![(BandInfo::new("a", "m", None), a), (BandInfo::new("b", "m", Some(NODATA)), b)],
            Some(vec![true, false, true, true, false, false]),
        )
        .unwrap();
        let back = Tile::from_bytes(&tile.to_bytes().unwrap()).unwrap();
        assert_eq!(back, tile);
        assert_eq!(back.grid(), grid);
    }

    #[test]
    fn malformed_input_is_a_format_error() {
        let grid = GridSpec::new(0.0, 0.0, 1.0, 2, 2).unwrap();
        let tile = Tile::new(&grid, vec![(BandInfo::new("a", "", None), vec![0.0; 4])], None).unwrap();
        let bytes = tile.to_bytes().unwrap();
        for bad in [&b"FSTR2"[..], &bytes[..bytes.len() - 1], &bytes[..7]] {
            let err = Tile::from_bytes(bad).unwrap_err();
            assert_eq!(err.kind(), crate::ErrorKind::Format);
        }
    }
}
