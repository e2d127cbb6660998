use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An RGB observation with values in [0, 1], stored row-major as `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageObs {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageObs {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::data(format!("image of size {height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::data(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean over channels at one pixel.
    pub fn gray(&self, y: usize, x: usize) -> f64 {
        let p = self.pixel(y, x);
        (p[0] + p[1] + p[2]) / 3.0
    }

    pub fn in_unit_range(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Flattens non-overlapping `patch`×`patch` tiles in raster order; each row
    /// lists the tile's pixels in raster order with channels innermost.
    pub fn patchify(&self, patch: usize) -> Result<Vec<f64>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Tensor(vtl_tensor::TensorError::InvalidShape {
                shape: [self.height, self.width],
                reason: format!("image sides must be divisible by patch size {patch}"),
            }));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..self.height / patch {
            for px in 0..self.width / patch {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (y * self.width + px * patch) * 3;
                    out.extend_from_slice(&self.data[start..start + patch * 3]);
                }
            }
        }
        Ok(out)
    }
}

impl Serialize for ImageObs {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<[f64; 3]>> = (0..self.height)
            .map(|y| (0..self.width).map(|x| self.pixel(y, x)).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ImageObs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<[f64; 3]>> = Vec::deserialize(d)?;
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(D::Error::custom("ragged image rows"));
        }
        let data = rows.into_iter().flatten().flatten().collect();
        ImageObs::new(height, width, data).map_err(D::Error::custom)
    }
}
