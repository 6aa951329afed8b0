//! Detector-plane line-integral images and their file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{decode_f32le, encode_f32le, file_pair, read_json, write_json};

/// Line-integral image, row-major (`u` fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjImage {
    width: usize,
    height: usize,
    pixel_pitch: f64,
    data: Vec<f64>,
}

impl ProjImage {
    pub fn new(width: usize, height: usize, pixel_pitch: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::input(format!(
                "data length mismatch: {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("image contains a non-finite value"));
        }
        Ok(Self {
            width,
            height,
            pixel_pitch,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_pitch: f64) -> Self {
        Self {
            width,
            height,
            pixel_pitch,
            data: vec![0.0; width * height],
        }
    }

    pub(crate) fn from_raw(width: usize, height: usize, pixel_pitch: f64, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            pixel_pitch,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u + self.width * v]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        crate::reduce::pairwise_sum(&self.data) / self.data.len() as f64
    }

    /// Dims in the `[x, y, z]` convention of the windowed filters.
    pub(crate) fn dims3(&self) -> [usize; 3] {
        [self.width, self.height, 1]
    }

    /// Writes `<stem>.json` and `<stem>.raw`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (json_path, raw_path) = file_pair(path.as_ref());
        let header = ImageHeader {
            w: self.width,
            h: self.height,
            pixel_pitch_mm: self.pixel_pitch,
            dtype: "f32le".into(),
            pgm_scale: None,
        };
        let bytes = encode_f32le(&self.data).map_err(|m| Error::format(&raw_path, m))?;
        write_json(&json_path, &header)?;
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<ProjImage> {
        let (json_path, raw_path) = file_pair(path.as_ref());
        let header: ImageHeader = read_json(&json_path)?;
        if header.dtype != "f32le" {
            return Err(Error::format(
                &json_path,
                format!("dtype: unsupported {:?}", header.dtype),
            ));
        }
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let data = decode_f32le(&bytes).map_err(|m| Error::format(&raw_path, m))?;
        if data.len() != header.w * header.h {
            return Err(Error::format(
                &raw_path,
                format!(
                    "data length mismatch: {} values for {}x{}",
                    data.len(),
                    header.w,
                    header.h
                ),
            ));
        }
        Ok(ProjImage {
            width: header.w,
            height: header.h,
            pixel_pitch: header.pixel_pitch_mm,
            data,
        })
    }

    /// 16-bit binary PGM with min-max scaling. The scaling is recorded in a
    /// sibling `<stem>.pgm.json` so pixel values can be mapped back.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.max();
        let range = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &v in &self.data {
            let q = (((v - lo) / range) * 65535.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let header = ImageHeader {
            w: self.width,
            h: self.height,
            pixel_pitch_mm: self.pixel_pitch,
            dtype: "u16be".into(),
            pgm_scale: Some(PgmScale { min: lo, max: hi }),
        };
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        write_json(Path::new(&side), &header)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageHeader {
    w: usize,
    h: usize,
    pixel_pitch_mm: f64,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pgm_scale: Option<PgmScale>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PgmScale {
    min: f64,
    max: f64,
}
