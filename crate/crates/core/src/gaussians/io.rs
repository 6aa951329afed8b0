//! GaussianSet file pair: `<stem>.json` header `{"count": N, "dtype": "f32le"}`
//! and `<stem>.raw` with 11 little-endian f32 per Gaussian:
//! `[rho, px, py, pz, qw, qx, qy, qz, ls_x, ls_y, ls_z]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gaussian, GaussianSet};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::volume::{decode_f32le, encode_f32le, file_pair, read_json, write_json};

const RECORD: usize = 11;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    count: usize,
    dtype: String,
}

pub(super) fn write(set: &GaussianSet, path: &Path) -> Result<()> {
    let (json_path, raw_path) = file_pair(path);
    let mut flat = Vec::with_capacity(set.len() * RECORD);
    for g in set.iter() {
        flat.push(g.rho);
        flat.extend_from_slice(g.position.as_slice());
        flat.extend_from_slice(&g.orient);
        flat.extend_from_slice(g.log_scale.as_slice());
    }
    let bytes = encode_f32le(&flat).map_err(|m| Error::format(&raw_path, m))?;
    write_json(
        &json_path,
        &Header {
            count: set.len(),
            dtype: "f32le".into(),
        },
    )?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

pub(super) fn read(path: &Path) -> Result<GaussianSet> {
    let (json_path, raw_path) = file_pair(path);
    let header: Header = read_json(&json_path)?;
    if header.dtype != "f32le" {
        return Err(Error::format(
            &json_path,
            format!("dtype: unsupported {:?}", header.dtype),
        ));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let flat = decode_f32le(&bytes).map_err(|m| Error::format(&raw_path, m))?;
    if flat.len() != header.count * RECORD {
        return Err(Error::format(
            &raw_path,
            format!(
                "record count mismatch: header says {} gaussians, data holds {} values",
                header.count,
                flat.len()
            ),
        ));
    }
    let mut items = Vec::with_capacity(header.count);
    for (i, r) in flat.chunks_exact(RECORD).enumerate() {
        if r[0] < 0.0 {
            return Err(Error::format(
                &raw_path,
                format!("rho: negative density {} in record {i}", r[0]),
            ));
        }
        let qn = (r[4] * r[4] + r[5] * r[5] + r[6] * r[6] + r[7] * r[7]).sqrt();
        if (qn - 1.0).abs() > 1e-5 {
            return Err(Error::format(
                &raw_path,
                format!("orient: quaternion norm {qn} in record {i}"),
            ));
        }
        items.push(Gaussian {
            rho: r[0],
            position: Vec3::new(r[1], r[2], r[3]),
            orient: [r[4], r[5], r[6], r[7]],
            log_scale: Vec3::new(r[8], r[9], r[10]),
        });
    }
    // stored values are kept bit-exact; the quaternion is within f32 rounding of unit
    Ok(GaussianSet::from_items_unchecked(items))
}
