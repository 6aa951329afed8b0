//! Scalar volumes on axis-aligned grids: trilinear sampling, rigid
//! resampling, pyramids and the `.json` + `.raw` file pair.
//!
//! Samples are held as `f64` in memory and stored as little-endian `f32` on
//! disk. Layout is x-fastest: index = `i + nx * (j + ny * k)`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SE3Pose, Vec3};
use crate::reduce;

/// Shape and placement of a voxel grid. `origin` is the center of voxel
/// `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::input(format!("dims must be positive, got {dims:?}")));
        }
        if !spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::input(format!("spacing must be positive, got {spacing:?}")));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(Error::input("origin must be finite"));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Grid whose geometric center is the world origin.
    pub fn centered(dims: [usize; 3], spacing: f64) -> Result<Self> {
        let origin = Vec3::from_fn(|k, _| -0.5 * (dims[k] as f64 - 1.0) * spacing);
        Self::new(dims, Vec3::repeat(spacing), origin)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        (i, r % self.dims[1], r / self.dims[1])
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin.x + i as f64 * self.spacing.x,
            self.origin.y + j as f64 * self.spacing.y,
            self.origin.z + k as f64 * self.spacing.z,
        )
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        let (i, j, k) = self.coords(idx);
        self.center(i, j, k)
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn to_index(&self, x: &Vec3) -> Vec3 {
        (x - self.origin).component_div(&self.spacing)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.x * self.spacing.y * self.spacing.z
    }

    /// Axis-aligned box on which trilinear samples can be nonzero: one voxel
    /// beyond the outermost centers.
    pub fn support_bounds(&self) -> (Vec3, Vec3) {
        let lo = self.origin - self.spacing;
        let hi = Vec3::from_fn(|k, _| self.origin[k] + self.dims[k] as f64 * self.spacing[k]);
        (lo, hi)
    }

    /// Grid with half the resolution (box-filter pyramid level).
    pub fn halved(&self) -> Grid {
        let dims = self.dims.map(|d| (d / 2).max(1));
        let spacing = self.spacing * 2.0;
        Grid {
            dims,
            spacing,
            origin: self.origin + self.spacing * 0.5,
        }
    }
}

/// Scalar field sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::input(format!(
                "data length mismatch: {} values for dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("data contains a non-finite value"));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    /// Volume filled by evaluating `f` at every voxel center.
    pub fn from_fn<F>(grid: Grid, f: F) -> Self
    where
        F: Fn(Vec3) -> f64 + Sync,
    {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(grid.center_of(idx)))
            .collect();
        Self { grid, data }
    }

    pub(crate) fn from_raw(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    fn at(&self, i: isize, j: isize, k: isize) -> f64 {
        let [nx, ny, nz] = self.grid.dims;
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            0.0
        } else {
            self.data[self.grid.index(i as usize, j as usize, k as usize)]
        }
    }

    /// Trilinear interpolation at a world point, zero outside the grid.
    pub fn sample_trilinear(&self, x: &Vec3) -> f64 {
        self.sample_impl::<false>(x).0
    }

    /// Trilinear sample and its gradient with respect to the world point.
    pub fn sample_with_gradient(&self, x: &Vec3) -> (f64, Vec3) {
        self.sample_impl::<true>(x)
    }

    #[inline]
    fn sample_impl<const GRAD: bool>(&self, x: &Vec3) -> (f64, Vec3) {
        let f = self.grid.to_index(x);
        let [nx, ny, nz] = self.grid.dims;
        if f.x <= -1.0 || f.y <= -1.0 || f.z <= -1.0 || f.x >= nx as f64 || f.y >= ny as f64 || f.z >= nz as f64 {
            return (0.0, Vec3::zeros());
        }
        let (i0, j0, k0) = (f.x.floor(), f.y.floor(), f.z.floor());
        let (tx, ty, tz) = (f.x - i0, f.y - j0, f.z - k0);
        let (i0, j0, k0) = (i0 as isize, j0 as isize, k0 as isize);

        let c000 = self.at(i0, j0, k0);
        let c100 = self.at(i0 + 1, j0, k0);
        let c010 = self.at(i0, j0 + 1, k0);
        let c110 = self.at(i0 + 1, j0 + 1, k0);
        let c001 = self.at(i0, j0, k0 + 1);
        let c101 = self.at(i0 + 1, j0, k0 + 1);
        let c011 = self.at(i0, j0 + 1, k0 + 1);
        let c111 = self.at(i0 + 1, j0 + 1, k0 + 1);

        let c00 = c000 + tx * (c100 - c000);
        let c10 = c010 + tx * (c110 - c010);
        let c01 = c001 + tx * (c101 - c001);
        let c11 = c011 + tx * (c111 - c011);
        let c0 = c00 + ty * (c10 - c00);
        let c1 = c01 + ty * (c11 - c01);
        let value = c0 + tz * (c1 - c0);
        if !GRAD {
            return (value, Vec3::zeros());
        }

        let dx0 = (c100 - c000) + ty * ((c110 - c010) - (c100 - c000));
        let dx1 = (c101 - c001) + ty * ((c111 - c011) - (c101 - c001));
        let dx = dx0 + tz * (dx1 - dx0);
        let dy = (c10 - c00) + tz * ((c11 - c01) - (c10 - c00));
        let dz = c1 - c0;
        let g = Vec3::new(dx, dy, dz).component_div(&self.grid.spacing);
        (value, g)
    }

    /// Resamples `self` moved by `pose` onto `target`: the output voxel at
    /// world point `x` holds `self(pose⁻¹ x)`.
    pub fn resample_rigid(&self, pose: &SE3Pose, target: &Grid) -> Volume {
        let inv = pose.inverse();
        let data = (0..target.len())
            .into_par_iter()
            .with_min_len(1024)
            .map(|idx| self.sample_trilinear(&inv.apply(&target.center_of(idx))))
            .collect();
        Volume::from_raw(*target, data)
    }

    /// Like [`Volume::resample_rigid`], also returning for each output voxel
    /// the spatial gradient of the moved field, `∂/∂x self(pose⁻¹ x)`, in
    /// world coordinates.
    pub fn resample_rigid_with_gradient(&self, pose: &SE3Pose, target: &Grid) -> (Volume, Vec<Vec3>) {
        let inv = pose.inverse();
        let rot = pose.rotation_matrix();
        let (data, grads): (Vec<f64>, Vec<Vec3>) = (0..target.len())
            .into_par_iter()
            .with_min_len(1024)
            .map(|idx| {
                let (v, g) = self.sample_with_gradient(&inv.apply(&target.center_of(idx)));
                (v, rot * g)
            })
            .unzip();
        (Volume::from_raw(*target, data), grads)
    }

    /// Sum of values times voxel volume.
    pub fn mass(&self) -> f64 {
        reduce::pairwise_sum(&self.data) * self.grid.voxel_volume()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Intensity-weighted centroid (absolute values), grid center when empty.
    pub fn centroid(&self) -> Vec3 {
        let g = self.grid;
        let s = reduce::par_sum_vec::<4, _>(self.data.len(), |idx, acc| {
            let w = self.data[idx].abs();
            if w > 0.0 {
                let c = g.center_of(idx);
                acc[0] += w;
                acc[1] += w * c.x;
                acc[2] += w * c.y;
                acc[3] += w * c.z;
            }
        });
        if s[0] <= 0.0 {
            let [nx, ny, nz] = g.dims;
            return g.center(0, 0, 0)
                + Vec3::new(
                    0.5 * (nx - 1) as f64 * g.spacing.x,
                    0.5 * (ny - 1) as f64 * g.spacing.y,
                    0.5 * (nz - 1) as f64 * g.spacing.z,
                );
        }
        Vec3::new(s[1], s[2], s[3]) / s[0]
    }

    /// Tight world-space bounding box of voxels with value above
    /// `rel_threshold * max`. `None` for an all-zero volume.
    pub fn support_box(&self, rel_threshold: f64) -> Option<(Vec3, Vec3)> {
        let peak = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak <= 0.0 {
            return None;
        }
        let thr = rel_threshold * peak;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for (idx, v) in self.data.iter().enumerate() {
            if v.abs() > thr {
                let c = self.grid.center_of(idx);
                lo = lo.inf(&c);
                hi = hi.sup(&c);
            }
        }
        Some((lo, hi))
    }

    /// Half-resolution volume by 2×2×2 box averaging. Trailing odd slices
    /// are dropped.
    pub fn downsample2(&self) -> Volume {
        let src = self.grid;
        let dst = src.halved();
        let [nx, ny, nz] = src.dims;
        let data = (0..dst.len())
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = dst.coords(idx);
                let mut acc = 0.0;
                let mut n = 0.0;
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            let (a, b, c) = (2 * i + di, 2 * j + dj, 2 * k + dk);
                            if a < nx && b < ny && c < nz {
                                acc += self.data[src.index(a, b, c)];
                                n += 1.0;
                            }
                        }
                    }
                }
                acc / n
            })
            .collect();
        Volume::from_raw(dst, data)
    }

    /// Returns `self * scale + offset` on the same grid.
    pub fn affine(&self, scale: f64, offset: f64) -> Volume {
        Volume::from_raw(self.grid, self.data.iter().map(|v| v * scale + offset).collect())
    }

    /// Writes `<stem>.json` and `<stem>.raw`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (json_path, raw_path) = file_pair(path.as_ref());
        let header = VolumeHeader {
            dims: self.grid.dims,
            spacing_mm: self.grid.spacing.into(),
            origin_mm: self.grid.origin.into(),
            dtype: "f32le".into(),
        };
        let bytes = encode_f32le(&self.data).map_err(|m| Error::format(&raw_path, m))?;
        write_json(&json_path, &header)?;
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
        let (json_path, raw_path) = file_pair(path.as_ref());
        let header: VolumeHeader = read_json(&json_path)?;
        if header.dtype != "f32le" {
            return Err(Error::format(
                &json_path,
                format!("dtype: unsupported {:?}", header.dtype),
            ));
        }
        let grid = Grid::new(header.dims, Vec3::from(header.spacing_mm), Vec3::from(header.origin_mm))
            .map_err(|e| Error::format(&json_path, format!("dims/spacing_mm/origin_mm: {e}")))?;
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let data = decode_f32le(&bytes).map_err(|m| Error::format(&raw_path, m))?;
        if data.len() != grid.len() {
            return Err(Error::format(
                &raw_path,
                format!("data length mismatch: {} values for dims {:?}", data.len(), grid.dims),
            ));
        }
        Ok(Volume { grid, data })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
}

/// `foo`, `foo.json` or `foo.raw` -> (`foo.json`, `foo.raw`).
pub(crate) fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub(crate) fn encode_f32le(data: &[f64]) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for (i, &v) in data.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(format!("data contains non-finite value at index {i}"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode_f32le(bytes: &[u8]) -> std::result::Result<Vec<f64>, String> {
    if !bytes.len().is_multiple_of(4) {
        return Err(format!(
            "data length mismatch: {} bytes is not a whole number of f32",
            bytes.len()
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / 4);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(format!("data contains non-finite value at index {i}"));
        }
        out.push(v as f64);
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(dims, Vec3::new(1.0, 1.5, 0.75), Vec3::new(-3.0, 2.0, 1.0)).unwrap();
        let data = (0..grid.len()).map(|_| rng.random::<f32>() as f64).collect();
        Volume::new(grid, data).unwrap()
    }

    /// Sum of isotropic Gaussian blobs, smooth at the grid scale.
    pub(crate) fn smooth_phantom(grid: Grid) -> Volume {
        let blobs = [
            (Vec3::new(4.0, -3.0, 2.0), 7.0, 1.0),
            (Vec3::new(-6.0, 5.0, -4.0), 5.0, 0.7),
            (Vec3::new(2.0, 8.0, 6.0), 4.5, 0.4),
        ];
        Volume::from_fn(grid, |x| {
            blobs
                .iter()
                .map(|(c, s, a)| a * (-(x - c).norm_squared() / (2.0 * s * s)).exp())
                .sum()
        })
    }

    #[test]
    fn voxel_centers_are_exact() {
        let v = random_volume([5, 4, 3], 1);
        for idx in 0..v.grid().len() {
            let c = v.grid().center_of(idx);
            assert_eq!(v.sample_trilinear(&c), v.data()[idx]);
        }
    }

    #[test]
    fn midpoint_is_mean() {
        let v = random_volume([5, 4, 3], 2);
        let a = v.grid().center(1, 2, 1);
        let b = v.grid().center(2, 2, 1);
        let mid = v.sample_trilinear(&((a + b) * 0.5));
        assert!((mid - 0.5 * (v.get(1, 2, 1) + v.get(2, 2, 1))).abs() < 1e-15);
    }

    #[test]
    fn constant_volume_interior() {
        let grid = Grid::centered([6, 6, 6], 2.0).unwrap();
        let v = Volume::new(grid, vec![3.25; grid.len()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            assert!((v.sample_trilinear(&x) - 3.25).abs() < 1e-14);
        }
        assert_eq!(v.sample_trilinear(&Vec3::new(100.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let v = random_volume([6, 5, 4], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = v.grid().origin
                + Vec3::new(
                    rng.random_range(0.1..4.9) * 1.0,
                    rng.random_range(0.1..3.9) * 1.5,
                    rng.random_range(0.1..2.9) * 0.75,
                );
            let (_, g) = v.sample_with_gradient(&x);
            for k in 0..3 {
                let h = 1e-6;
                let mut e = Vec3::zeros();
                e[k] = h;
                let fd = (v.sample_trilinear(&(x + e)) - v.sample_trilinear(&(x - e))) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "axis {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn identity_resample_reproduces_volume() {
        let v = random_volume([7, 6, 5], 6);
        let r = v.resample_rigid(&SE3Pose::identity(), v.grid());
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // idempotent on its own grid
        let rr = r.resample_rigid(&SE3Pose::identity(), r.grid());
        assert_eq!(rr.data(), r.data());
    }

    #[test]
    fn one_voxel_shift_moves_content() {
        let v = random_volume([7, 6, 5], 7);
        let t = SE3Pose::translation_only(Vec3::new(v.grid().spacing.x, 0.0, 0.0));
        let r = v.resample_rigid(&t, v.grid());
        for k in 0..5 {
            for j in 0..6 {
                for i in 1..7 {
                    assert_eq!(r.get(i, j, k), v.get(i - 1, j, k));
                }
            }
        }
    }

    #[test]
    fn round_trip_resampling_on_smooth_phantom() {
        let grid = Grid::centered([40, 40, 40], 1.0).unwrap();
        let v = smooth_phantom(grid);
        let t = SE3Pose::from_euler_xyz(Vec3::new(0.12, -0.08, 0.15), Vec3::new(1.3, -0.7, 2.1));
        let back = v.resample_rigid(&t, &grid).resample_rigid(&t.inverse(), &grid);
        let p = psnr(v.data(), back.data(), None).unwrap();
        assert!(p > 40.0, "PSNR {p}");
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume([4, 3, 5], 8);
        v.write(dir.path().join("vol")).unwrap();
        let back = Volume::read(dir.path().join("vol.json")).unwrap();
        assert_eq!(back, v);
        let header = fs::read_to_string(dir.path().join("vol.json")).unwrap();
        let j: serde_json::Value = serde_json::from_str(&header).unwrap();
        assert_eq!(j["dtype"], "f32le");
        assert_eq!(j["dims"], serde_json::json!([4, 3, 5]));
        assert!(j.get("spacing_mm").is_some() && j.get("origin_mm").is_some());
    }

    #[test]
    fn short_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        fs::write(
            stem.with_extension("json"),
            r#"{"dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f32le"}"#,
        )
        .unwrap();
        fs::write(stem.with_extension("raw"), encode_f32le(&[1.0; 7]).unwrap()).unwrap();
        let err = Volume::read(&stem).unwrap_err().to_string();
        assert!(err.contains("data length mismatch"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Volume::read(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let grid = Grid::centered([2, 2, 2], 1.0).unwrap();
        let mut data = vec![0.0; 8];
        data[3] = f64::NAN;
        assert!(Volume::new(grid, data).is_err());
        let dir = tempfile::tempdir().unwrap();
        let huge = Volume::new(grid, vec![1e300; 8]).unwrap();
        let err = huge.write(dir.path().join("h")).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }

    #[test]
    fn downsample_averages_blocks() {
        let grid = Grid::centered([4, 4, 2], 1.0).unwrap();
        let v = Volume::new(grid, (0..32).map(|i| i as f64).collect()).unwrap();
        let d = v.downsample2();
        assert_eq!(d.dims(), [2, 2, 1]);
        let expected = (1 + 4 + 5 + 16 + 17 + 20 + 21) as f64 / 8.0;
        assert_eq!(d.get(0, 0, 0), expected);
        // the coarse center coincides with the block center
        let c = (grid.center(0, 0, 0) + grid.center(1, 1, 1)) * 0.5;
        assert!((d.grid().center(0, 0, 0) - c).norm() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn resampling_creates_no_mass(
            e in prop::array::uniform3(-0.4f64..0.4),
            t in prop::array::uniform3(-6.0f64..6.0),
        ) {
            let grid = Grid::centered([32, 32, 32], 1.0).unwrap();
            let v = smooth_phantom(grid);
            let pose = SE3Pose::from_euler_xyz(Vec3::from(e), Vec3::from(t));
            let r = v.resample_rigid(&pose, &grid);
            prop_assert!(r.mass() <= v.mass() * (1.0 + 1e-6));
        }
    }
}
