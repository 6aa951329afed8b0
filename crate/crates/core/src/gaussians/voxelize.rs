//! Density voxelizer: evaluates the Gaussian density field at voxel centers.

use rayon::prelude::*;

use super::{GaussianSet, Splat, SplatGrad};
use crate::geometry::{Mat3, Vec3};
use crate::volume::{Grid, Volume};

/// Inclusive voxel index box.
#[derive(Debug, Clone, Copy)]
struct VoxelBox {
    lo: [usize; 3],
    hi: [usize; 3],
}

fn voxel_bounds(s: &Splat, grid: &Grid, tau: f64) -> Option<VoxelBox> {
    if !tau.is_finite() {
        return Some(VoxelBox {
            lo: [0; 3],
            hi: grid.dims.map(|d| d - 1),
        });
    }
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for k in 0..3 {
        let half = tau * s.cov[(k, k)].max(0.0).sqrt();
        let a = ((s.position[k] - half - grid.origin[k]) / grid.spacing[k] - 1e-9).ceil();
        let b = ((s.position[k] + half - grid.origin[k]) / grid.spacing[k] + 1e-9).floor();
        let a = a.max(0.0);
        let b = b.min((grid.dims[k] - 1) as f64);
        if a > b {
            return None;
        }
        lo[k] = a as usize;
        hi[k] = b as usize;
    }
    Some(VoxelBox { lo, hi })
}

/// Voxelizes at truncation radius `tau` (Mahalanobis).
pub fn voxelize(set: &GaussianSet, grid: &Grid, tau: f64) -> Volume {
    Volume::from_raw(*grid, voxelize_splats(&set.splats(), grid, tau))
}

/// Voxelizes prepared (possibly signed-density) splats.
pub fn voxelize_splats(splats: &[Splat], grid: &Grid, tau: f64) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let tau2 = tau * tau;
    let boxes: Vec<Option<VoxelBox>> = splats.iter().map(|s| voxel_bounds(s, grid, tau)).collect();
    let planes: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut plane = vec![0.0; nx * ny];
            let z = grid.origin.z + k as f64 * grid.spacing.z;
            for (s, b) in splats.iter().zip(&boxes) {
                let Some(b) = b else { continue };
                if k < b.lo[2] || k > b.hi[2] {
                    continue;
                }
                for j in b.lo[1]..=b.hi[1] {
                    let y = grid.origin.y + j as f64 * grid.spacing.y;
                    for i in b.lo[0]..=b.hi[0] {
                        let x = grid.origin.x + i as f64 * grid.spacing.x;
                        let m = Vec3::new(x, y, z) - s.position;
                        let d2 = m.dot(&(s.inv_cov * m));
                        if d2 <= tau2 {
                            plane[i + nx * j] += s.rho * (-0.5 * d2).exp();
                        }
                    }
                }
            }
            plane
        })
        .collect();
    planes.concat()
}

/// Gradient of `Σ_voxels grad_volume · V` with respect to every splat.
pub fn voxelize_backward(splats: &[Splat], grid: &Grid, tau: f64, grad_volume: &[f64]) -> Vec<SplatGrad> {
    assert_eq!(grad_volume.len(), grid.len());
    let tau2 = tau * tau;
    splats
        .par_iter()
        .map(|s| {
            let Some(b) = voxel_bounds(s, grid, tau) else {
                return SplatGrad::default();
            };
            let mut g_rho = 0.0;
            // Σ g ρ e m  and  Σ g ρ e m mᵀ
            let mut first = Vec3::zeros();
            let mut second = Mat3::zeros();
            for k in b.lo[2]..=b.hi[2] {
                for j in b.lo[1]..=b.hi[1] {
                    for i in b.lo[0]..=b.hi[0] {
                        let gv = grad_volume[grid.index(i, j, k)];
                        if gv == 0.0 {
                            continue;
                        }
                        let m = grid.center(i, j, k) - s.position;
                        let d2 = m.dot(&(s.inv_cov * m));
                        if d2 > tau2 {
                            continue;
                        }
                        let e = (-0.5 * d2).exp();
                        g_rho += gv * e;
                        let w = gv * s.rho * e;
                        first += m * w;
                        second += (m * m.transpose()) * w;
                    }
                }
            }
            SplatGrad {
                rho: g_rho,
                position: s.inv_cov * first,
                inv_cov: second * -0.5,
            }
        })
        .collect()
}
