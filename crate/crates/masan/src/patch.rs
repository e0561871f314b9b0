//! Non-overlapping grid partition of volumes and its exact inverse.
//!
//! A `[C, D, H, W]` volume is zero-padded at the high end of each spatial
//! axis up to the next multiple of the grid, then sliced into grid cells.
//! Patches are ordered z-major, then y, then x (D slowest, W fastest).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Partition grid. The pad policy is always zero-padding at high index ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub grid: [usize; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { grid: [4, 4, 4] }
    }
}

impl GridSpec {
    pub fn new(gz: usize, gy: usize, gx: usize) -> Self {
        assert!(gz >= 1 && gy >= 1 && gx >= 1, "grid components must be >= 1");
        GridSpec { grid: [gz, gy, gx] }
    }

    pub fn cells(&self) -> usize {
        self.grid[0] * self.grid[1] * self.grid[2]
    }

    /// Grid cell coordinates of patch index k (z-major order).
    pub fn cell_coords(&self, k: usize) -> [usize; 3] {
        let [_, gy, gx] = self.grid;
        [k / (gy * gx), (k / gx) % gy, k % gx]
    }
}

/// Ordered patches plus the metadata needed to reassemble the volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T: Scalar> {
    pub patches: Vec<Tensor<T>>,
    pub original_extents: [usize; 3],
    pub padded_extents: [usize; 3],
    pub grid: GridSpec,
}

impl<T: Scalar> PatchSet<T> {
    /// Spatial extents of a single patch (padded extents over the grid).
    pub fn patch_extents(&self) -> [usize; 3] {
        [
            self.padded_extents[0] / self.grid.grid[0],
            self.padded_extents[1] / self.grid.grid[1],
            self.padded_extents[2] / self.grid.grid[2],
        ]
    }
}

fn padded_extents(spatial: [usize; 3], spec: &GridSpec) -> Result<[usize; 3]> {
    let mut out = [0usize; 3];
    for i in 0..3 {
        if spatial[i] < spec.grid[i] {
            return Err(Error::VolumeSmallerThanGrid {
                extent: spatial.to_vec(),
                grid: spec.grid.to_vec(),
            });
        }
        out[i] = spatial[i].div_ceil(spec.grid[i]) * spec.grid[i];
    }
    Ok(out)
}

/// Split a `[C, D, H, W]` volume into `product(grid)` patches of shape
/// `[C, D/gz, H/gy, W/gx]` (after zero-padding at the high ends).
pub fn partition3d<T: Scalar>(volume: &Tensor<T>, spec: &GridSpec) -> Result<PatchSet<T>> {
    if volume.rank() != 4 {
        return Err(Error::InvalidShape(format!(
            "partition3d expects [C, D, H, W], got {:?}",
            volume.shape()
        )));
    }
    partition_leading(volume, spec, volume.shape()[0])
}

/// Split a `[T, C, D, H, W]` series identically on every frame; the time
/// axis is never partitioned. Patches have shape `[T, C, pd, ph, pw]`.
pub fn partition4d<T: Scalar>(series: &Tensor<T>, spec: &GridSpec) -> Result<PatchSet<T>> {
    if series.rank() != 5 {
        return Err(Error::InvalidShape(format!(
            "partition4d expects [T, C, D, H, W], got {:?}",
            series.shape()
        )));
    }
    partition_leading(series, spec, series.shape()[0] * series.shape()[1])
}

/// Shared kernel: treat all leading axes as one channel-like axis of extent
/// `lead`, slice the trailing three spatial axes.
fn partition_leading<T: Scalar>(
    volume: &Tensor<T>,
    spec: &GridSpec,
    lead: usize,
) -> Result<PatchSet<T>> {
    let rank = volume.rank();
    let spatial = [
        volume.shape()[rank - 3],
        volume.shape()[rank - 2],
        volume.shape()[rank - 1],
    ];
    let padded = padded_extents(spatial, spec)?;
    let [pd, ph, pw] = [
        padded[0] / spec.grid[0],
        padded[1] / spec.grid[1],
        padded[2] / spec.grid[2],
    ];
    let (d, h, w) = (spatial[0], spatial[1], spatial[2]);
    let src = volume.data();
    let mut patches = Vec::with_capacity(spec.cells());
    let mut patch_shape = volume.shape()[..rank - 3].to_vec();
    patch_shape.extend_from_slice(&[pd, ph, pw]);

    for gz in 0..spec.grid[0] {
        for gy in 0..spec.grid[1] {
            for gx in 0..spec.grid[2] {
                let mut data = vec![T::zero(); lead * pd * ph * pw];
                for c in 0..lead {
                    for dz in 0..pd {
                        let sd = gz * pd + dz;
                        if sd >= d {
                            continue;
                        }
                        for dy in 0..ph {
                            let sh = gy * ph + dy;
                            if sh >= h {
                                continue;
                            }
                            let sw0 = gx * pw;
                            let run = pw.min(w.saturating_sub(sw0));
                            if run == 0 {
                                continue;
                            }
                            let src_base = ((c * d + sd) * h + sh) * w + sw0;
                            let dst_base = ((c * pd + dz) * ph + dy) * pw;
                            data[dst_base..dst_base + run]
                                .copy_from_slice(&src[src_base..src_base + run]);
                        }
                    }
                }
                patches.push(Tensor::from_vec(patch_shape.clone(), data)?);
            }
        }
    }
    Ok(PatchSet {
        patches,
        original_extents: spatial,
        padded_extents: padded,
        grid: *spec,
    })
}

/// Inverse of [`partition3d`]/[`partition4d`]: tile the patches back and
/// crop the padding, recovering the original volume bit-exactly.
pub fn reassemble3d<T: Scalar>(ps: &PatchSet<T>) -> Result<Tensor<T>> {
    if ps.patches.len() != ps.grid.cells() {
        return Err(Error::InvalidShape(format!(
            "expected {} patches, got {}",
            ps.grid.cells(),
            ps.patches.len()
        )));
    }
    let first = &ps.patches[0];
    for p in &ps.patches[1..] {
        if p.shape() != first.shape() {
            return Err(Error::InconsistentPatches(
                first.shape().to_vec(),
                p.shape().to_vec(),
            ));
        }
    }
    let rank = first.rank();
    let lead: usize = first.shape()[..rank - 3].iter().product();
    let [pd, ph, pw] = [
        first.shape()[rank - 3],
        first.shape()[rank - 2],
        first.shape()[rank - 1],
    ];
    let expect = [
        pd * ps.grid.grid[0],
        ph * ps.grid.grid[1],
        pw * ps.grid.grid[2],
    ];
    if expect != ps.padded_extents {
        return Err(Error::InconsistentPatches(
            expect.to_vec(),
            ps.padded_extents.to_vec(),
        ));
    }
    let [d, h, w] = ps.original_extents;
    let mut out_shape = first.shape()[..rank - 3].to_vec();
    out_shape.extend_from_slice(&[d, h, w]);
    let mut out = vec![T::zero(); lead * d * h * w];

    let mut k = 0usize;
    for gz in 0..ps.grid.grid[0] {
        for gy in 0..ps.grid.grid[1] {
            for gx in 0..ps.grid.grid[2] {
                let src = ps.patches[k].data();
                k += 1;
                for c in 0..lead {
                    for dz in 0..pd {
                        let sd = gz * pd + dz;
                        if sd >= d {
                            continue;
                        }
                        for dy in 0..ph {
                            let sh = gy * ph + dy;
                            if sh >= h {
                                continue;
                            }
                            let sw0 = gx * pw;
                            let run = pw.min(w.saturating_sub(sw0));
                            if run == 0 {
                                continue;
                            }
                            let src_base = ((c * pd + dz) * ph + dy) * pw;
                            let dst_base = ((c * d + sd) * h + sh) * w + sw0;
                            out[dst_base..dst_base + run]
                                .copy_from_slice(&src[src_base..src_base + run]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}
