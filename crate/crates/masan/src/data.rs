//! Synthetic cohorts with a planted class signal, the MVL1 binary volume
//! format, stratified splitting, and PGM/CSV export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsReport;
use crate::patch::GridSpec;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// One subject: a structural volume, a functional series and a class label
/// (0 = control-like, 1 = disease-like).
#[derive(Debug, Clone)]
pub struct SubjectSample<T: Scalar> {
    pub t1: Tensor<T>,
    pub fmri: Tensor<T>,
    pub label: usize,
    pub subject_id: String,
}

/// Generator settings for a synthetic cohort. Class-1 subjects have their
/// structural intensity attenuated and their functional fluctuation
/// amplified inside `signal_patches` (grid-cell indices).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_per_class: usize,
    pub extents: [usize; 3],
    pub frames: usize,
    pub grid: GridSpec,
    pub signal_patches: Vec<usize>,
    pub signal_strength: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 42,
            n_per_class: 60,
            extents: [16, 16, 16],
            frames: 4,
            grid: GridSpec::default(),
            // two interior cells stand in for the disease-affected region
            signal_patches: vec![21, 42],
            signal_strength: 0.4,
            noise_sigma: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.signal_strength <= 0.0 {
            return Err(Error::Config("signal_strength must be > 0".into()));
        }
        let cells = self.grid.cells();
        for &p in &self.signal_patches {
            if p >= cells {
                return Err(Error::Config(format!(
                    "signal patch {p} outside grid of {cells} cells"
                )));
            }
        }
        Ok(())
    }

    /// Voxel membership mask of the signal cells at full resolution.
    fn signal_mask(&self) -> Vec<bool> {
        let [d, h, w] = self.extents;
        let g = self.grid.grid;
        let cell = [d.div_ceil(g[0]), h.div_ceil(g[1]), w.div_ceil(g[2])];
        let mut mask = vec![false; d * h * w];
        for &k in &self.signal_patches {
            let [gz, gy, gx] = self.grid.cell_coords(k);
            for z in gz * cell[0]..((gz + 1) * cell[0]).min(d) {
                for y in gy * cell[1]..((gy + 1) * cell[1]).min(h) {
                    for x in gx * cell[2]..((gx + 1) * cell[2]).min(w) {
                        mask[(z * h + y) * w + x] = true;
                    }
                }
            }
        }
        mask
    }
}

/// 3^3 box blur with edge renormalization (mean over in-bounds neighbors).
fn box_blur3<T: Scalar>(data: &[T], d: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                let mut count = 0usize;
                for dz in z.saturating_sub(1)..(z + 2).min(d) {
                    for dy in y.saturating_sub(1)..(y + 2).min(h) {
                        for dx in x.saturating_sub(1)..(x + 2).min(w) {
                            acc += data[(dz * h + dy) * w + dx];
                            count += 1;
                        }
                    }
                }
                out[(z * h + y) * w + x] = acc / lit::<T>(count as f64);
            }
        }
    }
    out
}

fn smooth_field<T: Scalar>(rng: &mut ChaCha20Rng, extents: [usize; 3], sigma: f64) -> Vec<T> {
    let [d, h, w] = extents;
    let noise = Tensor::<T>::randn(vec![d, h, w], rng).unwrap();
    box_blur3(noise.data(), d, h, w)
        .into_iter()
        .map(|v| v * lit::<T>(sigma))
        .collect()
}

/// Deterministically generate the cohort described by `spec`. Subjects
/// alternate class 0/1; everything is a pure function of the spec.
pub fn generate_synthetic_cohort<T: Scalar>(spec: &SyntheticSpec) -> Result<Vec<SubjectSample<T>>> {
    spec.validate()?;
    let [d, h, w] = spec.extents;
    let mask = spec.signal_mask();
    let mut cohort = Vec::with_capacity(2 * spec.n_per_class);
    for idx in 0..2 * spec.n_per_class {
        let label = idx % 2;
        let mut rng =
            ChaCha20Rng::seed_from_u64(spec.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(idx as u64 + 1)));

        // structural volume: smooth field around 1.0; class 1 is attenuated
        // inside the signal cells
        let mut t1: Vec<T> = smooth_field::<T>(&mut rng, spec.extents, spec.noise_sigma)
            .into_iter()
            .map(|v| v + T::one())
            .collect();
        if label == 1 {
            let s = lit::<T>(spec.signal_strength);
            for (v, &m) in t1.iter_mut().zip(&mask) {
                if m {
                    *v = *v - s;
                }
            }
        }

        // functional series: per-frame smooth fluctuation around 1.0;
        // class 1 has amplified fluctuation amplitude inside the signal cells
        let mut fmri = Vec::with_capacity(spec.frames * d * h * w);
        for _ in 0..spec.frames {
            let fluct = smooth_field::<T>(&mut rng, spec.extents, spec.noise_sigma);
            let gain = T::one() + lit::<T>(spec.signal_strength);
            for (i, v) in fluct.into_iter().enumerate() {
                let amp = if label == 1 && mask[i] { v * gain } else { v };
                fmri.push(T::one() + amp);
            }
        }

        cohort.push(SubjectSample {
            t1: Tensor::from_vec(vec![1, d, h, w], t1)?,
            fmri: Tensor::from_vec(vec![spec.frames, 1, d, h, w], fmri)?,
            label,
            subject_id: format!("subj_{idx:04}"),
        });
    }
    Ok(cohort)
}

// ---------------------------------------------------------------------------
// MVL1 volume format
// ---------------------------------------------------------------------------

const VOLUME_MAGIC: [u8; 4] = *b"MVL1";
const MAX_NDIM: u32 = 8;

/// Write a tensor as an MVL1 file: magic, u32 ndim, u32 extents, then the
/// row-major payload as little-endian f32.
pub fn save_volume<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(&VOLUME_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read an MVL1 file back. Round-trips are bit-exact for f32 tensors.
pub fn load_volume<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 8 {
        return Err(Error::TruncatedPayload {
            expected: 8,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: VOLUME_MAGIC,
            found: magic,
        });
    }
    let ndim = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::InvalidShape(format!("MVL1 ndim {ndim} out of range")));
    }
    let header = 8 + 4 * ndim as usize;
    if bytes.len() < header {
        return Err(Error::TruncatedPayload {
            expected: header,
            got: bytes.len(),
        });
    }
    let mut extents = Vec::with_capacity(ndim as usize);
    let mut numel: u64 = 1;
    for i in 0..ndim as usize {
        let e = u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        numel = numel.saturating_mul(e as u64);
        extents.push(e);
    }
    if numel > (1 << 33) {
        return Err(Error::ExtentOverflow(
            extents.iter().map(|&e| e as u64).collect(),
        ));
    }
    let expected = header + 4 * numel as usize;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            got: bytes.len(),
        });
    }
    let data: Vec<T> = bytes[header..]
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            T::from_f32(v).unwrap()
        })
        .collect();
    Tensor::from_vec(extents.into_iter().map(|e| e as usize).collect(), data)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Stratified train/test split: per class, a seeded shuffle and a
/// `fraction` cut. Partitions are disjoint and exhaustive.
pub fn split_train_test<T: Scalar>(
    cohort: &[SubjectSample<T>],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SubjectSample<T>>, Vec<SubjectSample<T>>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let classes: Vec<usize> = {
        let mut cs: Vec<usize> = cohort.iter().map(|s| s.label).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    };
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for &class in &classes {
        let mut members: Vec<usize> = cohort
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(class as u64));
        // Fisher-Yates with the seeded stream
        for i in (1..members.len()).rev() {
            let j = (rand::Rng::gen_range(&mut rng, 0..=i as u64)) as usize;
            members.swap(i, j);
        }
        let take = ((members.len() as f64) * fraction).round() as usize;
        let take = take.clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..take]);
        test_idx.extend_from_slice(&members[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| cohort[i].clone()).collect(),
        test_idx.iter().map(|&i| cohort[i].clone()).collect(),
    ))
}

// ---------------------------------------------------------------------------
// PGM and CSV export
// ---------------------------------------------------------------------------

/// Export one slice of a `[D, H, W]` volume as a binary 8-bit PGM, linearly
/// normalized to 0..255 (constant slices map to all zeros).
pub fn export_pgm_slice<T: Scalar>(
    t: &Tensor<T>,
    axis: usize,
    index: usize,
    path: &Path,
) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::InvalidShape(format!(
            "export_pgm_slice expects [D, H, W], got {:?}",
            t.shape()
        )));
    }
    if axis > 2 {
        return Err(Error::InvalidAxis { axis, rank: 3 });
    }
    if index >= t.shape()[axis] {
        return Err(Error::IndexOutOfRange {
            index,
            extent: t.shape()[axis],
        });
    }
    let (rows, cols): (usize, usize) = match axis {
        0 => (t.shape()[1], t.shape()[2]),
        1 => (t.shape()[0], t.shape()[2]),
        _ => (t.shape()[0], t.shape()[1]),
    };
    let mut vals = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let idx = match axis {
                0 => [index, r, c],
                1 => [r, index, c],
                _ => [r, c, index],
            };
            vals.push(t.at(&idx).to_f64().unwrap());
        }
    }
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(32 + vals.len());
    out.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    if max > min {
        for v in vals {
            out.push(((v - min) / (max - min) * 255.0).round() as u8);
        }
    } else {
        out.resize(out.len() + vals.len(), 0);
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write evaluation rows as CSV with 4-decimal metric values.
pub fn export_metrics_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut out = String::from("run,seed,task,accuracy,precision,recall\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4}\n",
            r.run, r.seed, r.task, r.accuracy, r.precision, r.recall
        ));
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}
