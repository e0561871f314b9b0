//! Training, evaluation, ablation and visualization over synthetic cohorts.

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{generate_synthetic_cohort, save_volume, SubjectSample};
use crate::error::{Error, Result};
use crate::model::fusion::FusionMode;
use crate::model::{Batch, Model, Objective};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::patch::{partition3d, partition4d, GridSpec, PatchSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub use checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint, CheckpointData};
pub use config::ExperimentConfig;
pub use metrics::{ConfusionCounts, MetricsReport};

// ---------------------------------------------------------------------------
// Collation: subjects -> patch-folded batches
// ---------------------------------------------------------------------------

/// Partition every subject and fold the patches into the channel axis:
/// t1 `[B, G*C, pd, ph, pw]`, fmri `[B, G*T*C, pd, ph, pw]`.
pub fn collate<T: Scalar>(samples: &[&SubjectSample<T>], grid: &GridSpec) -> Result<Batch<T>> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::InvalidShape("empty batch".into()));
    }
    let cells = grid.cells();
    let mut t1_data: Vec<T> = Vec::new();
    let mut fmri_data: Vec<T> = Vec::new();
    let mut patch_shape: Option<[usize; 3]> = None;
    let mut t1_chans = 0usize;
    let mut fmri_chans = 0usize;
    for s in samples {
        let ps = partition3d(&s.t1, grid)?;
        let pe = ps.patch_extents();
        if let Some(expect) = patch_shape {
            if expect != pe {
                return Err(Error::InconsistentPatches(expect.to_vec(), pe.to_vec()));
            }
        }
        patch_shape = Some(pe);
        t1_chans = s.t1.shape()[0];
        for p in &ps.patches {
            t1_data.extend_from_slice(p.data());
        }
        let pf = partition4d(&s.fmri, grid)?;
        fmri_chans = s.fmri.shape()[0] * s.fmri.shape()[1];
        for p in &pf.patches {
            fmri_data.extend_from_slice(p.data());
        }
    }
    let pe = patch_shape.unwrap();
    Ok(Batch {
        t1: Tensor::from_vec(
            vec![b, cells * t1_chans, pe[0], pe[1], pe[2]],
            t1_data,
        )?,
        fmri: Tensor::from_vec(
            vec![b, cells * fmri_chans, pe[0], pe[1], pe[2]],
            fmri_data,
        )?,
        labels: samples.iter().map(|s| s.label).collect(),
        ids: samples.iter().map(|s| s.subject_id.clone()).collect(),
    })
}

fn batch_hash(ids: &[String]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for id in ids {
        for &b in id.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= 0x0a;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// One logged optimization step.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub l_total: f64,
    pub l_s: f64,
    pub l_f: f64,
    pub l_reg: Option<f64>,
    pub recon_mse: f64,
    pub batch_hash: u64,
}

/// Render the per-step log; byte-stable for identical runs.
pub fn trace_to_text(rows: &[TraceRow]) -> String {
    let mut out = String::from("# step l_total l_s l_f l_reg recon_mse batch_hash\n");
    for r in rows {
        let lreg = match r.l_reg {
            Some(v) => format!("{v:.6}"),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {} {:.6} {:016x}\n",
            r.step, r.l_total, r.l_s, r.l_f, lreg, r.recon_mse, r.batch_hash
        ));
    }
    out
}

fn training_loop<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    lr: f64,
    data: &[SubjectSample<T>],
    batch_size: usize,
    steps: usize,
    objective: Objective,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    let grid = model.cfg.grid;
    let adam_cfg = AdamConfig::<T>::with_lr(lit(lr));
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7261696e5f6f7264);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = data.len(); // force a shuffle on the first step
    let mut trace = Vec::with_capacity(steps);

    for step in 0..steps {
        if pos >= data.len() {
            for i in (1..order.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i as u64) as usize;
                order.swap(i, j);
            }
            pos = 0;
        }
        let take = batch_size.min(data.len() - pos);
        let refs: Vec<&SubjectSample<T>> = order[pos..pos + take].iter().map(|&i| &data[i]).collect();
        pos += take;

        let batch = collate(&refs, &grid)?;
        let hash = batch_hash(&batch.ids);
        let pass = model.forward(&batch, objective)?;
        let l_total = pass.tape.value(pass.l_total).item().to_f64().unwrap();
        if !l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let row = TraceRow {
            step,
            l_total,
            l_s: pass.tape.value(pass.l_s).item().to_f64().unwrap(),
            l_f: pass.tape.value(pass.l_f).item().to_f64().unwrap(),
            l_reg: pass
                .l_reg
                .map(|v| pass.tape.value(v).item().to_f64().unwrap()),
            recon_mse: pass.recon_mse(),
            batch_hash: hash,
        };
        let grads = pass.tape.backward(pass.l_total)?;
        pass.binder.harvest(&grads, &mut model.params);
        adam_step(&mut model.params, adam, &adam_cfg);
        trace.push(row);
    }
    Ok(trace)
}

/// Forward-only mean reconstruction MSE over a cohort (per-voxel, both
/// modalities pooled).
pub fn reconstruction_mse<T: Scalar>(
    model: &mut Model<T>,
    cohort: &[SubjectSample<T>],
    batch_size: usize,
) -> Result<f64> {
    let grid = model.cfg.grid;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for chunk in cohort.chunks(batch_size.max(1)) {
        let refs: Vec<&SubjectSample<T>> = chunk.iter().collect();
        let batch = collate(&refs, &grid)?;
        let pass = model.forward(&batch, Objective::Pretrain)?;
        total += pass.recon_mse() * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Result of a pretraining run.
pub struct PretrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub trace: Vec<TraceRow>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Minimize L_s + L_f over the cohort for `pretrain_steps`.
pub fn pretrain_autoencoders<T: Scalar>(
    cfg: &ExperimentConfig,
    cohort: &[SubjectSample<T>],
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::Config("pretraining needs a non-empty cohort".into()));
    }
    let mut model = Model::new(cfg.model_config::<T>(), cfg.seed);
    let mut adam = AdamState::default();
    let initial_mse = reconstruction_mse(&mut model, cohort, cfg.batch_size)?;
    let trace = training_loop(
        &mut model,
        &mut adam,
        cfg.lr,
        cohort,
        cfg.batch_size,
        cfg.pretrain_steps,
        Objective::Pretrain,
        cfg.seed,
    )?;
    let final_mse = reconstruction_mse(&mut model, cohort, cfg.batch_size)?;
    Ok(PretrainOutcome {
        model,
        adam,
        trace,
        initial_mse,
        final_mse,
    })
}

/// Result of an end-to-end training run.
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub trace: Vec<TraceRow>,
    pub metrics: MetricsReport,
    pub train_count: usize,
    pub test_count: usize,
}

/// Split the cohort, minimize the total objective on the training split and
/// evaluate on the held-out split.
pub fn train_end_to_end<T: Scalar>(
    cfg: &ExperimentConfig,
    cohort: &[SubjectSample<T>],
    init: Option<&CheckpointData<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (train, test) = crate::data::split_train_test(cohort, cfg.train_fraction, cfg.seed)?;
    let mut model = Model::new(cfg.model_config::<T>(), cfg.seed);
    let mut adam = AdamState::default();
    if let Some(data) = init {
        apply_checkpoint(data, &mut model, &mut adam);
    }
    let trace = training_loop(
        &mut model,
        &mut adam,
        cfg.lr,
        &train,
        cfg.batch_size,
        cfg.train_steps,
        Objective::Full,
        cfg.seed,
    )?;
    let metrics = evaluate(
        &mut model,
        &test,
        cfg.batch_size,
        cfg.fusion_mode.as_str(),
        cfg.seed,
    )?;
    Ok(TrainOutcome {
        model,
        adam,
        trace,
        metrics,
        train_count: train.len(),
        test_count: test.len(),
    })
}

/// Classify a held-out split and derive accuracy/precision/recall, with
/// class 1 as the positive class.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    test: &[SubjectSample<T>],
    batch_size: usize,
    run: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Config("evaluation needs a non-empty split".into()));
    }
    let grid = model.cfg.grid;
    let mut predicted = Vec::with_capacity(test.len());
    let mut actual = Vec::with_capacity(test.len());
    for chunk in test.chunks(batch_size.max(1)) {
        let refs: Vec<&SubjectSample<T>> = chunk.iter().collect();
        let batch = collate(&refs, &grid)?;
        let pass = model.forward(&batch, Objective::Full)?;
        predicted.extend(pass.predicted_classes());
        actual.extend(batch.labels.iter().copied());
    }
    let counts = ConfusionCounts::from_predictions(&predicted, &actual);
    Ok(MetricsReport::from_counts(run, seed, "ad_vs_nc", counts))
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Paired comparison of the two fusion modes over the configured seeds.
pub struct AblationOutcome {
    /// Two rows per seed: attention then addition.
    pub rows: Vec<MetricsReport>,
    /// Mean [accuracy, precision, recall] per arm.
    pub mean_attention: [f64; 3],
    pub mean_addition: [f64; 3],
    /// Per seed: (seed, signal-cell mean, background mean) of the attention
    /// arm's embedding map for the first class-1 test subject.
    pub localization: Vec<(u64, f64, f64)>,
}

/// Per seed: pretrain the autoencoders on the train split once, then train
/// both fusion arms end-to-end from the identical pretrained weights, with
/// configs differing only in `fusion_mode` and identical batch order.
pub fn run_ablation<T: Scalar>(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut sums = [[0.0f64; 3]; 2];
    let mut localization = Vec::new();
    for &seed in &cfg.ablation_seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        let cohort = generate_synthetic_cohort::<T>(&base.synthetic_spec())?;
        let (train_split, test_split) =
            crate::data::split_train_test(&cohort, base.train_fraction, base.seed)?;
        let pre = pretrain_autoencoders::<T>(&base, &train_split)?;
        // weights only: the new objective starts with fresh optimizer state
        let init = checkpoint::snapshot(&pre.model, &AdamState::default(), base.fingerprint());

        let arm = |mode: FusionMode| -> Result<(TrainOutcome<T>, ExperimentConfig)> {
            let mut c = base.clone();
            c.fusion_mode = mode;
            Ok((train_end_to_end(&c, &cohort, Some(&init))?, c))
        };
        let (mut attention, cfg_a) = arm(FusionMode::Attention)?;
        let (addition, cfg_b) = arm(FusionMode::Addition)?;

        // controlled-experiment contract: identical batches, configs that
        // differ only in fusion_mode
        let hashes = |o: &TrainOutcome<T>| o.trace.iter().map(|r| r.batch_hash).collect::<Vec<_>>();
        assert_eq!(
            hashes(&attention),
            hashes(&addition),
            "paired runs must consume identical batches"
        );
        assert_ne!(cfg_a.fingerprint(), cfg_b.fingerprint());
        assert_eq!(
            cfg_a.fingerprint_excluding(&["fusion_mode"]),
            cfg_b.fingerprint_excluding(&["fusion_mode"])
        );

        if let Some(sample) = test_split.iter().find(|s| s.label == 1) {
            let map = export_embedding_map(&mut attention.model, sample, None, None)?;
            let (signal, background) =
                signal_background_means(&map, &attention.model.cfg.grid, &base.signal_patches);
            localization.push((seed, signal, background));
        }

        for (i, o) in [&attention, &addition].into_iter().enumerate() {
            sums[i][0] += o.metrics.accuracy;
            sums[i][1] += o.metrics.precision;
            sums[i][2] += o.metrics.recall;
        }
        rows.push(attention.metrics);
        rows.push(addition.metrics);
    }
    let n = cfg.ablation_seeds.len().max(1) as f64;
    Ok(AblationOutcome {
        rows,
        mean_attention: [sums[0][0] / n, sums[0][1] / n, sums[0][2] / n],
        mean_addition: [sums[1][0] / n, sums[1][1] / n, sums[1][2] / n],
        localization,
    })
}

// ---------------------------------------------------------------------------
// Embedding map export
// ---------------------------------------------------------------------------

/// Per-patch mean absolute fused feature, painted uniformly into the grid
/// cells of a full-extent volume. Returns the weight volume `[D, H, W]`;
/// also writes it as MVL1 plus a mid-axial PGM slice when paths are given.
pub fn export_embedding_map<T: Scalar>(
    model: &mut Model<T>,
    sample: &SubjectSample<T>,
    volume_path: Option<&Path>,
    pgm_path: Option<&Path>,
) -> Result<Tensor<T>> {
    let grid = model.cfg.grid;
    let batch = collate(&[sample], &grid)?;
    let pass = model.forward(&batch, Objective::Full)?;
    let fused = pass
        .fusion
        .as_ref()
        .map(|f| pass.tape.value(f.fused))
        .expect("full objective builds the fusion stage");

    // mean |feature| per region over channels and cell voxels
    let shape = fused.shape();
    let geom = model.cfg.region_geom([
        batch.t1.shape()[2],
        batch.t1.shape()[3],
        batch.t1.shape()[4],
    ]);
    let [bd, bh, bw] = geom.cell;
    let (c, dd, hh) = (shape[1], shape[2], shape[3]);
    let ww = shape[4];
    let mut region_scores = vec![0.0f64; geom.cells()];
    for (k, score) in region_scores.iter_mut().enumerate() {
        let [gz, gy, gx] = grid.cell_coords(k);
        let mut acc = 0.0f64;
        for ch in 0..c {
            for z in gz * bd..(gz + 1) * bd {
                for y in gy * bh..(gy + 1) * bh {
                    for x in gx * bw..(gx + 1) * bw {
                        let idx = ((ch * dd + z) * hh + y) * ww + x;
                        acc += fused.data()[idx].to_f64().unwrap().abs();
                    }
                }
            }
        }
        *score = acc / (c * bd * bh * bw) as f64;
    }

    // paint scores into full-resolution cells and crop via reassembly
    let ps = partition3d(&sample.t1, &grid)?;
    let pe = ps.patch_extents();
    let painted: Vec<Tensor<T>> = region_scores
        .iter()
        .map(|&s| Tensor::full(vec![1, pe[0], pe[1], pe[2]], lit(s)).unwrap())
        .collect();
    let painted_set = PatchSet {
        patches: painted,
        original_extents: ps.original_extents,
        padded_extents: ps.padded_extents,
        grid,
    };
    let map4 = crate::patch::reassemble3d(&painted_set)?;
    let [d, h, w] = ps.original_extents;
    let map = map4.reshaped(vec![d, h, w])?;

    if let Some(p) = volume_path {
        save_volume(&map, p)?;
    }
    if let Some(p) = pgm_path {
        crate::data::export_pgm_slice(&map, 0, d / 2, p)?;
    }
    Ok(map)
}

/// Mean map value inside the signal cells vs. the background-cell mean.
pub fn signal_background_means<T: Scalar>(
    map: &Tensor<T>,
    grid: &GridSpec,
    signal_patches: &[usize],
) -> (f64, f64) {
    let [d, h, w] = [map.shape()[0], map.shape()[1], map.shape()[2]];
    let cell = [
        d.div_ceil(grid.grid[0]),
        h.div_ceil(grid.grid[1]),
        w.div_ceil(grid.grid[2]),
    ];
    let mut sums = vec![0.0f64; grid.cells()];
    let mut counts = vec![0usize; grid.cells()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let k = (z / cell[0]) * grid.grid[1] * grid.grid[2]
                    + (y / cell[1]) * grid.grid[2]
                    + (x / cell[2]);
                sums[k] += map.at(&[z, y, x]).to_f64().unwrap();
                counts[k] += 1;
            }
        }
    }
    let mut signal = 0.0;
    let mut background = 0.0;
    let mut ns = 0usize;
    let mut nb = 0usize;
    for k in 0..grid.cells() {
        let mean = sums[k] / counts[k].max(1) as f64;
        if signal_patches.contains(&k) {
            signal += mean;
            ns += 1;
        } else {
            background += mean;
            nb += 1;
        }
    }
    (signal / ns.max(1) as f64, background / nb.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("n_per_class", "4"),
            ("extents", "8,8,8"),
            ("frames", "2"),
            ("grid", "2,2,2"),
            ("signal_patches", "1,6"),
            ("channel_schedule", "2,4"),
            ("bottleneck_channels", "4"),
            ("mlp_hidden", "8"),
            ("pretrain_steps", "2"),
            ("train_steps", "3"),
            ("batch_size", "2"),
            ("train_fraction", "0.5"),
            ("ablation_seeds", "1"),
        ] {
            cfg.apply(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn collate_shapes_and_order() {
        let spec = SyntheticSpec {
            n_per_class: 2,
            extents: [8, 8, 8],
            frames: 2,
            grid: GridSpec::new(2, 2, 2),
            signal_patches: vec![1],
            ..SyntheticSpec::default()
        };
        let cohort = generate_synthetic_cohort::<f32>(&spec).unwrap();
        let refs: Vec<&SubjectSample<f32>> = cohort.iter().collect();
        let batch = collate(&refs, &spec.grid).unwrap();
        assert_eq!(batch.t1.shape(), &[4, 8, 4, 4, 4]);
        assert_eq!(batch.fmri.shape(), &[4, 16, 4, 4, 4]);
        // patch 0 of subject 0 matches a direct partition
        let ps = partition3d(&cohort[0].t1, &spec.grid).unwrap();
        assert_eq!(&batch.t1.data()[..64], ps.patches[0].data());
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let mut cfg = tiny_cfg();
        cfg.apply("pretrain_steps", "30").unwrap();
        let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec()).unwrap();
        let out = pretrain_autoencoders::<f32>(&cfg, &cohort).unwrap();
        assert!(out.final_mse < out.initial_mse, "{} !< {}", out.final_mse, out.initial_mse);
        assert_eq!(out.trace.len(), 30);
    }

    #[test]
    fn zero_step_pretrain_equals_initialization() {
        let mut cfg = tiny_cfg();
        cfg.apply("pretrain_steps", "0").unwrap();
        let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec()).unwrap();
        let out = pretrain_autoencoders::<f32>(&cfg, &cohort).unwrap();
        // a fresh model with the same seed has identical parameters
        let mut fresh = Model::<f32>::new(cfg.model_config(), cfg.seed);
        let refs: Vec<&SubjectSample<f32>> = cohort.iter().take(1).collect();
        let batch = collate(&refs, &fresh.cfg.grid).unwrap();
        fresh.forward(&batch, Objective::Pretrain).unwrap();
        for p in fresh.params.iter() {
            let q = out.model.params.get(&p.name).unwrap();
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let cfg = tiny_cfg();
        let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec()).unwrap();
        let a = train_end_to_end::<f32>(&cfg, &cohort, None).unwrap();
        let b = train_end_to_end::<f32>(&cfg, &cohort, None).unwrap();
        assert_eq!(trace_to_text(&a.trace), trace_to_text(&b.trace));
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.train_count, 4);
        assert_eq!(a.test_count, 4);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mck");
        let cfg = tiny_cfg();
        let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec()).unwrap();
        let mut out = train_end_to_end::<f32>(&cfg, &cohort, None).unwrap();
        save_checkpoint(&path, &out.model, &out.adam, cfg.fingerprint()).unwrap();

        let data = load_checkpoint::<f32>(&path).unwrap();
        let mut restored = Model::<f32>::new(cfg.model_config(), 777);
        let mut adam2 = AdamState::default();
        apply_checkpoint(&data, &mut restored, &mut adam2);

        let refs: Vec<&SubjectSample<f32>> = cohort.iter().take(2).collect();
        let batch = collate(&refs, &restored.cfg.grid).unwrap();
        let p1 = out.model.forward(&batch, Objective::Full).unwrap();
        let p2 = restored.forward(&batch, Objective::Full).unwrap();
        let a = p1.tape.value(p1.prediction.as_ref().unwrap().probs);
        let b = p2.tape.value(p2.prediction.as_ref().unwrap().probs);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn ablation_pairs_runs_per_seed() {
        let cfg = tiny_cfg();
        let out = run_ablation::<f32>(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].run, "attention");
        assert_eq!(out.rows[1].run, "addition");
        assert_eq!(out.rows[0].seed, 1);
    }

    #[test]
    fn embedding_map_is_constant_per_cell() {
        let cfg = tiny_cfg();
        let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec()).unwrap();
        let mut out = train_end_to_end::<f32>(&cfg, &cohort, None).unwrap();
        let map = export_embedding_map(&mut out.model, &cohort[1], None, None).unwrap();
        assert_eq!(map.shape(), &[8, 8, 8]);
        // constant within each 4^3 cell
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(
                        map.at(&[z, y, x]),
                        map.at(&[z / 4 * 4, y / 4 * 4, x / 4 * 4])
                    );
                }
            }
        }
    }

    #[test]
    fn diverged_training_names_the_step() {
        let mut cfg = tiny_cfg();
        cfg.apply("lr", "1e10").unwrap();
        cfg.apply("train_steps", "20").unwrap();
        let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec()).unwrap();
        match train_end_to_end::<f32>(&cfg, &cohort, None) {
            Err(Error::Diverged { .. }) => {}
            Err(other) => panic!("expected divergence, got {other:?}"),
            Ok(_) => panic!("expected divergence, run succeeded"),
        }
    }
}
