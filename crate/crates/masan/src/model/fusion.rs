//! Region self-attention and the structural-guided attention fusion of the
//! two modality feature maps, plus the plain-addition ablation baseline.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Graph;
use crate::ops::ReduceOp;
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};

/// How the two modality maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Channel+spatial gates on the structural map modulate the functional
    /// map with a residual path.
    Attention,
    /// Plain element-wise addition (ablation baseline).
    Addition,
}

/// Where region self-attention sits relative to the map-level fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineOrder {
    /// Self-attention per modality first, then fuse the assembled maps.
    AttentionThenFuse,
    /// Fuse raw maps first, then self-attention over the fused regions.
    FuseThenAttention,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Attention => "attention",
            FusionMode::Addition => "addition",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "addition" => Ok(FusionMode::Addition),
            other => Err(Error::Config(format!("unknown fusion_mode '{other}'"))),
        }
    }
}

impl PipelineOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineOrder::AttentionThenFuse => "attention_then_fuse",
            PipelineOrder::FuseThenAttention => "fuse_then_attention",
        }
    }
}

impl std::str::FromStr for PipelineOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_then_fuse" => Ok(PipelineOrder::AttentionThenFuse),
            "fuse_then_attention" => Ok(PipelineOrder::FuseThenAttention),
            other => Err(Error::Config(format!("unknown pipeline_order '{other}'"))),
        }
    }
}

/// Project flattened region features `[R, dim]` with the three square
/// parameter matrices. Row i of each output depends only on region i.
pub fn project_qkv<T: Scalar>(
    tape: &mut Tape<T>,
    regions: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(regions, wq)?;
    let k = tape.matmul(regions, wk)?;
    let v = tape.matmul(regions, wv)?;
    Ok((q, k, v))
}

/// weight_ij = softmax_j(query_i . key_j); new_region_i = sum_j w_ij value_j.
/// Returns the updated regions and the attention weight matrix.
pub fn region_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    scaled: bool,
) -> Result<(Var, Var)> {
    let kt = tape.transpose2d(k)?;
    let mut scores = tape.matmul(q, kt)?;
    if scaled {
        let dk = tape.shape(q)[1];
        scores = tape.scale(scores, T::one() / lit::<T>(dk as f64).sqrt())?;
    }
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Geometry of the region grid at the bottleneck resolution.
#[derive(Debug, Clone, Copy)]
pub struct RegionGeom {
    pub grid: [usize; 3],
    pub channels: usize,
    pub cell: [usize; 3],
}

impl RegionGeom {
    pub fn cells(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn cell_voxels(&self) -> usize {
        self.cell.iter().product()
    }

    /// Flattened per-region feature width.
    pub fn region_dim(&self) -> usize {
        self.channels * self.cell_voxels()
    }

    pub fn map_shape(&self, batch: usize) -> Vec<usize> {
        vec![
            batch,
            self.channels,
            self.grid[0] * self.cell[0],
            self.grid[1] * self.cell[1],
            self.grid[2] * self.cell[2],
        ]
    }

    /// Element map turning `[B, R, region_dim]` into the assembled
    /// `[B, C, D', H', W']` map (out index -> in index).
    fn assemble_map(&self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let out_shape = self.map_shape(batch);
        let [gz, gy, gx] = self.grid;
        let [bd, bh, bw] = self.cell;
        let c = self.channels;
        let cellvox = self.cell_voxels();
        let rdim = self.region_dim();
        let mut map = Vec::with_capacity(out_shape.iter().product());
        for n in 0..batch {
            for ch in 0..c {
                for z in 0..gz * bd {
                    for y in 0..gy * bh {
                        for x in 0..gx * bw {
                            let r = (z / bd) * gy * gx + (y / bh) * gx + (x / bw);
                            let within = ((z % bd) * bh + (y % bh)) * bw + (x % bw);
                            map.push((n * gz * gy * gx + r) * rdim + ch * cellvox + within);
                        }
                    }
                }
            }
        }
        (map, out_shape)
    }

    /// Inverse element map: assembled map back to `[B, R, region_dim]`.
    fn split_map(&self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let (fwd, out_shape) = self.assemble_map(batch);
        let mut inv = vec![0usize; fwd.len()];
        for (dst, &src) in fwd.iter().enumerate() {
            inv[src] = dst;
        }
        let _ = out_shape;
        let in_shape = vec![batch, self.cells(), self.region_dim()];
        (inv, in_shape)
    }
}

/// Tile per-region vectors into a spatial feature map on the bottleneck grid.
pub fn assemble_regions<T: Scalar>(
    tape: &mut Tape<T>,
    regions: Var,
    geom: &RegionGeom,
) -> Result<Var> {
    let shape = tape.shape(regions).to_vec();
    if shape.len() != 3 || shape[1] != geom.cells() || shape[2] != geom.region_dim() {
        return Err(Error::InvalidShape(format!(
            "assemble_regions expects [B, {}, {}], got {shape:?}",
            geom.cells(),
            geom.region_dim()
        )));
    }
    let (map, out_shape) = geom.assemble_map(shape[0]);
    tape.gather(regions, Arc::new(map), out_shape)
}

/// Inverse of [`assemble_regions`].
pub fn split_regions<T: Scalar>(tape: &mut Tape<T>, map: Var, geom: &RegionGeom) -> Result<Var> {
    let shape = tape.shape(map).to_vec();
    if shape != geom.map_shape(shape[0]) {
        return Err(Error::InvalidShape(format!(
            "split_regions expects {:?}, got {shape:?}",
            geom.map_shape(shape[0])
        )));
    }
    let (inv, out_shape) = geom.split_map(shape[0]);
    tape.gather(map, Arc::new(inv), out_shape)
}

/// Per-channel multiplicative gate from the globally max-pooled channel
/// vector through a two-layer bottleneck MLP and a sigmoid.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    f: Var,
    reduction: usize,
) -> Result<Var> {
    let shape = g.tape.shape(f).to_vec();
    let (b, c) = (shape[0], shape[1]);
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::Config(format!(
            "channel_attention reduction ratio {reduction} does not divide {c} channels"
        )));
    }
    let hidden = c / reduction;
    let pooled = g.tape.reduce(ReduceOp::Max, f, &[2, 3, 4], false)?;
    let z = g.linear(&format!("{prefix}.fc0"), pooled, c, hidden)?;
    let z = g.tape.relu(z)?;
    let z = g.linear(&format!("{prefix}.fc1"), z, hidden, c)?;
    let gate = g.tape.sigmoid(z)?;
    let gate = g.tape.reshape(gate, vec![b, c, 1, 1, 1])?;
    let gate = g.tape.expand(gate, &shape)?;
    g.tape.mul(f, gate)
}

/// Per-voxel multiplicative gate: max over channels, a 3^3 convolution and a
/// sigmoid, broadcast back over channels.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, f: Var) -> Result<Var> {
    let shape = g.tape.shape(f).to_vec();
    let cmax = g.tape.reduce(ReduceOp::Max, f, &[1], true)?;
    let conv = g.conv(&format!("{prefix}.conv"), cmax, 1, 1, 3, 1, 1)?;
    let gate = g.tape.sigmoid(conv)?;
    let gate = g.tape.expand(gate, &shape)?;
    g.tape.mul(f, gate)
}

/// f_fusion = f_fmri * gate + f_fmri (element-wise, identical shapes).
pub fn t1_guided_fuse<T: Scalar>(tape: &mut Tape<T>, f_fmri: Var, f_t1s: Var) -> Result<Var> {
    if tape.shape(f_fmri) != tape.shape(f_t1s) {
        return Err(Error::ShapeMismatch {
            op: "t1_guided_fuse",
            lhs: tape.shape(f_fmri).to_vec(),
            rhs: tape.shape(f_t1s).to_vec(),
        });
    }
    let prod = tape.mul(f_fmri, f_t1s)?;
    tape.add(prod, f_fmri)
}

/// Element-wise sum of the two maps (ablation baseline).
pub fn addition_fuse<T: Scalar>(tape: &mut Tape<T>, f_fmri: Var, f_t1: Var) -> Result<Var> {
    if tape.shape(f_fmri) != tape.shape(f_t1) {
        return Err(Error::ShapeMismatch {
            op: "addition_fuse",
            lhs: tape.shape(f_fmri).to_vec(),
            rhs: tape.shape(f_t1).to_vec(),
        });
    }
    tape.add(f_fmri, f_t1)
}

/// Batched self-attention stage: regions `[B, R, dim]` in and out, with one
/// shared q/k/v projection per stage prefix.
///
/// The key projection starts equal to the query projection: initial scores
/// are then a Gram matrix, so attention begins self-focused instead of
/// mixing every region into a near-uniform average. Training is free to
/// break the symmetry.
pub fn self_attention_stage<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    regions: Var,
    scaled: bool,
) -> Result<Var> {
    let shape = g.tape.shape(regions).to_vec();
    let (b, r, dim) = (shape[0], shape[1], shape[2]);
    let wq = g.proj_param(&format!("{prefix}.q.w"), dim)?;
    let k_name = format!("{prefix}.k.w");
    if !g.store.contains(&k_name) {
        let q_value = g.tape.value(wq).clone();
        g.store.insert(crate::params::Parameter {
            name: k_name.clone(),
            grad: crate::tensor::Tensor::zeros(q_value.shape().to_vec())?,
            value: q_value,
        });
    }
    let wk = g.proj_param(&k_name, dim)?;
    let wv = g.proj_param(&format!("{prefix}.v.w"), dim)?;
    let flat = g.tape.reshape(regions, vec![b * r, dim])?;
    let (q, k, v) = project_qkv(g.tape, flat, wq, wk, wv)?;
    let q3 = g.tape.reshape(q, vec![b, r, dim])?;
    let k3 = g.tape.reshape(k, vec![b, r, dim])?;
    let v3 = g.tape.reshape(v, vec![b, r, dim])?;
    let mut per_sample = Vec::with_capacity(b);
    for s in 0..b {
        let qs = g.tape.index_axis0(q3, s)?;
        let ks = g.tape.index_axis0(k3, s)?;
        let vs = g.tape.index_axis0(v3, s)?;
        let (nr, _weights) = region_self_attention(g.tape, qs, ks, vs, scaled)?;
        let row = g.tape.reshape(nr, vec![1, r, dim])?;
        per_sample.push(row);
    }
    g.tape.concat(&per_sample, 0)
}

/// Outputs of the fusion stage: the two assembled modality maps and the
/// fused map the classifier consumes.
pub struct FusionOutput {
    pub f_t1: Var,
    pub f_fmri: Var,
    pub fused: Var,
}

pub struct FusionSettings {
    pub mode: FusionMode,
    pub order: PipelineOrder,
    pub reduction: usize,
    pub scaled_dot: bool,
}

fn apply_map_fusion<T: Scalar>(
    g: &mut Graph<'_, T>,
    settings: &FusionSettings,
    f_fmri: Var,
    f_t1: Var,
) -> Result<Var> {
    match settings.mode {
        FusionMode::Attention => {
            let c = channel_attention(g, "fusion.gate.ch", f_t1, settings.reduction)?;
            let s = spatial_attention(g, "fusion.gate.sp", c)?;
            t1_guided_fuse(g.tape, f_fmri, s)
        }
        FusionMode::Addition => addition_fuse(g.tape, f_fmri, f_t1),
    }
}

/// Full fusion pipeline from the two folded bottleneck encodings
/// (`[B, G*C, bd, bh, bw]` or the shared-layout equivalent).
pub fn fuse_pipeline<T: Scalar>(
    g: &mut Graph<'_, T>,
    settings: &FusionSettings,
    h_t1: Var,
    h_fmri: Var,
    batch: usize,
    geom: &RegionGeom,
) -> Result<FusionOutput> {
    let regions_shape = vec![batch, geom.cells(), geom.region_dim()];
    let rt1 = g.tape.reshape(h_t1, regions_shape.clone())?;
    let rfm = g.tape.reshape(h_fmri, regions_shape)?;
    match settings.order {
        PipelineOrder::AttentionThenFuse => {
            let at1 = self_attention_stage(g, "fusion.t1", rt1, settings.scaled_dot)?;
            let afm = self_attention_stage(g, "fusion.fmri", rfm, settings.scaled_dot)?;
            let f_t1 = assemble_regions(g.tape, at1, geom)?;
            let f_fmri = assemble_regions(g.tape, afm, geom)?;
            let fused = apply_map_fusion(g, settings, f_fmri, f_t1)?;
            Ok(FusionOutput { f_t1, f_fmri, fused })
        }
        PipelineOrder::FuseThenAttention => {
            let f_t1 = assemble_regions(g.tape, rt1, geom)?;
            let f_fmri = assemble_regions(g.tape, rfm, geom)?;
            let fused0 = apply_map_fusion(g, settings, f_fmri, f_t1)?;
            let fregions = split_regions(g.tape, fused0, geom)?;
            let fattn = self_attention_stage(g, "fusion.joint", fregions, settings.scaled_dot)?;
            let fused = assemble_regions(g.tape, fattn, geom)?;
            Ok(FusionOutput { f_t1, f_fmri, fused })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Binder, ParamStore};
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn eye(n: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros(vec![n, n]).unwrap();
        for i in 0..n {
            t.set(&[i, i], 1.0);
        }
        t
    }

    #[test]
    fn identity_projection_returns_regions() {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let regions = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let r = tape.constant(regions.clone());
        let id = tape.constant(eye(4));
        let (q, k, v) = project_qkv(&mut tape, r, id, id, id).unwrap();
        assert_eq!(tape.value(q).data(), regions.data());
        assert_eq!(tape.value(k).data(), regions.data());
        assert_eq!(tape.value(v).data(), regions.data());
    }

    #[test]
    fn zero_projection_gives_zero_qkv() {
        let mut tape = Tape::<f32>::new();
        let r = tape.constant(Tensor::ones(vec![2, 3]).unwrap());
        let z = tape.constant(Tensor::zeros(vec![3, 3]).unwrap());
        let (q, _, _) = project_qkv(&mut tape, r, z, z, z).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let regions = Tensor::<f32>::randn(vec![4, 5], &mut rng).unwrap();
        let w = Tensor::<f32>::randn(vec![5, 5], &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let r = tape.constant(regions.clone());
        let wv = tape.constant(w.clone());
        let (q, _, _) = project_qkv(&mut tape, r, wv, wv, wv).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for l in 0..5 {
                    acc += regions.at(&[i, l]) * w.at(&[l, j]);
                }
                assert!((acc - tape.value(q).at(&[i, j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_region_attention_is_identity() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::from_vec(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::from_vec(vec![1, 3], vec![5.0, 6.0, 7.0]).unwrap());
        let (out, w) = region_self_attention(&mut tape, q, q, v, false).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::from_vec(vec![2, 2], vec![0.5, -0.3, 1.0, 0.2]).unwrap());
        let k = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::from_vec(vec![2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        let (out, w) = region_self_attention(&mut tape, q, k, v, false).unwrap();
        for &x in tape.value(w).data() {
            assert!((x - 0.5).abs() < 1e-6);
        }
        assert!((tape.value(out).at(&[0, 0]) - 2.0).abs() < 1e-6);
        assert!((tape.value(out).at(&[0, 1]) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn attention_matches_exp_normalize_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let q = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let k = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let v = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let (out, _) = region_self_attention(&mut tape, qv, kv, vv, false).unwrap();
        // independent oracle: direct exp-normalize and weighted sum
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    (0..4)
                        .map(|d| (q.at(&[i, d]) * k.at(&[j, d])) as f64)
                        .sum()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..4 {
                let expect: f64 = (0..3)
                    .map(|j| exps[j] / z * v.at(&[j, d]) as f64)
                    .sum();
                let got = tape.value(out).at(&[i, d]) as f64;
                assert!((expect - got).abs() < 1e-5, "{expect} vs {got}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_convex_envelope() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let q = Tensor::<f32>::randn(vec![5, 6], &mut rng).unwrap();
        let k = Tensor::<f32>::randn(vec![5, 6], &mut rng).unwrap();
        let v = Tensor::<f32>::randn(vec![5, 6], &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let (qv, kv, vv) = (
            tape.constant(q),
            tape.constant(k),
            tape.constant(v.clone()),
        );
        let (out, w) = region_self_attention(&mut tape, qv, kv, vv, false).unwrap();
        for i in 0..5 {
            let row: f32 = (0..5).map(|j| tape.value(w).at(&[i, j])).sum();
            assert!((row - 1.0).abs() < 1e-5);
            for d in 0..6 {
                let col: Vec<f32> = (0..5).map(|j| v.at(&[j, d])).collect();
                let lo = col.iter().cloned().fold(f32::MAX, f32::min);
                let hi = col.iter().cloned().fold(f32::MIN, f32::max);
                let o = tape.value(out).at(&[i, d]);
                assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn equal_logit_shift_leaves_weights_unchanged() {
        // adding a constant to every score in a row cannot change softmax
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let q = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let k = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let v = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();

        // shift every key by the same vector u with q rows normalized so the
        // shift contributes the same constant to each <q_i, k_j>: use a rank
        // preserving trick by appending a constant column instead.
        let mut tape = Tape::<f32>::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let (_, w0) = region_self_attention(&mut tape, qv, kv, vv, false).unwrap();
        let w0 = tape.value(w0).clone();

        // augment: q' = [q, 1], k' = [k, c]; <q'_i, k'_j> = <q_i, k_j> + c
        let c = 3.7f32;
        let aug = |t: &Tensor<f32>, fill: f32| {
            let mut data = Vec::new();
            for i in 0..3 {
                data.extend_from_slice(&t.data()[i * 4..(i + 1) * 4]);
                data.push(fill);
            }
            Tensor::from_vec(vec![3, 5], data).unwrap()
        };
        let (qa, ka, va) = (aug(&q, 1.0), aug(&k, c), v.clone());
        let mut tape2 = Tape::<f32>::new();
        let (qv2, kv2, vv2) = (
            tape2.constant(qa),
            tape2.constant(ka),
            tape2.constant(va.reshaped(vec![3, 4]).unwrap()),
        );
        let (_, w1) = region_self_attention(&mut tape2, qv2, kv2, vv2, false).unwrap();
        for (a, b) in w0.data().iter().zip(tape2.value(w1).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn graph_fixture(
        seed: u64,
    ) -> (ParamStore<f32>, Tape<f32>, Binder) {
        (ParamStore::new(seed), Tape::new(), Binder::new())
    }

    #[test]
    fn zero_weight_gates_scale_by_half() {
        // all gate parameters zero -> sigmoid(0) = 0.5 everywhere
        let (mut store, mut tape, mut binder) = graph_fixture(0);
        // pre-create gate params as zeros
        use crate::params::Init;
        store.get_or_init("g.fc0.w", &[4, 1], Init::Zeros).unwrap();
        store.get_or_init("g.fc0.b", &[1], Init::Zeros).unwrap();
        store.get_or_init("g.fc1.w", &[1, 4], Init::Zeros).unwrap();
        store.get_or_init("g.fc1.b", &[4], Init::Zeros).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let f = Tensor::<f32>::randn(vec![2, 4, 2, 2, 2], &mut rng).unwrap();
        let mut g = Graph {
            tape: &mut tape,
            binder: &mut binder,
            store: &mut store,
        };
        let fv = g.tape.constant(f.clone());
        let out = channel_attention(&mut g, "g", fv, 4).unwrap();
        for (o, i) in g.tape.value(out).data().iter().zip(f.data()) {
            assert!((o - 0.5 * i).abs() < 1e-6);
        }

        store.get_or_init("s.conv.w", &[1, 1, 3, 3, 3], Init::Zeros).unwrap();
        store.get_or_init("s.conv.b", &[1], Init::Zeros).unwrap();
        let mut tape2 = Tape::new();
        let mut binder2 = Binder::new();
        let mut g2 = Graph {
            tape: &mut tape2,
            binder: &mut binder2,
            store: &mut store,
        };
        let fv2 = g2.tape.constant(f.clone());
        let out2 = spatial_attention(&mut g2, "s", fv2).unwrap();
        for (o, i) in g2.tape.value(out2).data().iter().zip(f.data()) {
            assert!((o - 0.5 * i).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_gate_scales_linearly_per_channel() {
        // with fixed gate values, doubling one channel doubles that channel
        let (mut store, mut tape, mut binder) = graph_fixture(42);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let f = Tensor::<f32>::randn(vec![1, 4, 2, 2, 2], &mut rng).unwrap();
        let mut f2 = f.clone();
        for i in 0..8 {
            // channel 1 occupies elements 8..16
            f2.data_mut()[8 + i] *= 2.0;
        }
        // gates computed from max-pool change when the input changes, so
        // freeze them by zeroing the MLP weights (gate = 0.5 constant)
        use crate::params::Init;
        store.get_or_init("g.fc0.w", &[4, 1], Init::Zeros).unwrap();
        store.get_or_init("g.fc0.b", &[1], Init::Zeros).unwrap();
        store.get_or_init("g.fc1.w", &[1, 4], Init::Zeros).unwrap();
        store.get_or_init("g.fc1.b", &[4], Init::Zeros).unwrap();
        let mut g = Graph {
            tape: &mut tape,
            binder: &mut binder,
            store: &mut store,
        };
        let a = g.tape.constant(f);
        let b = g.tape.constant(f2);
        let oa = channel_attention(&mut g, "g", a, 4).unwrap();
        let ob = channel_attention(&mut g, "g", b, 4).unwrap();
        for i in 0..8 {
            let va = g.tape.value(oa).data()[8 + i];
            let vb = g.tape.value(ob).data()[8 + i];
            assert!((vb - 2.0 * va).abs() < 1e-6);
        }
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let (mut store, mut tape, mut binder) = graph_fixture(7);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let f = Tensor::<f32>::randn(vec![2, 8, 2, 2, 2], &mut rng).unwrap();
        let mut g = Graph {
            tape: &mut tape,
            binder: &mut binder,
            store: &mut store,
        };
        let fv = g.tape.constant(f.clone());
        let c = channel_attention(&mut g, "fusion.gate.ch", fv, 4).unwrap();
        let s = spatial_attention(&mut g, "fusion.gate.sp", c).unwrap();
        // gates shrink: |out| <= |in| elementwise
        for (o, i) in g.tape.value(s).data().iter().zip(f.data()) {
            assert!(o.abs() <= i.abs() + 1e-6);
        }
    }

    #[test]
    fn spatial_gate_follows_channel_max_with_identity_kernel() {
        let (mut store, mut tape, mut binder) = graph_fixture(0);
        use crate::params::Init;
        // single-tap identity kernel: only the center weight is 1
        store
            .get_or_init("s.conv.w", &[1, 1, 3, 3, 3], Init::Zeros)
            .unwrap();
        store.get_or_init("s.conv.b", &[1], Init::Zeros).unwrap();
        store.get_mut("s.conv.w").unwrap().value.set(&[0, 0, 1, 1, 1], 1.0);
        // one voxel dominates the channel max
        let mut f = Tensor::<f32>::zeros(vec![1, 2, 3, 3, 3]).unwrap();
        f.set(&[0, 0, 1, 1, 1], 4.0);
        f.set(&[0, 1, 1, 1, 1], 1.0);
        let mut g = Graph {
            tape: &mut tape,
            binder: &mut binder,
            store: &mut store,
        };
        let fv = g.tape.constant(f);
        let out = spatial_attention(&mut g, "s", fv).unwrap();
        // gate at the dominant voxel = sigmoid(4), elsewhere sigmoid(0) = 0.5
        let got = g.tape.value(out).at(&[0, 1, 1, 1, 1]);
        let expect = 1.0 / (1.0 + (-4.0f32).exp());
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn t1_guided_fuse_examples() {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let f = Tensor::<f32>::randn(vec![1, 2, 2, 2, 2], &mut rng).unwrap();
        let fv = tape.constant(f.clone());
        let zeros = tape.constant(Tensor::zeros(vec![1, 2, 2, 2, 2]).unwrap());
        let fused = t1_guided_fuse(&mut tape, fv, zeros).unwrap();
        // zero gate map -> bit-identical to the functional features
        assert_eq!(tape.value(fused).data(), f.data());

        let ones = tape.constant(Tensor::ones(vec![1, 2, 2, 2, 2]).unwrap());
        let doubled = t1_guided_fuse(&mut tape, fv, ones).unwrap();
        for (d, i) in tape.value(doubled).data().iter().zip(f.data()) {
            assert!((d - 2.0 * i).abs() < 1e-6);
        }

        // random pair against the direct a*b + a oracle
        let g = Tensor::<f32>::randn(vec![1, 2, 2, 2, 2], &mut rng).unwrap();
        let gv = tape.constant(g.clone());
        let fused2 = t1_guided_fuse(&mut tape, fv, gv).unwrap();
        for k in 0..f.numel() {
            let expect = f.data()[k] * g.data()[k] + f.data()[k];
            assert!((tape.value(fused2).data()[k] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn addition_fuse_examples() {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let f = Tensor::<f32>::randn(vec![2, 3], &mut rng).unwrap();
        let fv = tape.constant(f.clone());
        let z = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let s = addition_fuse(&mut tape, z, fv).unwrap();
        assert_eq!(tape.value(s).data(), f.data());

        let ff = addition_fuse(&mut tape, fv, fv).unwrap();
        for (o, i) in tape.value(ff).data().iter().zip(f.data()) {
            assert_eq!(*o, 2.0 * i);
        }

        let g = Tensor::<f32>::randn(vec![2, 3], &mut rng).unwrap();
        let gv = tape.constant(g);
        let ab = addition_fuse(&mut tape, fv, gv).unwrap();
        let ba = addition_fuse(&mut tape, gv, fv).unwrap();
        assert_eq!(tape.value(ab).data(), tape.value(ba).data());
    }

    #[test]
    fn assemble_split_roundtrip() {
        let geom = RegionGeom {
            grid: [2, 2, 2],
            channels: 3,
            cell: [2, 2, 2],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let regions =
            Tensor::<f32>::randn(vec![2, geom.cells(), geom.region_dim()], &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let rv = tape.constant(regions.clone());
        let map = assemble_regions(&mut tape, rv, &geom).unwrap();
        assert_eq!(tape.shape(map), &[2, 3, 4, 4, 4]);
        let back = split_regions(&mut tape, map, &geom).unwrap();
        assert_eq!(tape.value(back).data(), regions.data());

        // region r's vector lands exactly in cell r of the map
        let cell_val = tape.value(map).at(&[0, 0, 2, 0, 0]); // cell (1,0,0) -> region 4
        assert_eq!(cell_val, regions.at(&[0, 4, 0]));
    }
}
