//! Per-patch encoder/decoder networks for the structural (sPM) and
//! functional (fPM) modalities, plus the sparsity and reconstruction losses.
//!
//! All patches of one modality run as a single grouped-convolution network:
//! activations are laid out `[B, G*C, d, h, w]` with one channel group per
//! patch, which is arithmetically identical to G independent sub-networks.
//! With `share_patch_params` the patch axis folds into the batch instead and
//! one parameter set serves every patch.

use crate::error::{Error, Result};
use crate::model::Graph;
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};

/// Encoder/decoder architecture. `channel_schedule[0]` is the InitConv
/// output width; each downsample stage i produces `channel_schedule[i]`
/// channels, and the last stage's residual block narrows to
/// `bottleneck_channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub init_channels: usize,
    pub channel_schedule: Vec<usize>,
    pub num_downsamples: usize,
    pub bottleneck_channels: usize,
    pub target_extent: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            init_channels: 32,
            channel_schedule: vec![32, 64, 128, 128],
            num_downsamples: 3,
            bottleneck_channels: 64,
            target_extent: [2, 2, 2],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_downsamples < 1 {
            return Err(Error::Config("num_downsamples must be >= 1".into()));
        }
        if self.channel_schedule.len() != self.num_downsamples + 1 {
            return Err(Error::Config(format!(
                "channel_schedule has {} entries, need num_downsamples + 1 = {}",
                self.channel_schedule.len(),
                self.num_downsamples + 1
            )));
        }
        if self.channel_schedule[0] != self.init_channels {
            return Err(Error::Config(format!(
                "channel_schedule[0] = {} must equal init_channels = {}",
                self.channel_schedule[0], self.init_channels
            )));
        }
        if self.channel_schedule.iter().any(|&c| c == 0) || self.bottleneck_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Stride-2 stages needed until every patch extent reaches the target.
    pub fn depth_for(patch: [usize; 3], target: [usize; 3]) -> usize {
        let mut e = patch;
        let mut n = 0;
        while (0..3).any(|i| e[i] > target[i]) {
            for v in e.iter_mut() {
                *v = v.div_ceil(2);
            }
            n += 1;
        }
        n.max(1)
    }

    /// Resize this schedule to the depth the given patch extent requires,
    /// repeating the last stage width when the chain must grow.
    pub fn sized_for(&self, patch: [usize; 3]) -> Self {
        let n = Self::depth_for(patch, self.target_extent);
        let mut schedule = self.channel_schedule.clone();
        while schedule.len() < n + 1 {
            schedule.push(*schedule.last().unwrap());
        }
        schedule.truncate(n + 1);
        EncoderConfig {
            init_channels: schedule[0],
            channel_schedule: schedule,
            num_downsamples: n,
            bottleneck_channels: self.bottleneck_channels,
            target_extent: self.target_extent,
        }
    }
}

/// Bottleneck encoding plus the per-stage features the decoder concatenates.
/// Skips are ordered shallow to deep; the deepest one is the bottleneck
/// itself.
pub struct Embedding {
    pub h: Var,
    pub skips: Vec<Var>,
}

/// Sparsity coefficient and total-loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T: Scalar> {
    pub lambda: T,
    pub alpha: T,
    pub beta: T,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            lambda: lit(0.001),
            alpha: lit(0.5),
            beta: lit(0.5),
        }
    }
}

/// Layout of the patch axis during encoding/decoding.
#[derive(Debug, Clone, Copy)]
pub struct PatchLayout {
    /// Number of grid cells G.
    pub cells: usize,
    /// One parameter set shared by all patches (true) or independent
    /// per-patch parameters via grouped convolutions (false).
    pub share: bool,
}

impl PatchLayout {
    pub fn conv_groups(&self) -> usize {
        if self.share {
            1
        } else {
            self.cells
        }
    }
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    let r = shape.len();
    [shape[r - 3], shape[r - 2], shape[r - 1]]
}

/// Encode one modality. `x` is the folded batch `[B, G*Cin, pd, ph, pw]`;
/// `cin` is the per-patch input channel count.
pub fn encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    cin: usize,
    cfg: &EncoderConfig,
    layout: PatchLayout,
) -> Result<Embedding> {
    cfg.validate()?;
    let shape = g.tape.shape(x).to_vec();
    let batch = shape[0];
    let patch = spatial3(&shape);
    let n = cfg.num_downsamples;
    for e in patch {
        if e % (1 << n) != 0 {
            return Err(Error::InvalidShape(format!(
                "patch extent {patch:?} not reducible by {n} stride-2 stages (needs divisibility by {})",
                1 << n
            )));
        }
    }

    let groups = layout.conv_groups();
    let mut cur = if layout.share {
        g.tape.reshape(
            x,
            vec![batch * layout.cells, cin, patch[0], patch[1], patch[2]],
        )?
    } else {
        x
    };

    let sched = &cfg.channel_schedule;
    cur = g.conv(&format!("{prefix}.enc.init"), cur, cin, sched[0], 3, 1, groups)?;
    let mut c = sched[0];
    let mut skips = Vec::with_capacity(n);
    for i in 1..=n {
        cur = g.conv(
            &format!("{prefix}.enc.down{i}"),
            cur,
            c,
            sched[i],
            3,
            2,
            groups,
        )?;
        c = sched[i];
        let cout = if i == n { cfg.bottleneck_channels } else { c };
        cur = g.res_block(&format!("{prefix}.enc.block{i}"), cur, c, cout, groups)?;
        c = cout;
        skips.push(cur);
    }
    Ok(Embedding { h: cur, skips })
}

/// Decode back to the input patch shape: per stage a trilinear 2x upsample,
/// concatenation with the resolution-matching encoder skip, and a residual
/// block; a final convolution restores the input channel count.
pub fn decode<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    emb: &Embedding,
    cin: usize,
    cfg: &EncoderConfig,
    layout: PatchLayout,
) -> Result<Var> {
    cfg.validate()?;
    let n = cfg.num_downsamples;
    if emb.skips.len() != n {
        return Err(Error::InvalidShape(format!(
            "embedding has {} skips, decoder expects {n}",
            emb.skips.len()
        )));
    }
    let groups = layout.conv_groups();
    let sched = &cfg.channel_schedule;
    let mut cur = emb.h;
    let mut c = cfg.bottleneck_channels;
    for i in (1..=n).rev() {
        cur = g.tape.upsample_trilinear2x(cur)?;
        if i >= 2 {
            let skip = emb.skips[i - 2];
            cur = concat_per_patch(g.tape, cur, skip, c, sched[i - 1], layout)?;
            c += sched[i - 1];
        }
        cur = g.res_block(&format!("{prefix}.dec.block{i}"), cur, c, sched[i - 1], groups)?;
        c = sched[i - 1];
    }
    cur = g.conv(&format!("{prefix}.dec.final"), cur, c, cin, 3, 1, groups)?;
    if layout.share {
        let s = g.tape.shape(cur).to_vec();
        let batch = s[0] / layout.cells;
        g.tape
            .reshape(cur, vec![batch, layout.cells * cin, s[2], s[3], s[4]])
    } else {
        Ok(cur)
    }
}

/// Channel concat that keeps each patch's channels contiguous. In the
/// grouped layout `[B, G*C, ...]` this routes through the equivalent view
/// `[B*G, C, ...]` so a plain axis-1 concat interleaves per patch.
fn concat_per_patch<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    ca: usize,
    cb: usize,
    layout: PatchLayout,
) -> Result<Var> {
    if layout.share {
        return tape.concat(&[a, b], 1);
    }
    let sa = tape.shape(a).to_vec();
    let batch = sa[0];
    let cells = layout.cells;
    let av = tape.reshape(a, vec![batch * cells, ca, sa[2], sa[3], sa[4]])?;
    let sb = tape.shape(b).to_vec();
    let bv = tape.reshape(b, vec![batch * cells, cb, sb[2], sb[3], sb[4]])?;
    let cat = tape.concat(&[av, bv], 1)?;
    tape.reshape(
        cat,
        vec![batch, cells * (ca + cb), sa[2], sa[3], sa[4]],
    )
}

/// Structural-modality wrappers.
pub fn spm_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    patch: Var,
    cin: usize,
    cfg: &EncoderConfig,
    layout: PatchLayout,
) -> Result<Embedding> {
    encode(g, "spm", patch, cin, cfg, layout)
}

pub fn spm_decode<T: Scalar>(
    g: &mut Graph<'_, T>,
    emb: &Embedding,
    cin: usize,
    cfg: &EncoderConfig,
    layout: PatchLayout,
) -> Result<Var> {
    decode(g, "spm", emb, cin, cfg, layout)
}

/// Functional-modality wrappers. The time axis is folded into the input
/// channels before the call, so `cin = T * C`.
pub fn fpm_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    series_patch: Var,
    cin: usize,
    cfg: &EncoderConfig,
    layout: PatchLayout,
) -> Result<Embedding> {
    encode(g, "fpm", series_patch, cin, cfg, layout)
}

pub fn fpm_decode<T: Scalar>(
    g: &mut Graph<'_, T>,
    emb: &Embedding,
    cin: usize,
    cfg: &EncoderConfig,
    layout: PatchLayout,
) -> Result<Var> {
    decode(g, "fpm", emb, cin, cfg, layout)
}

/// lambda * sum of |h_i| over every entry of the encoding.
pub fn sparsity_penalty<T: Scalar>(tape: &mut Tape<T>, h: Var, lambda: T) -> Result<Var> {
    if lambda < T::zero() {
        return Err(Error::Config("sparsity lambda must be >= 0".into()));
    }
    let a = tape.abs(h)?;
    let s = tape.sum_all(a)?;
    tape.scale(s, lambda)
}

/// Sum of squared differences over everything, as a scalar node.
pub fn sum_squared_error<T: Scalar>(tape: &mut Tape<T>, generated: Var, original: Var) -> Result<Var> {
    let diff = tape.sub(generated, original)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum_all(sq)
}

/// Mean over the batch of summed squared voxel differences, plus the
/// sparsity penalty on the encoding.
pub fn modality_recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    generated: Var,
    original: Var,
    h: Var,
    batch: usize,
    cfg: &LossConfig<T>,
) -> Result<Var> {
    if tape.shape(generated) != tape.shape(original) {
        return Err(Error::ShapeMismatch {
            op: "modality_recon_loss",
            lhs: tape.shape(generated).to_vec(),
            rhs: tape.shape(original).to_vec(),
        });
    }
    let ssq = sum_squared_error(tape, generated, original)?;
    let mean = tape.scale(ssq, T::one() / lit::<T>(batch as f64))?;
    let omega = sparsity_penalty(tape, h, cfg.lambda)?;
    tape.add(mean, omega)
}
