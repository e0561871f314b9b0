//! The full pipeline: per-patch autoencoders for both modalities, region
//! self-attention with structural-guided fusion, and the MLP classifier.

pub mod autoencoder;
pub mod classifier;
pub mod fusion;

use crate::error::{Error, Result};
use crate::ops::default_group_count;
use crate::params::{Binder, Init, ParamStore};
use crate::patch::GridSpec;
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use autoencoder::{EncoderConfig, LossConfig, PatchLayout};
use classifier::{MlpConfig, Prediction};
use fusion::{FusionMode, FusionOutput, FusionSettings, PipelineOrder, RegionGeom};

/// Bundles the tape, parameter store and binder during one forward pass.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub binder: &'a mut Binder,
    pub store: &'a mut ParamStore<T>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.binder.bind(self.tape, self.store, name, shape, init)
    }

    /// Square projection matrix for attention stages.
    pub fn proj_param(&mut self, name: &str, dim: usize) -> Result<Var> {
        self.param(name, &[dim, dim], Init::FanInUniform { fan_in: dim })
    }

    /// Odd-kernel convolution with same-padding at stride 1; `cin`/`cout`
    /// are per-patch channel counts, multiplied up by `groups`.
    pub fn conv(
        &mut self,
        prefix: &str,
        x: Var,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let w = self.param(
            &format!("{prefix}.w"),
            &[groups * cout, cin, k, k, k],
            Init::FanInUniform {
                fan_in: cin * k * k * k,
            },
        )?;
        let b = self.param(&format!("{prefix}.b"), &[groups * cout], Init::Zeros)?;
        self.tape.conv3d_grouped(x, w, b, stride, k / 2, groups)
    }

    /// Group normalization with per-patch affine parameters; the group count
    /// never spans patch boundaries.
    pub fn gn(&mut self, prefix: &str, x: Var, c: usize, groups: usize) -> Result<Var> {
        let total = groups * c;
        let gn_groups = groups * default_group_count(c);
        let gamma = self.param(&format!("{prefix}.gamma"), &[total], Init::Ones)?;
        let beta = self.param(&format!("{prefix}.beta"), &[total], Init::Zeros)?;
        self.tape.group_norm(x, gn_groups, gamma, beta, lit(1e-5))
    }

    /// Pre-activation residual block: [GN, ReLU, Conv3] twice plus an
    /// identity shortcut (1^3 projection when the channel count changes).
    pub fn res_block(
        &mut self,
        prefix: &str,
        x: Var,
        cin: usize,
        cout: usize,
        groups: usize,
    ) -> Result<Var> {
        let a = self.gn(&format!("{prefix}.gn0"), x, cin, groups)?;
        let a = self.tape.relu(a)?;
        let a = self.conv(&format!("{prefix}.conv0"), a, cin, cout, 3, 1, groups)?;
        let b = self.gn(&format!("{prefix}.gn1"), a, cout, groups)?;
        let b = self.tape.relu(b)?;
        let b = self.conv(&format!("{prefix}.conv1"), b, cout, cout, 3, 1, groups)?;
        let shortcut = if cin == cout {
            x
        } else {
            self.conv(&format!("{prefix}.proj"), x, cin, cout, 1, 1, groups)?
        };
        self.tape.add(b, shortcut)
    }

    /// Dense layer with bias (bias expanded explicitly over the batch).
    pub fn linear(&mut self, prefix: &str, x: Var, din: usize, dout: usize) -> Result<Var> {
        let w = self.param(
            &format!("{prefix}.w"),
            &[din, dout],
            Init::FanInUniform { fan_in: din },
        )?;
        let b = self.param(&format!("{prefix}.b"), &[dout], Init::Zeros)?;
        let y = self.tape.matmul(x, w)?;
        let rows = self.tape.shape(y)[0];
        let b2 = self.tape.reshape(b, vec![1, dout])?;
        let be = self.tape.expand(b2, &[rows, dout])?;
        self.tape.add(y, be)
    }
}

/// Everything the model needs to build its graph.
#[derive(Debug, Clone)]
pub struct ModelConfig<T: Scalar> {
    pub grid: GridSpec,
    pub encoder: EncoderConfig,
    /// Time frames in the functional series (folded into input channels).
    pub frames: usize,
    pub t1_channels: usize,
    pub fmri_channels: usize,
    pub share_patch_params: bool,
    pub reduction_ratio: usize,
    pub scaled_dot: bool,
    pub pipeline_order: PipelineOrder,
    pub fusion_mode: FusionMode,
    pub mlp: MlpConfig,
    pub loss: LossConfig<T>,
}

impl<T: Scalar> Default for ModelConfig<T> {
    fn default() -> Self {
        ModelConfig {
            grid: GridSpec::default(),
            encoder: EncoderConfig::default(),
            frames: 4,
            t1_channels: 1,
            fmri_channels: 1,
            share_patch_params: false,
            reduction_ratio: 4,
            scaled_dot: false,
            pipeline_order: PipelineOrder::AttentionThenFuse,
            fusion_mode: FusionMode::Attention,
            mlp: MlpConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl<T: Scalar> ModelConfig<T> {
    pub fn layout(&self) -> PatchLayout {
        PatchLayout {
            cells: self.grid.cells(),
            share: self.share_patch_params,
        }
    }

    /// Region geometry at the bottleneck for the given patch extents.
    pub fn region_geom(&self, patch: [usize; 3]) -> RegionGeom {
        let n = self.encoder.num_downsamples;
        RegionGeom {
            grid: self.grid.grid,
            channels: self.encoder.bottleneck_channels,
            cell: [patch[0] >> n, patch[1] >> n, patch[2] >> n],
        }
    }
}

/// One collated training/evaluation batch: patch-folded modality tensors.
/// `t1` is `[B, G*Ct, pd, ph, pw]`, `fmri` is `[B, G*T*Cf, pd, ph, pw]`.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub t1: Tensor<T>,
    pub fmri: Tensor<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

/// What the loss graph should contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Reconstruction losses only (L_s + L_f).
    Pretrain,
    /// Reconstruction plus fusion, classifier and total loss.
    Full,
}

/// A completed forward pass: the tape plus handles to every interesting node.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    pub binder: Binder,
    pub input_t1: Var,
    pub input_fmri: Var,
    pub recon_t1: Var,
    pub recon_fmri: Var,
    pub h_t1: Var,
    pub h_fmri: Var,
    pub fusion: Option<FusionOutput>,
    pub prediction: Option<Prediction>,
    pub l_s: Var,
    pub l_f: Var,
    pub l_reg: Option<Var>,
    pub l_total: Var,
}

impl<T: Scalar> ForwardPass<T> {
    /// Argmax class per row of the predicted probabilities.
    pub fn predicted_classes(&self) -> Vec<usize> {
        let pred = self.prediction.as_ref().expect("classifier was run");
        let probs = self.tape.value(pred.probs);
        let classes = probs.shape()[1];
        (0..probs.shape()[0])
            .map(|row| {
                let mut best = 0;
                for c in 1..classes {
                    if probs.at(&[row, c]) > probs.at(&[row, best]) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-voxel mean squared reconstruction error over both modalities.
    pub fn recon_mse(&self) -> f64 {
        let sum_sq = |a: &Tensor<T>, b: &Tensor<T>| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    let d = (x - y).to_f64().unwrap();
                    d * d
                })
                .sum()
        };
        let t1 = self.tape.value(self.input_t1);
        let rt1 = self.tape.value(self.recon_t1);
        let fm = self.tape.value(self.input_fmri);
        let rfm = self.tape.value(self.recon_fmri);
        (sum_sq(t1, rt1) + sum_sq(fm, rfm)) / (t1.numel() + fm.numel()) as f64
    }
}

/// The trainable pipeline: configuration plus its parameter store.
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig<T>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig<T>, seed: u64) -> Self {
        Model {
            cfg,
            params: ParamStore::new(seed),
        }
    }

    fn validate_batch(&self, batch: &Batch<T>) -> Result<(usize, [usize; 3])> {
        let ts = batch.t1.shape();
        let fs = batch.fmri.shape();
        if ts.len() != 5 || fs.len() != 5 {
            return Err(Error::InvalidShape(format!(
                "batch tensors must be rank 5, got {ts:?} and {fs:?}"
            )));
        }
        let cells = self.cfg.grid.cells();
        let b = ts[0];
        if fs[0] != b || batch.labels.len() != b || batch.ids.len() != b {
            return Err(Error::InvalidShape(format!(
                "batch size mismatch: t1 {b}, fmri {}, labels {}, ids {}",
                fs[0],
                batch.labels.len(),
                batch.ids.len()
            )));
        }
        if ts[1] != cells * self.cfg.t1_channels
            || fs[1] != cells * self.cfg.frames * self.cfg.fmri_channels
        {
            return Err(Error::InvalidShape(format!(
                "folded channel counts {}/{} do not match grid {cells} x channels",
                ts[1], fs[1]
            )));
        }
        if ts[2..] != fs[2..] {
            return Err(Error::ShapeMismatch {
                op: "batch patch extents",
                lhs: ts.to_vec(),
                rhs: fs.to_vec(),
            });
        }
        Ok((b, [ts[2], ts[3], ts[4]]))
    }

    /// Build the graph for one batch and return the tape with all handles.
    pub fn forward(&mut self, batch: &Batch<T>, objective: Objective) -> Result<ForwardPass<T>> {
        let (b, patch) = self.validate_batch(batch)?;
        let layout = self.cfg.layout();
        let enc = self.cfg.encoder.clone();
        let loss_cfg = self.cfg.loss;
        let cf = self.cfg.frames * self.cfg.fmri_channels;
        let ct = self.cfg.t1_channels;

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut g = Graph {
            tape: &mut tape,
            binder: &mut binder,
            store: &mut self.params,
        };

        let input_t1 = g.tape.constant(batch.t1.clone());
        let input_fmri = g.tape.constant(batch.fmri.clone());

        let emb_t1 = autoencoder::spm_encode(&mut g, input_t1, ct, &enc, layout)?;
        let recon_t1 = autoencoder::spm_decode(&mut g, &emb_t1, ct, &enc, layout)?;
        let emb_fmri = autoencoder::fpm_encode(&mut g, input_fmri, cf, &enc, layout)?;
        let recon_fmri = autoencoder::fpm_decode(&mut g, &emb_fmri, cf, &enc, layout)?;

        let l_s =
            autoencoder::modality_recon_loss(g.tape, recon_t1, input_t1, emb_t1.h, b, &loss_cfg)?;
        let l_f = autoencoder::modality_recon_loss(
            g.tape, recon_fmri, input_fmri, emb_fmri.h, b, &loss_cfg,
        )?;

        let (fusion_out, prediction, l_reg, l_total) = match objective {
            Objective::Pretrain => {
                let total = g.tape.add(l_s, l_f)?;
                (None, None, None, total)
            }
            Objective::Full => {
                let geom = self.cfg.region_geom(patch);
                let settings = FusionSettings {
                    mode: self.cfg.fusion_mode,
                    order: self.cfg.pipeline_order,
                    reduction: self.cfg.reduction_ratio,
                    scaled_dot: self.cfg.scaled_dot,
                };
                let fo = fusion::fuse_pipeline(&mut g, &settings, emb_t1.h, emb_fmri.h, b, &geom)?;
                let pred = classifier::mlp_forward(&mut g, "mlp", fo.fused, &self.cfg.mlp)?;
                let l_reg = classifier::cross_entropy(g.tape, &pred, &batch.labels)?;
                let breakdown = classifier::total_loss(g.tape, l_s, l_f, l_reg, &loss_cfg)?;
                (Some(fo), Some(pred), Some(l_reg), breakdown.l_total)
            }
        };

        Ok(ForwardPass {
            tape,
            binder,
            input_t1,
            input_fmri,
            recon_t1,
            recon_fmri,
            h_t1: emb_t1.h,
            h_fmri: emb_fmri.h,
            fusion: fusion_out,
            prediction,
            l_s,
            l_f,
            l_reg,
            l_total,
        })
    }
}
