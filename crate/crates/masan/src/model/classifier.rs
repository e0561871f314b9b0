//! MLP classification head, cross-entropy and the total training objective.

use crate::error::{Error, Result};
use crate::model::autoencoder::LossConfig;
use crate::model::Graph;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Classifier head shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![256, 64],
            classes: 2,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("classifier needs >= 2 classes".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Logits and row-normalized probabilities for one batch.
pub struct Prediction {
    pub logits: Var,
    pub probs: Var,
}

/// Flatten the fused feature map and run the relu MLP; logits plus softmax
/// probabilities come back as tape nodes.
pub fn mlp_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    fused: Var,
    cfg: &MlpConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    let shape = g.tape.shape(fused).to_vec();
    let batch = shape[0];
    let width: usize = shape[1..].iter().product();
    let mut x = g.tape.reshape(fused, vec![batch, width])?;
    let mut din = width;
    for (i, &w) in cfg.hidden.iter().enumerate() {
        x = g.linear(&format!("{prefix}.l{i}"), x, din, w)?;
        x = g.tape.relu(x)?;
        din = w;
    }
    let logits = g.linear(&format!("{prefix}.out"), x, din, cfg.classes)?;
    let probs = g.tape.softmax(logits, 1)?;
    Ok(Prediction { logits, probs })
}

/// Mean negative log-probability of the true class (clamped at 1e-12).
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    pred: &Prediction,
    labels: &[usize],
) -> Result<Var> {
    tape.cross_entropy_logits(pred.logits, labels)
}

/// The combined objective components as tape nodes.
pub struct LossBreakdown {
    pub l_s: Var,
    pub l_f: Var,
    pub l_reg: Var,
    pub l_total: Var,
}

/// L = alpha * L_s + beta * L_f + L_reg.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_s: Var,
    l_f: Var,
    l_reg: Var,
    cfg: &LossConfig<T>,
) -> Result<LossBreakdown> {
    let ws = tape.scale(l_s, cfg.alpha)?;
    let wf = tape.scale(l_f, cfg.beta)?;
    let sum = tape.add(ws, wf)?;
    let l_total = tape.add(sum, l_reg)?;
    Ok(LossBreakdown {
        l_s,
        l_f,
        l_reg,
        l_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Binder, Init, ParamStore};
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut store = ParamStore::<f32>::new(0);
        for name in ["mlp.l0.w", "mlp.l0.b", "mlp.out.w", "mlp.out.b"] {
            let shape: Vec<usize> = match name {
                "mlp.l0.w" => vec![8, 3],
                "mlp.l0.b" => vec![3],
                "mlp.out.w" => vec![3, 2],
                _ => vec![2],
            };
            store.get_or_init(name, &shape, Init::Zeros).unwrap();
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut g = Graph {
            tape: &mut tape,
            binder: &mut binder,
            store: &mut store,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let f = Tensor::<f32>::randn(vec![2, 1, 2, 2, 2], &mut rng).unwrap();
        let fv = g.tape.constant(f);
        let cfg = MlpConfig {
            hidden: vec![3],
            classes: 2,
        };
        let pred = mlp_forward(&mut g, "mlp", fv, &cfg).unwrap();
        for &p in g.tape.value(pred.probs).data() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let mut store = ParamStore::<f32>::new(5);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut g = Graph {
            tape: &mut tape,
            binder: &mut binder,
            store: &mut store,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let f = Tensor::<f32>::randn(vec![3, 2, 2, 2, 2], &mut rng).unwrap();
        let fv = g.tape.constant(f);
        let pred = mlp_forward(&mut g, "mlp", fv, &MlpConfig::default()).unwrap();
        let probs = g.tape.value(pred.probs);
        for row in 0..3 {
            let s: f32 = (0..2).map(|c| probs.at(&[row, c])).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn single_sample_matches_hand_matmul_oracle() {
        let mut store = ParamStore::<f32>::new(9);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let f = Tensor::<f32>::randn(vec![1, 1, 1, 1, 4], &mut rng).unwrap();
        {
            let mut g = Graph {
                tape: &mut tape,
                binder: &mut binder,
                store: &mut store,
            };
            let fv = g.tape.constant(f.clone());
            let cfg = MlpConfig {
                hidden: vec![3],
                classes: 2,
            };
            let pred = mlp_forward(&mut g, "mlp", fv, &cfg).unwrap();
            // oracle: hand matrix multiply through the stored weights
            let w0 = store.get("mlp.l0.w").unwrap().value.clone();
            let b0 = store.get("mlp.l0.b").unwrap().value.clone();
            let w1 = store.get("mlp.out.w").unwrap().value.clone();
            let b1 = store.get("mlp.out.b").unwrap().value.clone();
            let mut hid = [0.0f32; 3];
            for j in 0..3 {
                let mut acc = b0.data()[j];
                for i in 0..4 {
                    acc += f.data()[i] * w0.at(&[i, j]);
                }
                hid[j] = acc.max(0.0);
            }
            for c in 0..2 {
                let mut acc = b1.data()[c];
                for j in 0..3 {
                    acc += hid[j] * w1.at(&[j, c]);
                }
                let got = tape.value(pred.logits).at(&[0, c]);
                assert!((acc - got).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f32>::new();
        // uniform probs -> -ln(1/2)
        let logits = tape.constant(Tensor::zeros(vec![1, 2]).unwrap());
        let probs = tape.softmax(logits, 1).unwrap();
        let pred = Prediction { logits, probs };
        let ce = cross_entropy(&mut tape, &pred, &[1]).unwrap();
        assert!((tape.value(ce).item() - 0.6931).abs() < 1e-4);

        // near-certain correct prediction -> ~0
        let logits = tape.constant(Tensor::from_vec(vec![1, 2], vec![50.0, -50.0]).unwrap());
        let probs = tape.softmax(logits, 1).unwrap();
        let pred = Prediction { logits, probs };
        let ce = cross_entropy(&mut tape, &pred, &[0]).unwrap();
        assert!(tape.value(ce).item() < 1e-6);

        // mixed batch against a per-sample oracle
        let raw = [0.7f32, -0.4, -1.2, 2.0];
        let logits = tape.constant(Tensor::from_vec(vec![2, 2], raw.to_vec()).unwrap());
        let probs = tape.softmax(logits, 1).unwrap();
        let pred = Prediction { logits, probs };
        let ce = cross_entropy(&mut tape, &pred, &[0, 1]).unwrap();
        let p0 = (raw[0].exp()) / (raw[0].exp() + raw[1].exp());
        let p1 = (raw[3].exp()) / (raw[2].exp() + raw[3].exp());
        let expect = -(p0.ln() + p1.ln()) / 2.0;
        assert!((tape.value(ce).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let l = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let logits = tape.leaf(l.clone().tracked());
        let loss = tape.cross_entropy_logits(logits, &[1, 0, 3]).unwrap();
        let probs = crate::ops::softmax_forward(&l, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        for (row, &label) in [1usize, 0, 3].iter().enumerate() {
            for c in 0..4 {
                let onehot = if c == label { 1.0 } else { 0.0 };
                let expect = (probs.at(&[row, c]) - onehot) / 3.0;
                assert!((g.at(&[row, c]) - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::<f32>::new();
        let cfg = LossConfig::default(); // alpha = beta = 0.5
        let ls = tape.constant(Tensor::scalar(2.0));
        let lf = tape.constant(Tensor::scalar(4.0));
        let lr = tape.constant(Tensor::scalar(1.0));
        let b = total_loss(&mut tape, ls, lf, lr, &cfg).unwrap();
        assert_eq!(tape.value(b.l_total).item(), 4.0);

        let z = tape.constant(Tensor::scalar(0.0));
        let b0 = total_loss(&mut tape, z, z, z, &cfg).unwrap();
        assert_eq!(tape.value(b0.l_total).item(), 0.0);

        let zero_cfg = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let b1 = total_loss(&mut tape, ls, lf, lr, &zero_cfg).unwrap();
        assert_eq!(tape.value(b1.l_total).item(), tape.value(lr).item());
    }
}
