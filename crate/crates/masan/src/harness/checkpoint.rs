//! Binary checkpoint container: named parameter directory plus Adam state.
//!
//! Layout (all little-endian): magic `MCK1`, u32 version, u64 config
//! fingerprint, u64 Adam step counter, u32 entry count, then per parameter:
//! u32 name length, name bytes, u32 ndim, ndim x u32 extents, and three f32
//! payloads (value, Adam m, Adam v).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"MCK1";
const VERSION: u32 = 1;

/// In-memory checkpoint contents.
#[derive(Debug, Clone)]
pub struct CheckpointData<T: Scalar> {
    pub fingerprint: u64,
    pub step: u64,
    /// (name, value, adam_m, adam_v), sorted by name.
    pub entries: Vec<(String, Tensor<T>, Tensor<T>, Tensor<T>)>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    adam: &AdamState<T>,
    fingerprint: u64,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint.to_le_bytes());
    buf.extend_from_slice(&adam.t.to_le_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        let zeros;
        let (m, v) = match adam.moments.get(&p.name) {
            Some((m, v)) => (m, v),
            None => {
                zeros = Tensor::<T>::zeros(p.value.shape().to_vec())?;
                (&zeros, &zeros.clone())
            }
        };
        for tensor in [&p.value, m, v] {
            for &x in tensor.data() {
                buf.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointData<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let fingerprint = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("bad ndim {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut tensors = Vec::with_capacity(3);
        for _ in 0..3 {
            let raw = take(&mut pos, 4 * numel)?;
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect();
            tensors.push(Tensor::from_vec(shape.clone(), data)?);
        }
        let v = tensors.pop().unwrap();
        let m = tensors.pop().unwrap();
        let value = tensors.pop().unwrap();
        entries.push((name, value, m, v));
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(CheckpointData {
        fingerprint,
        step,
        entries,
    })
}

/// In-memory checkpoint of the current parameters and optimizer state,
/// without a disk roundtrip.
pub fn snapshot<T: Scalar>(
    model: &Model<T>,
    adam: &AdamState<T>,
    fingerprint: u64,
) -> CheckpointData<T> {
    let entries = model
        .params
        .iter()
        .map(|p| {
            let (m, v) = adam
                .moments
                .get(&p.name)
                .cloned()
                .unwrap_or_else(|| {
                    let z = Tensor::zeros(p.value.shape().to_vec()).unwrap();
                    (z.clone(), z)
                });
            (p.name.clone(), p.value.clone(), m, v)
        })
        .collect();
    CheckpointData {
        fingerprint,
        step: adam.t,
        entries,
    }
}

/// Install checkpoint contents into a model and optimizer state.
pub fn apply_checkpoint<T: Scalar>(
    data: &CheckpointData<T>,
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
) {
    adam.t = data.step;
    adam.moments.clear();
    for (name, value, m, v) in &data.entries {
        model.params.insert(Parameter {
            name: name.clone(),
            value: value.clone(),
            grad: Tensor::zeros(value.shape().to_vec()).unwrap(),
        });
        adam.moments
            .insert(name.clone(), (m.clone(), v.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::params::Init;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mck");
        let mut model = Model::<f32>::new(ModelConfig::default(), 3);
        model
            .params
            .get_or_init("a.w", &[2, 3], Init::FanInUniform { fan_in: 2 })
            .unwrap();
        model.params.get_or_init("b.w", &[4], Init::Ones).unwrap();
        let mut adam = AdamState::default();
        adam.t = 17;
        save_checkpoint(&path, &model, &adam, 0xfeed).unwrap();
        let data = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(data.fingerprint, 0xfeed);
        assert_eq!(data.step, 17);
        assert_eq!(data.entries.len(), 2);

        let mut model2 = Model::<f32>::new(ModelConfig::default(), 999);
        let mut adam2 = AdamState::default();
        apply_checkpoint(&data, &mut model2, &mut adam2);
        for p in model.params.iter() {
            let q = model2.params.get(&p.name).unwrap();
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(adam2.t, 17);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mck");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path).unwrap_err(),
            Error::BadMagic { .. }
        ));
    }
}
