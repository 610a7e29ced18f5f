//! safetensors checkpoints keyed by torchvision parameter names.
//!
//! F32 and F64 tensors are accepted; everything is widened to f64.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};

use super::layers::BatchNorm2d;
use super::network::{Network, ParamsMut};
use crate::error::{Error, Result};

fn read_f64(view: &TensorView<'_>, name: &str) -> Result<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect()),
        Dtype::F64 => {
            Ok(data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect())
        }
        other => Err(Error::Weights(format!("tensor '{name}' has unsupported dtype {other:?}"))),
    }
}

struct Checkpoint<'a> {
    st: SafeTensors<'a>,
    used: HashSet<String>,
}

impl Checkpoint<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let view = self.st.tensor(name).map_err(|_| Error::Weights(format!("missing tensor '{name}'")))?;
        if view.shape() != shape {
            return Err(Error::Weights(format!("tensor '{name}' has shape {:?}, expected {shape:?}", view.shape())));
        }
        self.used.insert(name.to_string());
        read_f64(&view, name)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.fetch(name, &[len])?))
    }
}

/// Fills every parametric layer of `net` from a safetensors buffer. Extra
/// tensors in the file (e.g. `num_batches_tracked`) are ignored.
pub fn load_from_bytes(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Weights(e.to_string()))?;
    let mut ck = Checkpoint { st, used: HashSet::new() };
    net.visit_params_mut(&mut |key, params| {
        match params {
            ParamsMut::Conv(conv) => {
                let dim = conv.weight.dim();
                let w = ck.fetch(&format!("{key}.weight"), &[dim.0, dim.1, dim.2, dim.3])?;
                conv.weight = Array4::from_shape_vec(dim, w).expect("shape checked");
                if conv.has_bias {
                    conv.bias = ck.vector(&format!("{key}.bias"), dim.0)?;
                }
            }
            ParamsMut::Linear(lin) => {
                let dim = lin.weight.dim();
                let w = ck.fetch(&format!("{key}.weight"), &[dim.0, dim.1])?;
                lin.weight = Array2::from_shape_vec(dim, w).expect("shape checked");
                lin.bias = ck.vector(&format!("{key}.bias"), dim.0)?;
            }
            ParamsMut::BatchNorm(bn) => {
                let n = bn.scale.len();
                let gamma = ck.vector(&format!("{key}.weight"), n)?;
                let beta = ck.vector(&format!("{key}.bias"), n)?;
                let mean = ck.vector(&format!("{key}.running_mean"), n)?;
                let var = ck.vector(&format!("{key}.running_var"), n)?;
                *bn = BatchNorm2d::from_stats(&gamma, &beta, &mean, &var);
            }
        }
        Ok(())
    })?;
    log::debug!("loaded {} tensors", ck.used.len());
    Ok(())
}

pub fn load(net: &mut Network, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    load_from_bytes(net, &bytes)
}

/// Serializes conv and linear parameters as F64. Batch-norm layers are
/// stored in folded form (weight = scale, bias = shift, mean 0, var 1 - eps).
pub fn to_bytes(net: &mut Network) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>, vals: &mut dyn Iterator<Item = f64>| {
        let bytes = vals.flat_map(|v| v.to_le_bytes()).collect();
        tensors.insert(name, (shape, bytes));
    };
    net.visit_params_mut(&mut |key, params| {
        match params {
            ParamsMut::Conv(c) => {
                let d = c.weight.dim();
                put(format!("{key}.weight"), vec![d.0, d.1, d.2, d.3], &mut c.weight.iter().copied());
                if c.has_bias {
                    put(format!("{key}.bias"), vec![d.0], &mut c.bias.iter().copied());
                }
            }
            ParamsMut::Linear(l) => {
                let d = l.weight.dim();
                put(format!("{key}.weight"), vec![d.0, d.1], &mut l.weight.iter().copied());
                put(format!("{key}.bias"), vec![d.0], &mut l.bias.iter().copied());
            }
            ParamsMut::BatchNorm(b) => {
                let n = b.scale.len();
                put(format!("{key}.weight"), vec![n], &mut b.scale.iter().copied());
                put(format!("{key}.bias"), vec![n], &mut b.shift.iter().copied());
                put(format!("{key}.running_mean"), vec![n], &mut std::iter::repeat_n(0.0, n));
                put(format!("{key}.running_var"), vec![n], &mut std::iter::repeat_n(1.0 - BatchNorm2d::EPS, n));
            }
        }
        Ok(())
    })?;
    let views = tensors
        .iter()
        .map(|(k, (shape, bytes))| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Weights(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None).map_err(|e| Error::Weights(e.to_string()))
}
