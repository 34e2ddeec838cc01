//! Binary model checkpoints.
//!
//! Layout: an 8-byte versioned magic, the model-kind tag, a key-value
//! hyperparameter block, then the named parameter tensors with shapes and
//! raw little-endian 64-bit values in store order.

use std::io::{Read, Write};
use std::path::Path;

use crate::model::{Hyper, ModelKind, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DPMOBCK1";

pub fn save_model<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    write_block(&mut out, params.kind().tag().as_bytes())?;
    let hyper_block = format!(
        "n_dim {}\nn_hidden {}\nn_key {}\nmlp_hidden {}\nn_time_dim {}\ndepth {}\nn_time {}\n",
        params.hyper.n_dim,
        params.hyper.n_hidden,
        params.hyper.n_key,
        params.hyper.mlp_hidden,
        params.hyper.n_time_dim,
        params.depth,
        params.n_time,
    );
    write_block(&mut out, hyper_block.as_bytes())?;
    out.write_all(&(params.store.len() as u32).to_le_bytes())?;
    for (_, name, tensor) in params.store.iter() {
        write_block(&mut out, name.as_bytes())?;
        out.write_all(&[tensor.dims().len() as u8])?;
        for &d in tensor.dims() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let kind = ModelKind::from_tag(&read_string(&mut input)?)?;
    let hyper_block = read_string(&mut input)?;
    let get = |key: &str| -> Result<usize> {
        hyper_block
            .lines()
            .find_map(|line| {
                let (k, v) = line.split_once(' ')?;
                (k == key).then(|| v.trim().parse().ok()).flatten()
            })
            .ok_or_else(|| Error::Parse(format!("checkpoint hyper block missing {key}")))
    };
    let hyper = Hyper {
        n_dim: get("n_dim")?,
        n_hidden: get("n_hidden")?,
        n_key: get("n_key")?,
        mlp_hidden: get("mlp_hidden")?,
        n_time_dim: get("n_time_dim")?,
    };
    let depth = get("depth")? as u8;
    let n_time = get("n_time")?;

    // Rebuild the parameter layout, then overwrite every tensor by name.
    let mut params = ModelParams::<S>::new(kind, hyper, depth, n_time, 0);
    let mut n_tensors = [0u8; 4];
    input.read_exact(&mut n_tensors)?;
    let n_tensors = u32::from_le_bytes(n_tensors) as usize;
    if n_tensors != params.store.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {n_tensors} tensors, layout expects {}",
            params.store.len()
        )));
    }
    let ids: Vec<_> = params
        .store
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), t.dims().to_vec()))
        .collect();
    for (id, name, dims) in ids {
        let got_name = read_string(&mut input)?;
        if got_name != name {
            return Err(Error::Parse(format!(
                "checkpoint tensor {got_name}, layout expects {name}"
            )));
        }
        let mut ndim = [0u8; 1];
        input.read_exact(&mut ndim)?;
        let mut got_dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            got_dims.push(u64::from_le_bytes(b) as usize);
        }
        if got_dims != dims {
            return Err(Error::Parse(format!(
                "tensor {name}: checkpoint shape {got_dims:?}, layout expects {dims:?}"
            )));
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            data.push(S::from_f64_lossy(f64::from_le_bytes(b)));
        }
        *params.store.get_mut(id) = Tensor::from_vec(&dims, data);
    }
    Ok(params)
}

fn write_block<W: Write>(out: &mut W, bytes: &[u8]) -> Result<()> {
    out.write_all(&(bytes.len() as u32).to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_string<R: Read>(input: &mut R) -> Result<String> {
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Parse("non-utf8 checkpoint block".into()))
}
