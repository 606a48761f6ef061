//! Weight file format: an 8-byte magic, a JSON header declaring the
//! architecture, training provenance, and tensor shapes, then the tensors as
//! little-endian f32 in declaration order, then a CRC32 of everything before
//! it. Round trips are bit exact.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};

use super::train::{NetWeights, TrainMeta};
use super::{BlockParams, ConvSpec, HeadParams, Net, NetError};
use crate::util::{self, ContainerError};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SIDW0001";

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    spec: ConvSpec,
    meta: TrainMeta,
    tensors: Vec<TensorDecl>,
}

impl From<ContainerError> for NetError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic { .. } | ContainerError::BadHeader(_) => {
                NetError::FormatVersionMismatch(e.to_string())
            }
            ContainerError::Truncated => NetError::TruncatedFile,
            ContainerError::ChecksumMismatch { .. } => NetError::ChecksumMismatch,
            ContainerError::Io(e) => NetError::Io(e),
        }
    }
}

fn declare(net: &Net<f32>) -> (Vec<TensorDecl>, Vec<f32>) {
    let mut decls = Vec::new();
    let mut data = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: Vec<f32>| {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        decls.push(TensorDecl { name, shape });
        data.extend(values);
    };
    for (i, blk) in net.blocks.iter().enumerate() {
        let n = i + 1;
        let (co, ci, kh, kw) = blk.w.dim();
        push(format!("conv{n}.w"), vec![co, ci, kh, kw], blk.w.iter().copied().collect());
        push(format!("conv{n}.b"), vec![co], blk.b.to_vec());
        push(format!("conv{n}.gamma"), vec![co], blk.gamma.to_vec());
        push(format!("conv{n}.beta"), vec![co], blk.beta.to_vec());
        push(format!("conv{n}.running_mean"), vec![co], blk.running_mean.to_vec());
        push(format!("conv{n}.running_var"), vec![co], blk.running_var.to_vec());
    }
    let (classes, feat) = net.head.w.dim();
    push("head.w".into(), vec![classes, feat], net.head.w.iter().copied().collect());
    push("head.b".into(), vec![classes], net.head.b.to_vec());
    (decls, data)
}

pub fn save_weights(path: &Path, weights: &NetWeights) -> Result<(), NetError> {
    let (tensors, data) = declare(&weights.net);
    let header = Header {
        spec: weights.net.spec.clone(),
        meta: weights.meta.clone(),
        tensors,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| NetError::FormatVersionMismatch(e.to_string()))?;
    let payload = util::f32s_to_le_bytes(&data);
    let mut w = BufWriter::new(File::create(path)?);
    util::write_container(&mut w, WEIGHTS_MAGIC, &header_json, &payload)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<NetWeights, NetError> {
    let mut r = BufReader::new(File::open(path)?);
    let (header_json, payload) = util::read_container(&mut r, WEIGHTS_MAGIC)?;
    let header: Header = serde_json::from_str(&header_json)
        .map_err(|e| NetError::FormatVersionMismatch(format!("bad header: {e}")))?;
    header.spec.validate()?;

    let values = util::f32s_from_le_bytes(&payload)?;
    let declared: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if declared != values.len() {
        return Err(NetError::WeightMismatch(format!(
            "header declares {declared} values, payload holds {}",
            values.len()
        )));
    }

    let mut offset = 0usize;
    let mut take = |decl: &TensorDecl, expect: &str, shape: &[usize]| -> Result<Vec<f32>, NetError> {
        if decl.name != expect || decl.shape != shape {
            return Err(NetError::WeightMismatch(format!(
                "expected tensor {expect} {shape:?}, found {} {:?}",
                decl.name, decl.shape
            )));
        }
        let len: usize = shape.iter().product();
        let out = values[offset..offset + len].to_vec();
        offset += len;
        Ok(out)
    };

    let spec = &header.spec;
    let per_block = 6usize;
    if header.tensors.len() != spec.blocks() * per_block + 2 {
        return Err(NetError::WeightMismatch(format!(
            "expected {} tensors, found {}",
            spec.blocks() * per_block + 2,
            header.tensors.len()
        )));
    }

    let mut blocks = Vec::with_capacity(spec.blocks());
    let mut cin = 1usize;
    for (i, &cout) in spec.filters.iter().enumerate() {
        let n = i + 1;
        let d = &header.tensors[i * per_block..];
        let w = take(&d[0], &format!("conv{n}.w"), &[cout, cin, 3, 3])?;
        let b = take(&d[1], &format!("conv{n}.b"), &[cout])?;
        let gamma = take(&d[2], &format!("conv{n}.gamma"), &[cout])?;
        let beta = take(&d[3], &format!("conv{n}.beta"), &[cout])?;
        let rm = take(&d[4], &format!("conv{n}.running_mean"), &[cout])?;
        let rv = take(&d[5], &format!("conv{n}.running_var"), &[cout])?;
        blocks.push(BlockParams {
            w: Array4::from_shape_vec((cout, cin, 3, 3), w)
                .map_err(|e| NetError::ShapeError(e.to_string()))?,
            b: Array1::from_vec(b),
            gamma: Array1::from_vec(gamma),
            beta: Array1::from_vec(beta),
            running_mean: Array1::from_vec(rm),
            running_var: Array1::from_vec(rv),
        });
        cin = cout;
    }
    let feat = *spec.filters.last().unwrap();
    let d = &header.tensors[spec.blocks() * per_block..];
    let hw = take(&d[0], "head.w", &[spec.classes, feat])?;
    let hb = take(&d[1], "head.b", &[spec.classes])?;
    let head = HeadParams {
        w: Array2::from_shape_vec((spec.classes, feat), hw)
            .map_err(|e| NetError::ShapeError(e.to_string()))?,
        b: Array1::from_vec(hb),
    };

    Ok(NetWeights {
        net: Net { spec: header.spec.clone(), blocks, head },
        meta: header.meta,
    })
}
