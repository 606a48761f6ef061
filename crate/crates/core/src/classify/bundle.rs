//! Model bundle file: one container holding the per-writer SVMs for one or
//! two convolution layers, the fusion weight, and the provenance digests
//! that tie a bundle to the config and saliency profiles it was built with.
//!
//! Layout: 8-byte magic, JSON header (pooling strategy, digests, per-layer
//! C/gamma and model declarations), then for every model its support vectors
//! as little-endian f32, its dual coefficients and bias as little-endian
//! f64, and finally a CRC32 over everything before it.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;

use super::svm::{SvmMeta, SvmModel};
use crate::pooling::Pooling;
use crate::util::{self, ContainerError};

pub const BUNDLE_MAGIC: &[u8; 8] = b"SIDB0001";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a readable model bundle: {0}")]
    FormatMismatch(String),
    #[error("bundle file is truncated")]
    TruncatedFile,
    #[error("bundle checksum mismatch")]
    ChecksumMismatch,
    #[error("bundle is internally inconsistent: {0}")]
    Inconsistent(String),
}

impl From<ContainerError> for BundleError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic { .. } | ContainerError::BadHeader(_) => {
                BundleError::FormatMismatch(e.to_string())
            }
            ContainerError::Truncated => BundleError::TruncatedFile,
            ContainerError::ChecksumMismatch { .. } => BundleError::ChecksumMismatch,
            ContainerError::Io(e) => BundleError::Io(e),
        }
    }
}

/// All models trained against one layer's descriptors.
#[derive(Debug, Clone)]
pub struct LayerModels {
    pub layer: usize,
    pub c: f64,
    pub gamma: f64,
    /// digest of the saliency profile the descriptors were pooled with;
    /// empty for average pooling
    pub saliency_digest: String,
    /// ascending writer-id order
    pub models: Vec<SvmModel>,
}

impl LayerModels {
    pub fn writer_ids(&self) -> Vec<u32> {
        self.models.iter().map(|m| m.writer).collect()
    }
}

/// A complete trained classifier: one or two layer sections plus the fusion
/// weight when there are two.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config_digest: String,
    /// full run configuration, JSON; provenance only
    pub config_json: String,
    pub pooling: Pooling,
    pub alpha: Option<f64>,
    pub layers: Vec<LayerModels>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelDecl {
    writer: u32,
    n_sv: usize,
    bias: f64,
    meta: SvmMeta,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LayerDecl {
    layer: usize,
    c: f64,
    gamma: f64,
    saliency_digest: String,
    dim: usize,
    models: Vec<ModelDecl>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config_digest: String,
    #[serde(default)]
    config_json: String,
    pooling: Pooling,
    alpha: Option<f64>,
    layers: Vec<LayerDecl>,
}

fn validate(bundle: &ModelBundle) -> Result<(), BundleError> {
    if bundle.layers.is_empty() {
        return Err(BundleError::Inconsistent("bundle holds no layers".into()));
    }
    if bundle.layers.len() > 1 && bundle.alpha.is_none() {
        return Err(BundleError::Inconsistent(
            "multi-layer bundle without a fusion weight".into(),
        ));
    }
    let roster = bundle.layers[0].writer_ids();
    if roster.is_empty() {
        return Err(BundleError::Inconsistent("layer holds no writer models".into()));
    }
    if !roster.windows(2).all(|w| w[0] < w[1]) {
        return Err(BundleError::Inconsistent("writer ids are not strictly ascending".into()));
    }
    for lm in &bundle.layers {
        if lm.writer_ids() != roster {
            return Err(BundleError::Inconsistent(
                "layers cover different writer sets".into(),
            ));
        }
        let dim = lm.models[0].support_vectors.ncols();
        for m in &lm.models {
            if m.support_vectors.ncols() != dim {
                return Err(BundleError::Inconsistent(format!(
                    "writer {} descriptor length {} differs from the layer's {}",
                    m.writer,
                    m.support_vectors.ncols(),
                    dim
                )));
            }
            if m.coefs.len() != m.support_vectors.nrows() {
                return Err(BundleError::Inconsistent(format!(
                    "writer {}: {} coefficients for {} support vectors",
                    m.writer,
                    m.coefs.len(),
                    m.support_vectors.nrows()
                )));
            }
        }
    }
    Ok(())
}

pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<(), BundleError> {
    validate(bundle)?;
    let mut layers = Vec::with_capacity(bundle.layers.len());
    let mut payload = Vec::new();
    for lm in &bundle.layers {
        let dim = lm.models[0].support_vectors.ncols();
        let mut decls = Vec::with_capacity(lm.models.len());
        for m in &lm.models {
            decls.push(ModelDecl {
                writer: m.writer,
                n_sv: m.support_vectors.nrows(),
                bias: m.bias,
                meta: m.meta.clone(),
            });
            let sv: Vec<f32> = m.support_vectors.iter().map(|&v| v as f32).collect();
            payload.extend_from_slice(&util::f32s_to_le_bytes(&sv));
            payload.extend_from_slice(&util::f64s_to_le_bytes(&m.coefs));
            payload.extend_from_slice(&util::f64s_to_le_bytes(&[m.bias]));
        }
        layers.push(LayerDecl {
            layer: lm.layer,
            c: lm.c,
            gamma: lm.gamma,
            saliency_digest: lm.saliency_digest.clone(),
            dim,
            models: decls,
        });
    }
    let header = Header {
        config_digest: bundle.config_digest.clone(),
        config_json: bundle.config_json.clone(),
        pooling: bundle.pooling,
        alpha: bundle.alpha,
        layers,
    };
    let header_json =
        serde_json::to_string(&header).map_err(|e| BundleError::FormatMismatch(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    util::write_container(&mut w, BUNDLE_MAGIC, &header_json, &payload)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, BundleError> {
    let mut r = BufReader::new(File::open(path)?);
    let (header_json, payload) = util::read_container(&mut r, BUNDLE_MAGIC)?;
    let header: Header = serde_json::from_str(&header_json)
        .map_err(|e| BundleError::FormatMismatch(format!("bad header: {e}")))?;

    let mut offset = 0usize;
    let mut take = |len: usize| -> Result<&[u8], BundleError> {
        let end = offset.checked_add(len).ok_or(BundleError::TruncatedFile)?;
        let slice = payload.get(offset..end).ok_or(BundleError::TruncatedFile)?;
        offset = end;
        Ok(slice)
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for ld in &header.layers {
        let mut models = Vec::with_capacity(ld.models.len());
        for md in &ld.models {
            let sv = util::f32s_from_le_bytes(take(md.n_sv * ld.dim * 4)?)?;
            let coefs = util::f64s_from_le_bytes(take(md.n_sv * 8)?)?;
            let bias = util::f64s_from_le_bytes(take(8)?)?[0];
            if bias.to_bits() != md.bias.to_bits() {
                return Err(BundleError::Inconsistent(format!(
                    "writer {}: header and payload disagree on the bias",
                    md.writer
                )));
            }
            let support_vectors = Array2::from_shape_vec(
                (md.n_sv, ld.dim),
                sv.into_iter().map(f64::from).collect(),
            )
            .map_err(|e| BundleError::Inconsistent(e.to_string()))?;
            models.push(SvmModel {
                writer: md.writer,
                support_vectors,
                coefs,
                bias,
                c: ld.c,
                gamma: ld.gamma,
                meta: md.meta.clone(),
            });
        }
        layers.push(LayerModels {
            layer: ld.layer,
            c: ld.c,
            gamma: ld.gamma,
            saliency_digest: ld.saliency_digest.clone(),
            models,
        });
    }
    if offset != payload.len() {
        return Err(BundleError::Inconsistent(format!(
            "payload holds {} bytes beyond the declared models",
            payload.len() - offset
        )));
    }
    let bundle = ModelBundle {
        config_digest: header.config_digest,
        config_json: header.config_json,
        pooling: header.pooling,
        alpha: header.alpha,
        layers,
    };
    validate(&bundle)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{train_ova, TrainSet};
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_models(seed: u64, gamma: f64) -> Vec<SvmModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Array2::zeros((24, 3));
        let mut writers = Vec::new();
        for i in 0..24 {
            let w = i / 8;
            for j in 0..3 {
                rows[(i, j)] = w as f64 * 2.0 + rng.gen_range(-0.4..0.4);
            }
            writers.push(w as u32 + 10);
        }
        train_ova(&TrainSet { rows, writers }, 5.0, gamma, 1).unwrap()
    }

    fn toy_bundle() -> ModelBundle {
        ModelBundle {
            config_digest: "cfg1234".into(),
            config_json: r#"{"seed":7}"#.into(),
            pooling: Pooling::Post,
            alpha: Some(0.55),
            layers: vec![
                LayerModels {
                    layer: 1,
                    c: 5.0,
                    gamma: 0.5,
                    saliency_digest: "sal-one".into(),
                    models: toy_models(3, 0.5),
                },
                LayerModels {
                    layer: 2,
                    c: 5.0,
                    gamma: 0.25,
                    saliency_digest: "sal-two".into(),
                    models: toy_models(4, 0.25),
                },
            ],
        }
    }

    #[test]
    fn round_trip_preserves_models_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bundle");
        let orig = toy_bundle();
        save_bundle(&path, &orig).unwrap();
        let back = load_bundle(&path).unwrap();
        assert_eq!(back.config_digest, orig.config_digest);
        assert_eq!(back.config_json, orig.config_json);
        assert_eq!(back.pooling, orig.pooling);
        assert_eq!(back.alpha, orig.alpha);
        assert_eq!(back.layers.len(), 2);
        let probe = ndarray::array![[0.1, 0.2, 0.3], [2.0, 2.0, 2.0]];
        for (la, lb) in orig.layers.iter().zip(&back.layers) {
            assert_eq!(la.saliency_digest, lb.saliency_digest);
            for (ma, mb) in la.models.iter().zip(&lb.models) {
                assert_eq!(ma.writer, mb.writer);
                // support vectors were f32-pinned at training time, so the
                // f32 file format loses nothing
                assert_eq!(ma.support_vectors, mb.support_vectors);
                assert_eq!(ma.coefs, mb.coefs);
                let da = ma.decisions(probe.view()).unwrap();
                let db = mb.decisions(probe.view()).unwrap();
                for (a, b) in da.iter().zip(db.iter()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn single_layer_bundle_needs_no_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bundle");
        let one = ModelBundle {
            config_digest: "cfg".into(),
            config_json: String::new(),
            pooling: Pooling::Average,
            alpha: None,
            layers: vec![LayerModels {
                layer: 3,
                c: 5.0,
                gamma: 0.5,
                saliency_digest: String::new(),
                models: toy_models(5, 0.5),
            }],
        };
        save_bundle(&path, &one).unwrap();
        assert_eq!(load_bundle(&path).unwrap().layers[0].layer, 3);

        let fused_without_alpha = ModelBundle { alpha: None, ..toy_bundle() };
        assert!(matches!(
            save_bundle(&path, &fused_without_alpha),
            Err(BundleError::Inconsistent(_))
        ));
    }

    #[test]
    fn corruption_and_wrong_magic_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bundle");
        save_bundle(&path, &toy_bundle()).unwrap();
        let clean = std::fs::read(&path).unwrap();

        let mut flipped = clean.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_bundle(&path), Err(BundleError::ChecksumMismatch)));

        let mut magic = clean.clone();
        magic[..8].copy_from_slice(b"NOTABNDL");
        std::fs::write(&path, &magic).unwrap();
        assert!(matches!(load_bundle(&path), Err(BundleError::FormatMismatch(_))));

        std::fs::write(&path, &clean[..10]).unwrap();
        assert!(matches!(load_bundle(&path), Err(BundleError::TruncatedFile)));
    }
}
