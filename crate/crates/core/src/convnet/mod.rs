//! Six-block fully-convolutional feature extractor trained on handwritten
//! letters and reused, writer-independently, as a per-fragment feature map
//! source. Strided convolutions stand in for pooling; each block applies
//! convolution, then ReLU, then batch normalization.

pub mod io;
pub mod layers;
pub mod train;

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::imaging::GrayImage;
use layers::{
    bn_backward, bn_forward_infer, bn_forward_train, conv_backward, conv_forward, gap_backward,
    gap_forward, im2col, linear_backward, linear_forward, relu_backward, relu_forward, softmax_ce,
    BnCache, Cols, Real,
};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("weight mismatch: {0}")]
    WeightMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range (classes = {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("weight file format version mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("weight file checksum mismatch")]
    ChecksumMismatch,
    #[error("weight file truncated")]
    TruncatedFile,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture description. The implementation fixes 3x3 kernels and same
/// padding; filter counts and strides are data.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub filters: Vec<usize>,
    pub strides: Vec<usize>,
    /// classifier width of the training head (letters: 26)
    pub classes: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            filters: vec![32, 32, 64, 64, 128, 128],
            strides: vec![1, 1, 2, 1, 2, 1],
            classes: 26,
        }
    }
}

impl ConvSpec {
    pub fn blocks(&self) -> usize {
        self.filters.len()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.filters.len() != 6 || self.strides.len() != 6 {
            return Err(NetError::ShapeError(format!(
                "expected 6 blocks, got {} filters / {} strides",
                self.filters.len(),
                self.strides.len()
            )));
        }
        if self.filters[0] != 32 || self.strides[0] != 1 {
            return Err(NetError::ShapeError(
                "block 1 must be 32 filters at stride 1".into(),
            ));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(NetError::ShapeError("strides must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Spatial sizes (h, w) after each block for a given input.
    pub fn shape_plan(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.blocks());
        let (mut ch, mut cw) = (h, w);
        for &s in &self.strides {
            ch = layers::out_dim(ch, s);
            cw = layers::out_dim(cw, s);
            out.push((ch, cw));
        }
        out
    }
}

pub const BN_EPS: f64 = 1e-5;

/// One block's learnable and running state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    /// [classes, features]
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Full network state, generic over scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct Net<F> {
    pub spec: ConvSpec,
    pub blocks: Vec<BlockParams<F>>,
    pub head: HeadParams<F>,
}

/// The post-ReLU, post-batch-norm maps of one block for one fragment.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    /// 1-based block index
    pub layer: usize,
    /// [filters, h, w]
    pub maps: Array3<f32>,
}

impl<F: Real> Net<F> {
    /// Named mutable views over every learnable tensor, in a fixed order
    /// shared by the optimizer and the serializer. Running statistics are
    /// not learnable and are excluded.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let n = i + 1;
            out.push((format!("conv{n}.w"), blk.w.as_slice_mut().unwrap()));
            out.push((format!("conv{n}.b"), blk.b.as_slice_mut().unwrap()));
            out.push((format!("conv{n}.gamma"), blk.gamma.as_slice_mut().unwrap()));
            out.push((format!("conv{n}.beta"), blk.beta.as_slice_mut().unwrap()));
        }
        out.push(("head.w".into(), self.head.w.as_slice_mut().unwrap()));
        out.push(("head.b".into(), self.head.b.as_slice_mut().unwrap()));
        out
    }

    /// Inference pass returning the feature maps of block `upto_layer`
    /// (1-based). Batch norm uses running statistics.
    pub fn forward_feature_maps(
        &self,
        patch: &GrayImage,
        upto_layer: usize,
    ) -> Result<FeatureStack, NetError>
    where
        F: Real,
    {
        if upto_layer == 0 || upto_layer > self.spec.blocks() {
            return Err(NetError::WeightMismatch(format!(
                "layer {upto_layer} outside 1..={}",
                self.spec.blocks()
            )));
        }
        if patch.width < 4 || patch.height < 4 {
            return Err(NetError::ShapeError(format!(
                "patch {}x{} below minimum 4x4",
                patch.width, patch.height
            )));
        }
        let mut x = Array4::<F>::zeros((1, 1, patch.height, patch.width));
        for y in 0..patch.height {
            for xx in 0..patch.width {
                x[(0, 0, y, xx)] = F::from_f64(patch.get(xx, y) as f64);
            }
        }
        for li in 0..upto_layer {
            x = self.infer_block(li, &x);
        }
        let (_, c, h, w) = x.dim();
        let mut maps = Array3::<f32>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    maps[(ci, y, xx)] = x[(0, ci, y, xx)].to_f64_() as f32;
                }
            }
        }
        debug_assert!(maps.iter().all(|v| v.is_finite()), "non-finite feature map");
        Ok(FeatureStack { layer: upto_layer, maps })
    }

    /// Inference forward of several single-channel images stacked into one
    /// batch; returns logits from the training head.
    pub fn infer_logits(&self, x: &Array4<F>) -> Array2<F> {
        let mut cur = x.clone();
        for li in 0..self.spec.blocks() {
            cur = self.infer_block(li, &cur);
        }
        let pooled = gap_forward(&cur);
        linear_forward(&pooled, &self.head.w, &self.head.b)
    }

    fn infer_block(&self, li: usize, x: &Array4<F>) -> Array4<F> {
        let blk = &self.blocks[li];
        let cols = im2col(x, self.spec.strides[li]);
        let z = conv_forward(&cols, &blk.w, &blk.b);
        let r = relu_forward(&z);
        bn_forward_infer(
            &r,
            &blk.gamma.view(),
            &blk.beta.view(),
            &blk.running_mean.view(),
            &blk.running_var.view(),
            F::from_f64(BN_EPS),
        )
    }
}

/// Per-block parameter gradients, same field order as [`BlockParams`].
pub struct BlockGrads<F> {
    pub dw: Array4<F>,
    pub db: Array1<F>,
    pub dgamma: Array1<F>,
    pub dbeta: Array1<F>,
}

pub struct Grads<F> {
    pub blocks: Vec<BlockGrads<F>>,
    pub dhead_w: Array2<F>,
    pub dhead_b: Array1<F>,
}

impl<F: Real> Grads<F> {
    /// Flattened gradients in the exact order of [`Net::params_mut`].
    pub fn flat(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let n = i + 1;
            out.push((format!("conv{n}.w"), blk.dw.as_slice().unwrap()));
            out.push((format!("conv{n}.b"), blk.db.as_slice().unwrap()));
            out.push((format!("conv{n}.gamma"), blk.dgamma.as_slice().unwrap()));
            out.push((format!("conv{n}.beta"), blk.dbeta.as_slice().unwrap()));
        }
        out.push(("head.w".into(), self.dhead_w.as_slice().unwrap()));
        out.push(("head.b".into(), self.dhead_b.as_slice().unwrap()));
        out
    }
}

/// Batch statistics produced by a training-mode forward, needed to update
/// the running estimates.
pub struct BatchStats<F> {
    pub means: Vec<Array1<F>>,
    /// biased batch variances
    pub vars: Vec<Array1<F>>,
    /// per-layer elements behind each channel statistic (N*H*W)
    pub counts: Vec<usize>,
}

struct BlockCache<F> {
    cols: Cols<F>,
    conv_out: Array4<F>,
    bn: BnCache<F>,
}

/// Training-mode forward + backward over one batch. Pure with respect to the
/// network (running statistics are reported, not written), which lets the
/// finite-difference oracle drive [`batch_loss`] against these gradients.
pub fn batch_loss_and_grads<F: Real>(
    net: &Net<F>,
    x: &Array4<F>,
    targets: &[usize],
) -> (F, Grads<F>, BatchStats<F>) {
    let nblocks = net.spec.blocks();
    let mut caches: Vec<BlockCache<F>> = Vec::with_capacity(nblocks);
    let mut stats = BatchStats { means: Vec::new(), vars: Vec::new(), counts: Vec::new() };
    let mut cur = x.clone();
    for li in 0..nblocks {
        let blk = &net.blocks[li];
        let cols = im2col(&cur, net.spec.strides[li]);
        let conv_out = conv_forward(&cols, &blk.w, &blk.b);
        let relu_out = relu_forward(&conv_out);
        let (bn_out, bn) = bn_forward_train(
            &relu_out,
            &blk.gamma.view(),
            &blk.beta.view(),
            F::from_f64(BN_EPS),
        );
        let (n, _, h, w) = relu_out.dim();
        stats.means.push(bn.batch_mean.clone());
        stats.vars.push(bn.batch_var.clone());
        stats.counts.push(n * h * w);
        caches.push(BlockCache { cols, conv_out, bn });
        cur = bn_out;
    }
    let gap_in_shape = cur.dim();
    let pooled = gap_forward(&cur);
    let logits = linear_forward(&pooled, &net.head.w, &net.head.b);
    let (loss, dlogits) = softmax_ce(&logits, targets);

    let (dpooled, dhead_w, dhead_b) = linear_backward(&dlogits, &pooled, &net.head.w);
    let mut dcur = gap_backward(&dpooled, gap_in_shape);
    let mut block_grads: Vec<BlockGrads<F>> = Vec::with_capacity(nblocks);
    for li in (0..nblocks).rev() {
        let blk = &net.blocks[li];
        let cache = &caches[li];
        let (drelu, dgamma, dbeta) = bn_backward(&dcur, &cache.bn, &blk.gamma.view());
        let dconv = relu_backward(&drelu, &cache.conv_out);
        let (dx, dw, db) = conv_backward(&dconv, &cache.cols, &blk.w);
        block_grads.push(BlockGrads { dw, db, dgamma, dbeta });
        dcur = dx;
    }
    block_grads.reverse();
    (loss, Grads { blocks: block_grads, dhead_w, dhead_b }, stats)
}

/// Training-mode loss only (batch statistics recomputed, running statistics
/// untouched); the counterpart [`batch_loss_and_grads`] differentiates this
/// exact function.
pub fn batch_loss<F: Real>(net: &Net<F>, x: &Array4<F>, targets: &[usize]) -> F {
    let mut cur = x.clone();
    for li in 0..net.spec.blocks() {
        let blk = &net.blocks[li];
        let cols = im2col(&cur, net.spec.strides[li]);
        let conv_out = conv_forward(&cols, &blk.w, &blk.b);
        let relu_out = relu_forward(&conv_out);
        let (bn_out, _) = bn_forward_train(
            &relu_out,
            &blk.gamma.view(),
            &blk.beta.view(),
            F::from_f64(BN_EPS),
        );
        cur = bn_out;
    }
    let pooled = gap_forward(&cur);
    let logits = linear_forward(&pooled, &net.head.w, &net.head.b);
    let (loss, _) = softmax_ce(&logits, targets);
    loss
}

/// Converts a batch of equal-size grayscale images to an NCHW tensor.
pub fn images_to_batch<F: Real>(images: &[&GrayImage]) -> Result<Array4<F>, NetError> {
    if images.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let (w, h) = (images[0].width, images[0].height);
    if images.iter().any(|im| im.width != w || im.height != h) {
        return Err(NetError::ShapeError("images in a batch must share size".into()));
    }
    let mut x = Array4::<F>::zeros((images.len(), 1, h, w));
    for (ni, im) in images.iter().enumerate() {
        for y in 0..h {
            for xx in 0..w {
                x[(ni, 0, y, xx)] = F::from_f64(im.get(xx, y) as f64);
            }
        }
    }
    Ok(x)
}

/// Class predictions from logits (argmax per row, lowest index on ties).
pub fn predict_classes<F: Real>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
