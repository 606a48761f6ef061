//! Training loop: Adam with step-decayed learning rate, softmax
//! cross-entropy over the global-average-pool head, and best-validation
//! weight selection. Parameter updates are strictly sequential so a fixed
//! seed reproduces weights bit for bit.

use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Real;
use super::{
    batch_loss_and_grads, images_to_batch, predict_classes, BlockParams, ConvSpec, HeadParams,
    Net, NetError,
};
use crate::imaging::GrayImage;
use crate::util;

/// Labeled single-channel images of one common size.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<GrayImage>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Digest over pixel data and labels, recorded in weight metadata.
    pub fn digest(&self) -> String {
        let mut hasher = crc32fast::Hasher::new();
        let mut fnv_input = Vec::new();
        for im in &self.images {
            for v in &im.data {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.update(&self.labels);
        fnv_input.extend_from_slice(&hasher.finalize().to_le_bytes());
        fnv_input.extend_from_slice(&(self.images.len() as u64).to_le_bytes());
        util::digest_hex(&fnv_input)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// learning rate multiplies by `lr_decay` after every `lr_decay_every`
    /// epochs
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    /// stop once validation accuracy reaches this level (keeps the best
    /// epoch's weights either way)
    pub stop_at_val_acc: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_decay_every: 10,
            lr_decay: 0.1,
            bn_momentum: 0.9,
            seed: 0,
            stop_at_val_acc: None,
        }
    }
}

/// Provenance carried inside the weight file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub dataset_digest: String,
    pub epoch_val_acc: Vec<f64>,
    /// run configuration the caller trained under, JSON; provenance only
    #[serde(default)]
    pub config_json: String,
}

/// Weights plus training provenance; the serialized format in [`super::io`].
#[derive(Debug, Clone)]
pub struct NetWeights {
    pub net: Net<f32>,
    pub meta: TrainMeta,
}

/// Kaiming-uniform kernels and head, zero biases, identity batch norm.
pub fn init_net<F: Real>(spec: &ConvSpec, seed: u64) -> Net<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(spec.blocks());
    let mut cin = 1usize;
    for &cout in &spec.filters {
        let fan_in = cin * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Array4::from_shape_fn((cout, cin, 3, 3), |_| {
            F::from_f64(rng.gen_range(-bound..bound))
        });
        blocks.push(BlockParams {
            w,
            b: Array1::zeros(cout),
            gamma: Array1::from_elem(cout, F::one()),
            beta: Array1::zeros(cout),
            running_mean: Array1::zeros(cout),
            running_var: Array1::from_elem(cout, F::one()),
        });
        cin = cout;
    }
    let feat = *spec.filters.last().unwrap();
    let bound = (6.0 / feat as f64).sqrt();
    let head_w = Array2::from_shape_fn((spec.classes, feat), |_| {
        F::from_f64(rng.gen_range(-bound..bound))
    });
    Net {
        spec: spec.clone(),
        blocks,
        head: HeadParams { w: head_w, b: Array1::zeros(spec.classes) },
    }
}

/// Adam state per learnable tensor, in [`Net::params_mut`] order.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step<F: Real>(&mut self, params: &mut [(String, &mut [F])], grads: &[&[F]], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_B1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_B2.powi(self.t as i32);
        for (pi, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[pi];
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..p.len() {
                let gi = g[i].to_f64_();
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * gi;
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                p[i] = p[i] - F::from_f64(update);
            }
        }
    }
}

/// Validation accuracy with inference-mode batch norm.
pub fn eval_accuracy<F: Real>(net: &Net<F>, set: &ImageSet, batch: usize) -> f64 {
    let mut correct = 0usize;
    let n = set.len();
    let mut i = 0;
    while i < n {
        let end = (i + batch).min(n);
        let refs: Vec<&GrayImage> = set.images[i..end].iter().collect();
        let x = images_to_batch::<F>(&refs).expect("validated set");
        let logits = net.infer_logits(&x);
        for (row, &label) in predict_classes(&logits).iter().zip(&set.labels[i..end]) {
            if *row == label as usize {
                correct += 1;
            }
        }
        i = end;
    }
    correct as f64 / n as f64
}

/// Trains on the letter set and returns the weights of the epoch with the
/// best validation accuracy (earliest epoch wins ties). Deterministic for a
/// fixed seed and data order.
pub fn train_emnist(
    train: &ImageSet,
    val: &ImageSet,
    spec: &ConvSpec,
    opts: &TrainOptions,
) -> Result<NetWeights, NetError> {
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    for set in [train, val] {
        if set.images.len() != set.labels.len() {
            return Err(NetError::ShapeError("images/labels length mismatch".into()));
        }
        for &l in &set.labels {
            if l as usize >= spec.classes {
                return Err(NetError::LabelOutOfRange { label: l as usize, classes: spec.classes });
            }
        }
    }

    let mut net: Net<f32> = init_net(spec, opts.seed);
    let sizes: Vec<usize> = net.params_mut().iter().map(|(_, p)| p.len()).collect();
    let mut adam = Adam::new(&sizes);

    let mut best_net = net.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epoch_val_acc = Vec::new();

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..opts.epochs {
        let lr = opts.learning_rate
            * opts.lr_decay.powi((epoch / opts.lr_decay_every.max(1)) as i32);
        let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(opts.seed, &format!("epoch{epoch}")));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        let mut i = 0;
        while i < n {
            let end = (i + opts.batch_size).min(n);
            let idx = &order[i..end];
            let refs: Vec<&GrayImage> = idx.iter().map(|&j| &train.images[j]).collect();
            let targets: Vec<usize> = idx.iter().map(|&j| train.labels[j] as usize).collect();
            let x: Array4<f32> = images_to_batch(&refs)?;
            let (loss, grads, stats) = batch_loss_and_grads(&net, &x, &targets);

            // fold batch statistics into the running estimates; variance
            // gets the unbiased (count/(count-1)) correction
            let mom = opts.bn_momentum as f32;
            for (li, blk) in net.blocks.iter_mut().enumerate() {
                let count = stats.counts[li] as f32;
                let corr = if count > 1.5 { count / (count - 1.0) } else { 1.0 };
                for c in 0..blk.running_mean.len() {
                    blk.running_mean[c] =
                        mom * blk.running_mean[c] + (1.0 - mom) * stats.means[li][c];
                    blk.running_var[c] =
                        mom * blk.running_var[c] + (1.0 - mom) * corr * stats.vars[li][c];
                }
            }

            let flat_grads: Vec<&[f32]> = grads.flat().into_iter().map(|(_, g)| g).collect();
            let mut params = net.params_mut();
            adam.step(&mut params, &flat_grads, lr);

            epoch_loss += loss as f64;
            batches += 1;
            i = end;
        }

        let val_acc = eval_accuracy(&net, val, opts.batch_size.max(32));
        epoch_val_acc.push(val_acc);
        log::info!(
            "epoch {epoch}: lr {lr:.2e}, mean loss {:.4}, val acc {:.4}",
            epoch_loss / batches.max(1) as f64,
            val_acc
        );
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_net = net.clone();
        }
        if let Some(target) = opts.stop_at_val_acc {
            if val_acc >= target {
                break;
            }
        }
    }

    Ok(NetWeights {
        net: best_net,
        meta: TrainMeta {
            seed: opts.seed,
            best_epoch,
            best_val_acc: best_val,
            dataset_digest: train.digest(),
            epoch_val_acc,
            config_json: String::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Blob-vs-bar toy set: two clearly separable shape classes.
    pub fn toy_set(n_per_class: usize, seed: u64, size: usize) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_per_class * 2 {
            let class = (i % 2) as u8;
            let mut img = GrayImage::filled(size, size, 1.0);
            let jx = rng.gen_range(-2i32..=2);
            let jy = rng.gen_range(-2i32..=2);
            let c = (size / 2) as i32;
            if class == 0 {
                for dy in -3i32..=3 {
                    for dx in -3i32..=3 {
                        if dx * dx + dy * dy <= 9 {
                            let (x, y) = (c + jx + dx, c + jy + dy);
                            if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                                img.set(x as usize, y as usize, 0.0);
                            }
                        }
                    }
                }
            } else {
                for dy in -6i32..=6 {
                    let (x, y) = (c + jx, c + jy + dy);
                    if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                        img.set(x as usize, y as usize, 0.0);
                    }
                }
            }
            images.push(img);
            labels.push(class);
        }
        ImageSet { images, labels }
    }

    #[test]
    fn toy_two_class_training_reaches_high_accuracy() {
        let spec = ConvSpec { classes: 2, ..ConvSpec::default() };
        let train = toy_set(100, 11, 20);
        let val = toy_set(20, 12, 20);
        // few optimizer steps per epoch here, so the running batch-norm
        // statistics need a faster momentum than the full-scale default
        let opts = TrainOptions {
            epochs: 8,
            batch_size: 32,
            seed: 5,
            bn_momentum: 0.5,
            ..TrainOptions::default()
        };
        let w = train_emnist(&train, &val, &spec, &opts).unwrap();
        let train_acc = eval_accuracy(&w.net, &train, 64);
        assert!(train_acc >= 0.99, "train accuracy {train_acc}");
    }

    #[test]
    fn fixed_seed_reproduces_weights_bitwise() {
        let spec = ConvSpec { classes: 2, ..ConvSpec::default() };
        let train = toy_set(30, 21, 20);
        let val = toy_set(6, 22, 20);
        let opts = TrainOptions { epochs: 2, batch_size: 16, seed: 9, ..TrainOptions::default() };
        let a = train_emnist(&train, &val, &spec, &opts).unwrap();
        let b = train_emnist(&train, &val, &spec, &opts).unwrap();
        let mut na = a.net.clone();
        let mut nb = b.net.clone();
        for ((name_a, pa), (name_b, pb)) in na.params_mut().iter().zip(nb.params_mut().iter()) {
            assert_eq!(name_a, name_b);
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "divergence in {name_a}");
            }
        }
        for (ba, bb) in a.net.blocks.iter().zip(&b.net.blocks) {
            assert_eq!(ba.running_mean, bb.running_mean);
            assert_eq!(ba.running_var, bb.running_var);
        }
    }

    #[test]
    fn empty_and_bad_labels_rejected() {
        let spec = ConvSpec::default();
        let empty = ImageSet { images: vec![], labels: vec![] };
        let one = ImageSet { images: vec![GrayImage::filled(16, 16, 0.0)], labels: vec![26] };
        assert!(matches!(
            train_emnist(&empty, &one, &spec, &TrainOptions::default()),
            Err(NetError::EmptyDataset)
        ));
        let ok = ImageSet { images: vec![GrayImage::filled(16, 16, 0.0)], labels: vec![0] };
        assert!(matches!(
            train_emnist(&ok, &one, &spec, &TrainOptions::default()),
            Err(NetError::LabelOutOfRange { .. })
        ));
    }
}
