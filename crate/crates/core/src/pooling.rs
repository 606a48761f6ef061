//! Three ways to collapse a layer's F feature maps into one fragment
//! descriptor: average the maps, weight the maps by filter saliency before
//! the histogram, or weight the per-map histograms after extraction. Average
//! is literally the pre strategy with uniform weights and shares its code
//! path, which makes that identity exact.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::convnet::FeatureStack;
use crate::hogmap::{self, HogError, HogParams, HogVector};
use crate::saliency::SaliencyProfile;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("empty feature stack")]
    EmptyStack,
    #[error("saliency profile mismatch: {0}")]
    ProfileMismatch(String),
    #[error("descriptor error: {0}")]
    Hog(#[from] HogError),
    #[error("pooled inputs disagree: {0}")]
    DimMismatch(String),
}

/// Pooling strategy, recorded in descriptors and model files; train and
/// test must agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Average,
    Pre,
    Post,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pooling::Average => write!(f, "average"),
            Pooling::Pre => write!(f, "pre"),
            Pooling::Post => write!(f, "post"),
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Pooling::Average),
            "pre" => Ok(Pooling::Pre),
            "post" => Ok(Pooling::Post),
            other => Err(format!("unknown pooling strategy {other:?} (average|pre|post)")),
        }
    }
}

/// Unit-norm (or zero) fragment descriptor with its provenance.
#[derive(Debug, Clone)]
pub struct PooledDescriptor {
    pub vector: HogVector,
    pub strategy: Pooling,
    pub layer: usize,
    /// digest of the profile used for pre/post; empty for average
    pub saliency_digest: String,
}

impl PooledDescriptor {
    pub fn is_zero(&self) -> bool {
        self.vector.values.iter().all(|&v| v == 0.0)
    }
}

fn weighted_map_sum(stack: &FeatureStack, weights: &[f64]) -> Result<Array2<f64>, PoolError> {
    let (f, h, w) = stack.maps.dim();
    if f == 0 {
        return Err(PoolError::EmptyStack);
    }
    if weights.len() != f {
        return Err(PoolError::ProfileMismatch(format!(
            "{} weights for {f} maps",
            weights.len()
        )));
    }
    let mut s = Array2::<f64>::zeros((h, w));
    for (fi, &wf) in weights.iter().enumerate() {
        let map = stack.maps.index_axis(ndarray::Axis(0), fi);
        for y in 0..h {
            for x in 0..w {
                s[(y, x)] += wf * map[(y, x)] as f64;
            }
        }
    }
    Ok(s)
}

fn check_profile(stack: &FeatureStack, profile: &SaliencyProfile) -> Result<(), PoolError> {
    if profile.layer != stack.layer {
        return Err(PoolError::ProfileMismatch(format!(
            "profile calibrated for layer {}, stack is layer {}",
            profile.layer, stack.layer
        )));
    }
    if profile.filters() != stack.maps.dim().0 {
        return Err(PoolError::ProfileMismatch(format!(
            "profile has {} filters, stack has {}",
            profile.filters(),
            stack.maps.dim().0
        )));
    }
    Ok(())
}

/// Mean of the F maps, then one descriptor. Same code as the pre strategy
/// with uniform weights.
pub fn average_pool(stack: &FeatureStack, params: &HogParams) -> Result<PooledDescriptor, PoolError> {
    let f = stack.maps.dim().0;
    if f == 0 {
        return Err(PoolError::EmptyStack);
    }
    let weights = vec![1.0 / f as f64; f];
    let combined = weighted_map_sum(stack, &weights)?;
    let vector = hogmap::descriptor_f64(combined.view(), params, stack.layer)?;
    Ok(PooledDescriptor {
        vector,
        strategy: Pooling::Average,
        layer: stack.layer,
        saliency_digest: String::new(),
    })
}

/// Saliency-weighted sum of the maps, then one descriptor.
pub fn pre_saliency_pool(
    stack: &FeatureStack,
    profile: &SaliencyProfile,
    params: &HogParams,
) -> Result<PooledDescriptor, PoolError> {
    check_profile(stack, profile)?;
    let combined = weighted_map_sum(stack, &profile.w)?;
    let vector = hogmap::descriptor_f64(combined.view(), params, stack.layer)?;
    Ok(PooledDescriptor {
        vector,
        strategy: Pooling::Pre,
        layer: stack.layer,
        saliency_digest: profile.digest(),
    })
}

/// Saliency-weighted sum of per-map descriptors, renormalized to unit L2.
/// All-zero inputs stay a zero vector.
pub fn post_saliency_pool(
    hogs: &[HogVector],
    profile: &SaliencyProfile,
) -> Result<PooledDescriptor, PoolError> {
    if hogs.is_empty() {
        return Err(PoolError::EmptyStack);
    }
    if hogs.len() != profile.filters() {
        return Err(PoolError::ProfileMismatch(format!(
            "{} descriptors for {} profile filters",
            hogs.len(),
            profile.filters()
        )));
    }
    let len = hogs[0].values.len();
    let layer = hogs[0].layer;
    for h in hogs {
        if h.values.len() != len {
            return Err(PoolError::DimMismatch(format!(
                "descriptor lengths differ: {} vs {len}",
                h.values.len()
            )));
        }
        if h.layer != layer {
            return Err(PoolError::DimMismatch("descriptors from different layers".into()));
        }
    }
    if profile.layer != layer {
        return Err(PoolError::ProfileMismatch(format!(
            "profile calibrated for layer {}, descriptors are layer {layer}",
            profile.layer
        )));
    }
    let mut sum = vec![0.0f64; len];
    for (h, &wf) in hogs.iter().zip(&profile.w) {
        for (s, v) in sum.iter_mut().zip(&h.values) {
            *s += wf * v;
        }
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut sum {
            *v /= norm;
        }
    } else {
        log::debug!("post pooling produced a zero descriptor");
    }
    Ok(PooledDescriptor {
        vector: HogVector { values: sum, params: hogs[0].params.clone(), layer },
        strategy: Pooling::Post,
        layer,
        saliency_digest: profile.digest(),
    })
}

/// One descriptor per feature map, in filter order. Post pooling combines
/// these; saliency calibration uses them as its per-filter rows.
pub fn per_map_descriptors(
    stack: &FeatureStack,
    params: &HogParams,
) -> Result<Vec<HogVector>, PoolError> {
    let f = stack.maps.dim().0;
    if f == 0 {
        return Err(PoolError::EmptyStack);
    }
    let mut hogs = Vec::with_capacity(f);
    for fi in 0..f {
        let map = stack.maps.index_axis(ndarray::Axis(0), fi);
        hogs.push(hogmap::descriptor(map, params, stack.layer)?);
    }
    Ok(hogs)
}

/// Pools one fragment's feature stack with the chosen strategy. For post
/// pooling this extracts one descriptor per map first.
pub fn pool_stack(
    stack: &FeatureStack,
    strategy: Pooling,
    profile: Option<&SaliencyProfile>,
    params: &HogParams,
) -> Result<PooledDescriptor, PoolError> {
    match strategy {
        Pooling::Average => average_pool(stack, params),
        Pooling::Pre => {
            let profile = profile.ok_or_else(|| {
                PoolError::ProfileMismatch("pre pooling needs a saliency profile".into())
            })?;
            pre_saliency_pool(stack, profile, params)
        }
        Pooling::Post => {
            let profile = profile.ok_or_else(|| {
                PoolError::ProfileMismatch("post pooling needs a saliency profile".into())
            })?;
            check_profile(stack, profile)?;
            let hogs = per_map_descriptors(stack, params)?;
            post_saliency_pool(&hogs, profile)
        }
    }
}
