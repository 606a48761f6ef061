//! Scale-space keypoint detection (Gaussian pyramid, difference-of-Gaussian
//! extrema, sub-pixel refinement, orientation assignment) and extraction of
//! orientation-normalized square fragments around each keypoint.
//!
//! The downstream descriptor works on network feature maps, so no gradient
//! descriptor is built here; detection stops once location, scale and
//! orientation are known.

use crate::imaging::{bilinear, downsample_half, gaussian_blur, GrayImage};

#[derive(Debug, thiserror::Error)]
pub enum KeypointError {
    #[error("image {width}x{height} too small for scale-space analysis (need >= 16)")]
    ImageTooSmall { width: usize, height: usize },
}

/// A refined scale-space extremum in base-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// absolute scale in pixels of the base image
    pub sigma: f64,
    /// degrees in [0, 360)
    pub orientation: f64,
    pub octave: usize,
    /// |DoG| magnitude at the refined extremum
    pub response: f64,
}

/// Square, odd-sided, orientation-normalized patch with [0,1] pixels.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub patch: GrayImage,
    pub side: usize,
    pub source: Keypoint,
}

pub struct Octave {
    /// Gaussian levels, scales_per_octave + 3 of them
    pub levels: Vec<GrayImage>,
    /// blur of each level relative to this octave's sampling grid
    pub sigmas_rel: Vec<f64>,
    /// 2^octave downsampling factor relative to the base image
    pub scale: usize,
}

pub struct ScaleSpace {
    pub octaves: Vec<Octave>,
    pub scales_per_octave: usize,
    pub sigma0: f64,
}

/// Blur the input assumes to carry before any pyramid smoothing.
const ASSUMED_BLUR: f64 = 0.5;

/// Builds the Gaussian pyramid: `octaves` levels of halving resolution, each
/// holding scales_per_octave + 3 images with geometric sigma progression.
/// The octave count is clamped so the coarsest grid stays at least 8x8.
pub fn build_scale_space(
    img: &GrayImage,
    octaves: usize,
    scales_per_octave: usize,
    sigma0: f64,
) -> Result<ScaleSpace, KeypointError> {
    assert!(octaves >= 1 && scales_per_octave >= 1 && sigma0 > 0.0);
    if img.width < 16 || img.height < 16 {
        return Err(KeypointError::ImageTooSmall { width: img.width, height: img.height });
    }
    let max_octaves = {
        let mut o = 1usize;
        let mut dim = img.width.min(img.height);
        while dim / 2 >= 8 {
            o += 1;
            dim /= 2;
        }
        o
    };
    let octaves = octaves.min(max_octaves);
    let s = scales_per_octave;

    let mut sigmas_rel = Vec::with_capacity(s + 3);
    for i in 0..s + 3 {
        sigmas_rel.push(sigma0 * 2f64.powf(i as f64 / s as f64));
    }

    let mut out = Vec::with_capacity(octaves);
    let mut base = {
        let inc = (sigma0 * sigma0 - ASSUMED_BLUR * ASSUMED_BLUR).max(0.0).sqrt();
        gaussian_blur(img, inc as f32)
    };
    let mut scale = 1usize;
    for _ in 0..octaves {
        let mut levels = Vec::with_capacity(s + 3);
        levels.push(base.clone());
        for i in 1..s + 3 {
            let inc = (sigmas_rel[i] * sigmas_rel[i] - sigmas_rel[i - 1] * sigmas_rel[i - 1]).sqrt();
            let next = gaussian_blur(&levels[i - 1], inc as f32);
            levels.push(next);
        }
        // level s carries blur 2*sigma0; halving its grid brings it back to sigma0
        base = downsample_half(&levels[s]);
        out.push(Octave { levels, sigmas_rel: sigmas_rel.clone(), scale });
        scale *= 2;
    }
    Ok(ScaleSpace { octaves: out, scales_per_octave: s, sigma0 })
}

struct DogStack {
    /// planes[d] = level[d+1] - level[d], each w*h row-major
    planes: Vec<Vec<f32>>,
    width: usize,
    height: usize,
}

impl DogStack {
    fn from_octave(oct: &Octave) -> Self {
        let (w, h) = (oct.levels[0].width, oct.levels[0].height);
        let planes = oct
            .levels
            .windows(2)
            .map(|pair| {
                pair[1]
                    .data
                    .iter()
                    .zip(&pair[0].data)
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        DogStack { planes, width: w, height: h }
    }

    #[inline]
    fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.planes[d][y * self.width + x] as f64
    }
}

/// Finds 3x3x3 DoG extrema, refines them to sub-pixel accuracy, drops
/// low-contrast and edge-like candidates, and assigns one keypoint per
/// dominant gradient orientation (peaks within 80% of the histogram max).
/// The returned list is sorted by (octave, y, x, sigma).
pub fn detect_keypoints(
    space: &ScaleSpace,
    contrast_thresh: f64,
    edge_ratio: f64,
) -> Vec<Keypoint> {
    let s = space.scales_per_octave;
    let mut found = Vec::new();
    for (oi, oct) in space.octaves.iter().enumerate() {
        let dog = DogStack::from_octave(oct);
        let (w, h) = (dog.width, dog.height);
        if w < 3 || h < 3 {
            continue;
        }
        for d in 1..=s {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = dog.at(d, y, x);
                    if v.abs() < 0.5 * contrast_thresh {
                        continue;
                    }
                    if !is_extremum(&dog, d, y, x, v) {
                        continue;
                    }
                    if let Some(kp) = refine_candidate(
                        space, &dog, d, y, x, contrast_thresh, edge_ratio,
                    ) {
                        found.extend(orient_keypoint(space, oi, kp));
                    }
                }
            }
        }
    }
    found.sort_by(|a, b| {
        a.octave
            .cmp(&b.octave)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.sigma.total_cmp(&b.sigma))
    });
    found
}

fn is_extremum(dog: &DogStack, d: usize, y: usize, x: usize, v: f64) -> bool {
    let mut is_max = true;
    let mut is_min = true;
    for dd in d - 1..=d + 1 {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if dd == d && yy == y && xx == x {
                    continue;
                }
                let n = dog.at(dd, yy, xx);
                if v <= n {
                    is_max = false;
                }
                if v >= n {
                    is_min = false;
                }
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

/// Refined candidate before orientation assignment; coordinates still in
/// octave resolution.
struct Refined {
    x: f64,
    y: f64,
    level: f64,
    response: f64,
}

fn refine_candidate(
    space: &ScaleSpace,
    dog: &DogStack,
    d0: usize,
    y0: usize,
    x0: usize,
    contrast_thresh: f64,
    edge_ratio: f64,
) -> Option<Refined> {
    let s = space.scales_per_octave;
    let (w, h) = (dog.width, dog.height);
    let (mut d, mut y, mut x) = (d0 as isize, y0 as isize, x0 as isize);
    let mut offset = nalgebra::Vector3::zeros();
    let mut converged = false;
    for _ in 0..5 {
        let (du, yu, xu) = (d as usize, y as usize, x as usize);
        let g = nalgebra::Vector3::new(
            (dog.at(du, yu, xu + 1) - dog.at(du, yu, xu - 1)) / 2.0,
            (dog.at(du, yu + 1, xu) - dog.at(du, yu - 1, xu)) / 2.0,
            (dog.at(du + 1, yu, xu) - dog.at(du - 1, yu, xu)) / 2.0,
        );
        let c = dog.at(du, yu, xu);
        let dxx = dog.at(du, yu, xu + 1) + dog.at(du, yu, xu - 1) - 2.0 * c;
        let dyy = dog.at(du, yu + 1, xu) + dog.at(du, yu - 1, xu) - 2.0 * c;
        let dss = dog.at(du + 1, yu, xu) + dog.at(du - 1, yu, xu) - 2.0 * c;
        let dxy = (dog.at(du, yu + 1, xu + 1) - dog.at(du, yu + 1, xu - 1)
            - dog.at(du, yu - 1, xu + 1)
            + dog.at(du, yu - 1, xu - 1))
            / 4.0;
        let dxs = (dog.at(du + 1, yu, xu + 1) - dog.at(du + 1, yu, xu - 1)
            - dog.at(du - 1, yu, xu + 1)
            + dog.at(du - 1, yu, xu - 1))
            / 4.0;
        let dys = (dog.at(du + 1, yu + 1, xu) - dog.at(du + 1, yu - 1, xu)
            - dog.at(du - 1, yu + 1, xu)
            + dog.at(du - 1, yu - 1, xu))
            / 4.0;
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        offset = hess.lu().solve(&(-g))?;
        if offset[0].abs() < 0.5 && offset[1].abs() < 0.5 && offset[2].abs() < 0.5 {
            converged = true;
            break;
        }
        x += offset[0].round() as isize;
        y += offset[1].round() as isize;
        d += offset[2].round() as isize;
        if d < 1 || d > s as isize || x < 1 || x >= w as isize - 1 || y < 1 || y >= h as isize - 1 {
            return None;
        }
    }
    if !converged {
        return None;
    }
    let (du, yu, xu) = (d as usize, y as usize, x as usize);
    let c = dog.at(du, yu, xu);
    let g = nalgebra::Vector3::new(
        (dog.at(du, yu, xu + 1) - dog.at(du, yu, xu - 1)) / 2.0,
        (dog.at(du, yu + 1, xu) - dog.at(du, yu - 1, xu)) / 2.0,
        (dog.at(du + 1, yu, xu) - dog.at(du - 1, yu, xu)) / 2.0,
    );
    let refined_value = c + 0.5 * g.dot(&offset);
    if refined_value.abs() < contrast_thresh {
        return None;
    }
    // principal-curvature ratio test on the spatial 2x2 Hessian
    let dxx = dog.at(du, yu, xu + 1) + dog.at(du, yu, xu - 1) - 2.0 * c;
    let dyy = dog.at(du, yu + 1, xu) + dog.at(du, yu - 1, xu) - 2.0 * c;
    let dxy = (dog.at(du, yu + 1, xu + 1) - dog.at(du, yu + 1, xu - 1)
        - dog.at(du, yu - 1, xu + 1)
        + dog.at(du, yu - 1, xu - 1))
        / 4.0;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 || tr * tr * edge_ratio >= (edge_ratio + 1.0) * (edge_ratio + 1.0) * det {
        return None;
    }
    Some(Refined {
        x: xu as f64 + offset[0],
        y: yu as f64 + offset[1],
        level: du as f64 + offset[2],
        response: refined_value.abs(),
    })
}

/// Builds the 36-bin gradient orientation histogram around the refined
/// location and emits one keypoint per accepted peak.
fn orient_keypoint(space: &ScaleSpace, octave: usize, r: Refined) -> Vec<Keypoint> {
    let oct = &space.octaves[octave];
    let s = space.scales_per_octave;
    let (w, h) = (oct.levels[0].width, oct.levels[0].height);
    let scale = oct.scale as f64;

    let x_full = r.x * scale;
    let y_full = r.y * scale;
    let sigma_abs = space.sigma0 * scale * 2f64.powf(r.level / s as f64);

    // base-image bounds invariant; the base image is at least as large as
    // octave resolution * scale
    let full_w = (w * oct.scale) as f64;
    let full_h = (h * oct.scale) as f64;
    if !(0.0..full_w).contains(&x_full) || !(0.0..full_h).contains(&y_full) {
        return Vec::new();
    }

    let level_idx = (r.level.round() as isize).clamp(0, (s + 2) as isize) as usize;
    let level = &oct.levels[level_idx];
    let sigma_rel = space.sigma0 * 2f64.powf(r.level / s as f64);
    let sigma_w = 1.5 * sigma_rel;
    let radius = (3.0 * sigma_w).round().max(1.0) as isize;
    let (cx, cy) = (r.x.round() as isize, r.y.round() as isize);

    let mut hist = [0.0f64; 36];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let px = cx + dx;
            let py = cy + dy;
            if px < 1 || py < 1 || px >= w as isize - 1 || py >= h as isize - 1 {
                continue;
            }
            let gx = (level.get(px as usize + 1, py as usize) as f64
                - level.get(px as usize - 1, py as usize) as f64)
                / 2.0;
            let gy = (level.get(px as usize, py as usize + 1) as f64
                - level.get(px as usize, py as usize - 1) as f64)
                / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_w * sigma_w)).exp();
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 360.0;
            }
            let bin = ((deg / 10.0).floor() as usize) % 36;
            hist[bin] += weight * mag;
        }
    }

    let max = hist.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut kps = Vec::new();
    for b in 0..36 {
        let prev = hist[(b + 35) % 36];
        let next = hist[(b + 1) % 36];
        let v = hist[b];
        if v < 0.8 * max || v <= prev || v <= next {
            continue;
        }
        // parabolic peak interpolation between neighboring bins
        let denom = prev - 2.0 * v + next;
        let shift = if denom.abs() < 1e-12 { 0.0 } else { 0.5 * (prev - next) / denom };
        let mut deg = (b as f64 + 0.5 + shift) * 10.0;
        deg = deg.rem_euclid(360.0);
        kps.push(Keypoint {
            x: x_full,
            y: y_full,
            sigma: sigma_abs,
            orientation: deg,
            octave,
            response: r.response,
        });
    }
    kps
}

/// Cuts the square patch of side 2*round(eta*sigma)+1 around the keypoint,
/// sampling the original image on a grid rotated by -orientation so the
/// patch is orientation-normalized. Out-of-bounds samples read as white
/// (1.0). Returns None when the side falls below `min_side`.
pub fn extract_fragment(
    img: &GrayImage,
    kp: &Keypoint,
    eta: f64,
    min_side: usize,
) -> Option<Fragment> {
    let side = 2 * (eta * kp.sigma).round() as usize + 1;
    if side < min_side {
        return None;
    }
    let theta = kp.orientation.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let half = (side as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let u = c as f64 - half;
            let v = r as f64 - half;
            let sx = kp.x + cos_t * u + sin_t * v;
            let sy = kp.y - sin_t * u + cos_t * v;
            data.push(bilinear(img, sx as f32, sy as f32, 1.0));
        }
    }
    Some(Fragment { patch: GrayImage::new(side, side, data), side, source: *kp })
}
