//! Reference implementations the integration suites check the library
//! against. Each one is written straight from the textbook definition and
//! shares no code with the kernels it cross-checks; clarity beats speed.

use ndarray::{Array2, Array4, ArrayView1};

use scriptid_core::convnet::{batch_loss, Net};
use scriptid_core::imaging::GrayImage;

/// Central-difference gradients for every parameter group of `net`, in the
/// order `params_mut` reports them. O(P) forward passes; keep the net tiny.
pub fn finite_diff_grads(
    net: &mut Net<f64>,
    x: &Array4<f64>,
    targets: &[usize],
    eps: f64,
) -> Vec<(String, Vec<f64>)> {
    let shapes: Vec<(String, usize)> = net
        .params_mut()
        .into_iter()
        .map(|(name, s)| (name, s.len()))
        .collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (g, (name, len)) in shapes.iter().enumerate() {
        let mut grad = vec![0.0; *len];
        for (i, gi) in grad.iter_mut().enumerate() {
            let orig = {
                let mut ps = net.params_mut();
                let v = ps[g].1[i];
                ps[g].1[i] = v + eps;
                v
            };
            let up = batch_loss(net, x, targets);
            net.params_mut()[g].1[i] = orig - eps;
            let down = batch_loss(net, x, targets);
            net.params_mut()[g].1[i] = orig;
            *gi = (up - down) / (2.0 * eps);
        }
        out.push((name.clone(), grad));
    }
    out
}

/// Worst elementwise relative error between two gradient vectors, with a
/// floor on the denominator so jointly tiny entries cannot blow it up.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with eigenvectors as the matching
/// columns of the second result.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let frob2: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off2: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum();
        if off2 <= 1e-28 * frob2.max(1.0) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // m <- J^T m J and v <- v J with J the (p,q) rotation
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vecs.column_mut(dst).assign(&v.column(src));
    }
    (vals, vecs)
}

/// Soft-margin RBF-SVM dual solved by projected gradient ascent, projecting
/// onto the box-and-hyperplane feasible set each step. Slow and simple; the
/// dual optimum is unique for distinct points, so decision values are
/// comparable across solvers.
pub struct QpSvm {
    pub alpha: Vec<f64>,
    pub b: f64,
    x: Array2<f64>,
    y: Vec<f64>,
    gamma: f64,
}

fn rbf(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let d2: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

/// Euclidean projection of `z` onto {0 <= a <= c, y.a = 0} by bisection on
/// the multiplier of the equality constraint; y.clamp(z - nu*y) is monotone
/// nonincreasing in nu.
fn project(z: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let bound = z.iter().fold(0.0f64, |m, v| m.max(v.abs())) + c + 1.0;
    let residual = |nu: f64| -> f64 {
        z.iter()
            .zip(y)
            .map(|(&zi, &yi)| yi * (zi - nu * yi).clamp(0.0, c))
            .sum()
    };
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    z.iter().zip(y).map(|(&zi, &yi)| (zi - nu * yi).clamp(0.0, c)).collect()
}

pub fn solve_qp_svm(x: &Array2<f64>, y: &[f64], c: f64, gamma: f64) -> QpSvm {
    let n = x.nrows();
    assert_eq!(n, y.len());
    let mut q = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            q[[i, j]] = y[i] * y[j] * rbf(x.row(i), x.row(j), gamma);
        }
    }
    // step 1/L with L bounded by the max absolute row sum of Q
    let l = (0..n)
        .map(|i| q.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(1.0f64, f64::max);
    let step = 1.0 / l;
    let mut alpha = vec![0.0f64; n];
    for _ in 0..200_000 {
        let qa = q.dot(&ndarray::ArrayView1::from(&alpha[..]));
        let z: Vec<f64> = alpha
            .iter()
            .enumerate()
            .map(|(i, &a)| a + step * (1.0 - qa[i]))
            .collect();
        let next = project(&z, y, c);
        let delta = alpha
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        alpha = next;
        if delta < 1e-13 {
            break;
        }
    }
    // raw margins without the offset, then b from the KKT conditions
    let margin: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| alpha[j] * y[j] * rbf(x.row(j), x.row(i), gamma))
                .sum()
        })
        .collect();
    let tau = 1e-6 * c;
    let free: Vec<usize> = (0..n)
        .filter(|&i| alpha[i] > tau && alpha[i] < c - tau)
        .collect();
    let b = if free.is_empty() {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..n {
            // alpha=0 wants y(margin+b) >= 1, alpha=C wants <= 1
            let edge = y[i] - margin[i];
            let at_lower = alpha[i] <= tau;
            if (y[i] > 0.0) == at_lower {
                lo = lo.max(edge);
            } else {
                hi = hi.min(edge);
            }
        }
        0.5 * (lo + hi)
    } else {
        free.iter().map(|&i| y[i] - margin[i]).sum::<f64>() / free.len() as f64
    };
    QpSvm { alpha, b, x: x.clone(), y: y.to_vec(), gamma }
}

impl QpSvm {
    pub fn decision(&self, q: ArrayView1<'_, f64>) -> f64 {
        let n = self.x.nrows();
        (0..n)
            .map(|i| self.alpha[i] * self.y[i] * rbf(self.x.row(i), q, self.gamma))
            .sum::<f64>()
            + self.b
    }
}

/// Slant of dark-on-white handwriting from second-order ink moments,
/// degrees, positive when strokes lean rightward at the top. A sheared
/// vertical stroke x' = x + tan(s)*(H-1-y) has mu11 = -tan(s)*mu02 exactly.
pub fn slant_degrees(img: &GrayImage) -> f64 {
    let (mut mass, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
    for yy in 0..img.height {
        for xx in 0..img.width {
            let w = (1.0 - img.get(xx, yy)) as f64;
            mass += w;
            mx += w * xx as f64;
            my += w * yy as f64;
        }
    }
    assert!(mass > 0.0, "blank image has no slant");
    let (cx, cy) = (mx / mass, my / mass);
    let (mut mu11, mut mu02) = (0.0f64, 0.0f64);
    for yy in 0..img.height {
        for xx in 0..img.width {
            let w = (1.0 - img.get(xx, yy)) as f64;
            mu11 += w * (xx as f64 - cx) * (yy as f64 - cy);
            mu02 += w * (yy as f64 - cy) * (yy as f64 - cy);
        }
    }
    (-mu11 / mu02).atan().to_degrees()
}
