//! Fixed-length gradient-histogram descriptor for variable-size 2-D feature
//! maps. The map is tiled into an m x n cell grid whose cell sizes adapt to
//! the map via ceiling division, each cell votes gradient magnitudes into k
//! full-circle orientation bins, cells are grouped into blocks, and the
//! concatenated vector gets one global L2 normalization.
//!
//! Histogram accumulation runs in f64 regardless of map precision so the
//! positive-scale invariance of the final descriptor holds to tight
//! tolerances.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, thiserror::Error)]
pub enum HogError {
    #[error("map {h}x{w} too small for {m}x{n} cell grid")]
    MapTooSmall { h: usize, w: usize, m: usize, n: usize },
    #[error("invalid HOG parameters: {0}")]
    InvalidParams(String),
}

/// Cell-grid and block layout. `m*n == t*b` always holds: every cell belongs
/// to exactly one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HogParams {
    /// cell grid rows
    pub m: usize,
    /// cell grid columns
    pub n: usize,
    /// cells per block
    pub t: usize,
    /// number of blocks
    pub b: usize,
    /// orientation bins
    pub k: usize,
}

impl HogParams {
    /// Quadrant layout: the cell grid splits into four equal blocks
    /// (top-left, top-right, bottom-left, bottom-right). Requires even m, n.
    pub fn quadrants(m: usize, n: usize, k: usize) -> Result<Self, HogError> {
        if m == 0 || n == 0 || m % 2 != 0 || n % 2 != 0 {
            return Err(HogError::InvalidParams(format!(
                "quadrant layout needs even grid, got {m}x{n}"
            )));
        }
        if k < 2 {
            return Err(HogError::InvalidParams(format!("k = {k} < 2")));
        }
        Ok(HogParams { m, n, t: (m / 2) * (n / 2), b: 4, k })
    }

    /// Single-block layout: all cells concatenate into one block.
    pub fn single_block(m: usize, n: usize, k: usize) -> Result<Self, HogError> {
        if m == 0 || n == 0 {
            return Err(HogError::InvalidParams("empty grid".into()));
        }
        if k < 2 {
            return Err(HogError::InvalidParams(format!("k = {k} < 2")));
        }
        Ok(HogParams { m, n, t: m * n, b: 1, k })
    }

    /// Descriptor length k*t*b; independent of the map size.
    pub fn len(&self) -> usize {
        self.k * self.t * self.b
    }

    /// Orientation bin width in degrees.
    pub fn phi(&self) -> f64 {
        (360.0_f64 / self.k as f64).ceil()
    }

    /// Block index of cell (i, j). Quadrant layout when b == 4, single block
    /// when b == 1.
    fn block_of(&self, i: usize, j: usize) -> usize {
        if self.b == 1 {
            0
        } else {
            let lower = (i >= self.m / 2) as usize;
            let right = (j >= self.n / 2) as usize;
            lower * 2 + right
        }
    }
}

/// One cell's pixel rectangle; rows [y0, y1), cols [x0, x1). Trailing cells
/// clip at the map border and can be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Cell sizes by ceiling division and the row-major cell rectangles.
pub fn cell_geometry(
    h: usize,
    w: usize,
    p: &HogParams,
) -> Result<(usize, usize, Vec<CellRect>), HogError> {
    if h < p.m || w < p.n {
        return Err(HogError::MapTooSmall { h, w, m: p.m, n: p.n });
    }
    let r_cell = h.div_ceil(p.m);
    let c_cell = w.div_ceil(p.n);
    let mut cells = Vec::with_capacity(p.m * p.n);
    for i in 0..p.m {
        for j in 0..p.n {
            cells.push(CellRect {
                y0: (i * r_cell).min(h),
                y1: ((i + 1) * r_cell).min(h),
                x0: (j * c_cell).min(w),
                x1: ((j + 1) * c_cell).min(w),
            });
        }
    }
    Ok((r_cell, c_cell, cells))
}

/// Per-pixel gradient magnitude and orientation in degrees [0, 360).
/// Central differences [-1, 0, 1]/2 with replicated borders.
pub fn gradients_f64(map: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = map.dim();
    let mut mag = Array2::zeros((h, w));
    let mut orient = Array2::zeros((h, w));
    let at = |y: isize, x: isize| -> f64 {
        let yc = y.clamp(0, h as isize - 1) as usize;
        let xc = x.clamp(0, w as isize - 1) as usize;
        map[(yc, xc)]
    };
    for y in 0..h {
        for x in 0..w {
            let gx = (at(y as isize, x as isize + 1) - at(y as isize, x as isize - 1)) / 2.0;
            let gy = (at(y as isize + 1, x as isize) - at(y as isize - 1, x as isize)) / 2.0;
            mag[(y, x)] = (gx * gx + gy * gy).sqrt();
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 360.0;
            }
            if deg >= 360.0 {
                deg = 0.0;
            }
            orient[(y, x)] = deg;
        }
    }
    (mag, orient)
}

/// [`gradients_f64`] for single-precision maps.
pub fn gradients(map: ArrayView2<'_, f32>) -> (Array2<f64>, Array2<f64>) {
    gradients_f64(map.mapv(|v| v as f64).view())
}

/// Full descriptor: per-cell k-bin histograms with plain magnitude votes
/// (bin l = ceil(orientation/phi), orientation 0 goes to bin 1, no
/// interpolation), concatenated block by block, then one global L2
/// normalization. A gradient-free map yields the zero vector. Accumulation
/// runs in f64 end to end.
pub fn descriptor_f64(
    map: ArrayView2<'_, f64>,
    p: &HogParams,
    layer: usize,
) -> Result<HogVector, HogError> {
    let (h, w) = map.dim();
    let (r_cell, c_cell, _) = cell_geometry(h, w, p)?;
    let (mag, orient) = gradients_f64(map);
    let phi = p.phi();

    let mut out = vec![0.0f64; p.len()];
    for y in 0..h {
        for x in 0..w {
            let m = mag[(y, x)];
            if m == 0.0 {
                continue;
            }
            let cell_i = (y / r_cell).min(p.m - 1);
            let cell_j = (x / c_cell).min(p.n - 1);
            let block = p.block_of(cell_i, cell_j);
            let slot = cell_slot_in_block(p, cell_i, cell_j);
            let deg = orient[(y, x)];
            let bin = if deg == 0.0 { 1 } else { (deg / phi).ceil() as usize };
            let bin = bin.clamp(1, p.k);
            out[(block * p.t + slot) * p.k + (bin - 1)] += m;
        }
    }

    let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    }
    Ok(HogVector { values: out, params: p.clone(), layer })
}

/// [`descriptor_f64`] for single-precision maps.
pub fn descriptor(
    map: ArrayView2<'_, f32>,
    p: &HogParams,
    layer: usize,
) -> Result<HogVector, HogError> {
    descriptor_f64(map.mapv(|v| v as f64).view(), p, layer)
}

/// Position of cell (i, j) inside its block, scanning the block's cells in
/// row-major order of the global grid.
fn cell_slot_in_block(p: &HogParams, i: usize, j: usize) -> usize {
    if p.b == 1 {
        i * p.n + j
    } else {
        let half_m = p.m / 2;
        let half_n = p.n / 2;
        (i % half_m) * half_n + (j % half_n)
    }
}

/// Descriptor plus the metadata downstream stages key on.
#[derive(Debug, Clone, PartialEq)]
pub struct HogVector {
    pub values: Vec<f64>,
    pub params: HogParams,
    pub layer: usize,
}

impl HogVector {
    pub fn new(values: Vec<f64>, params: HogParams, layer: usize) -> Self {
        debug_assert_eq!(values.len(), params.len());
        HogVector { values, params, layer }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn params44() -> HogParams {
        HogParams::quadrants(4, 4, 10).unwrap()
    }

    #[test]
    fn geometry_matches_ceil_rule() {
        let p = params44();
        let (r, c, cells) = cell_geometry(18, 18, &p).unwrap();
        assert_eq!((r, c), (5, 5));
        // last row/col cells clip to 3 pixels
        let last = cells[15];
        assert_eq!(last.y1 - last.y0, 3);
        assert_eq!(last.x1 - last.x0, 3);

        let (r, c, _) = cell_geometry(16, 16, &p).unwrap();
        assert_eq!((r, c), (4, 4));
        let (r, c, _) = cell_geometry(4, 4, &p).unwrap();
        assert_eq!((r, c), (1, 1));
        assert!(matches!(
            cell_geometry(3, 8, &p),
            Err(HogError::MapTooSmall { .. })
        ));
    }

    #[test]
    fn ramp_gradients_are_analytic() {
        let map = Array2::from_shape_fn((6, 6), |(_, x)| x as f32);
        let (mag, orient) = gradients(map.view());
        // interior of f(x,y)=x: |g|=1 pointing at 0 degrees
        assert!((mag[(3, 3)] - 1.0).abs() < 1e-12);
        assert_eq!(orient[(3, 3)], 0.0);

        let map_y = Array2::from_shape_fn((6, 6), |(y, _)| y as f32);
        let (_, orient_y) = gradients(map_y.view());
        assert!((orient_y[(3, 3)] - 90.0).abs() < 1e-12);

        let flat = Array2::zeros((5, 5));
        let (mag_f, _) = gradients(flat.view());
        assert!(mag_f.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn binning_rule_and_length() {
        let p = params44();
        assert_eq!(p.len(), 160);
        assert_eq!(p.phi(), 36.0);
        // orientation 90 -> ceil(90/36) = 3
        assert_eq!((90.0f64 / p.phi()).ceil() as usize, 3);

        let constant = Array2::from_elem((8, 8), 0.7f32);
        let d = descriptor(constant.view(), &p, 1).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
        assert_eq!(d.values.len(), p.len());
    }

    #[test]
    fn conv3_layout_has_four_single_cell_blocks() {
        let p = HogParams::quadrants(2, 2, 10).unwrap();
        assert_eq!((p.t, p.b), (1, 4));
        assert_eq!(p.len(), 40);
        assert_eq!(p.m * p.n, p.t * p.b);
    }
}
