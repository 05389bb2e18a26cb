//! Differentiable 2D shape moments and descriptors of soft segmentation maps.
//!
//! Coordinates are 0-based pixel indices with `u` the row and `v` the column;
//! priors are expressed in the same convention. Descriptor denominators use
//! `max(mu00, eps_mass)` with `eps_mass = 1e-6 * |Omega|`: gradients stay
//! finite when a class vanishes from a slice, while any non-vanishing mass
//! divides exactly, keeping translation invariance and centroid equivariance
//! exact. Supported moment orders are p,q in {0,1,2} with p+q <= 2.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Relative mass floor added to descriptor denominators.
pub const EPS_MASS_REL: f64 = 1e-6;

/// Constant coordinate power grids for an H×W slice.
#[derive(Debug, Clone)]
pub struct CoordinateGrids {
    h: usize,
    w: usize,
    /// (p, q) -> flattened H×W grid of u^p * v^q.
    grids: Vec<((usize, usize), Vec<f64>)>,
}

const SUPPORTED_ORDERS: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2)];

impl CoordinateGrids {
    pub fn new(h: usize, w: usize) -> Self {
        let grids = SUPPORTED_ORDERS
            .iter()
            .map(|&(p, q)| {
                let mut g = Vec::with_capacity(h * w);
                for u in 0..h {
                    for v in 0..w {
                        g.push((u as f64).powi(p as i32) * (v as f64).powi(q as i32));
                    }
                }
                ((p, q), g)
            })
            .collect();
        CoordinateGrids { h, w, grids }
    }

    pub fn grid(&self, p: usize, q: usize) -> Result<&[f64]> {
        self.grids
            .iter()
            .find(|(pq, _)| *pq == (p, q))
            .map(|(_, g)| g.as_slice())
            .ok_or(Error::UnsupportedOrder { p, q })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// |Omega|: pixels per slice.
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn eps_mass(&self) -> f64 {
        EPS_MASS_REL * self.area() as f64
    }

    fn check_map(&self, op: &'static str, tape: &Tape, s: Var) -> Result<()> {
        if tape.shape(s) != [self.h, self.w] {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected [{}, {}] map, got {:?}", self.h, self.w, tape.shape(s)),
            });
        }
        Ok(())
    }
}

/// mu_{p,q}(s) = sum_i s(i) * u_i^p * v_i^q for an H×W soft map.
pub fn raw_moment(tape: &mut Tape, s: Var, grids: &CoordinateGrids, p: usize, q: usize) -> Result<Var> {
    grids.check_map("raw_moment", tape, s)?;
    let g = grids.grid(p, q)?.to_vec();
    let gc = tape.constant(vec![grids.h, grids.w], g)?;
    let prod = tape.mul(s, gc)?;
    Ok(tape.sum_all(prod))
}

/// Centroid (mu10/mu00, mu01/mu00) with the stabilized denominator.
pub fn centroid(tape: &mut Tape, s: Var, grids: &CoordinateGrids) -> Result<[Var; 2]> {
    grids.check_map("centroid", tape, s)?;
    let m00 = raw_moment(tape, s, grids, 0, 0)?;
    let m10 = raw_moment(tape, s, grids, 1, 0)?;
    let m01 = raw_moment(tape, s, grids, 0, 1)?;
    let denom = tape.clamp_min(m00, grids.eps_mass());
    let cu = tape.div(m10, denom)?;
    let cv = tape.div(m01, denom)?;
    Ok([cu, cv])
}

/// Central moment of order (p, q) about the (stabilized) centroid.
pub fn central_moment(tape: &mut Tape, s: Var, grids: &CoordinateGrids, p: usize, q: usize) -> Result<Var> {
    grids.check_map("central_moment", tape, s)?;
    if !SUPPORTED_ORDERS.contains(&(p, q)) {
        return Err(Error::UnsupportedOrder { p, q });
    }
    let [cu, cv] = centroid(tape, s, grids)?;
    let shape = vec![grids.h, grids.w];
    let mut term = s;
    if p > 0 {
        let u = tape.constant(shape.clone(), grids.grid(1, 0)?.to_vec())?;
        let cu_b = tape.expand(cu, shape.clone())?;
        let du = tape.sub(u, cu_b)?;
        for _ in 0..p {
            term = tape.mul(term, du)?;
        }
    }
    if q > 0 {
        let v = tape.constant(shape.clone(), grids.grid(0, 1)?.to_vec())?;
        let cv_b = tape.expand(cv, shape.clone())?;
        let dv = tape.sub(v, cv_b)?;
        for _ in 0..q {
            term = tape.mul(term, dv)?;
        }
    }
    Ok(tape.sum_all(term))
}

/// Per-class area fractions R(s) of one slice of a B×K×H×W softmax volume.
pub fn class_ratio(tape: &mut Tape, softmax: Var, slice: usize) -> Result<Vec<Var>> {
    let shape = tape.shape(softmax).to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "class_ratio",
            detail: format!("expected B×K×H×W softmax, got {:?}", shape),
        });
    }
    let k = shape[1];
    let mut ratios = Vec::with_capacity(k);
    for ch in 0..k {
        let map = tape.select_map(softmax, slice, ch)?;
        ratios.push(tape.mean_all(map));
    }
    Ok(ratios)
}

/// Distance-to-centroid D(s) = (sqrt(mu20c/mu00), sqrt(mu02c/mu00)),
/// the per-axis RMS spread about the centroid.
pub fn dist_to_centroid(tape: &mut Tape, s: Var, grids: &CoordinateGrids) -> Result<[Var; 2]> {
    grids.check_map("dist_to_centroid", tape, s)?;
    let m00 = raw_moment(tape, s, grids, 0, 0)?;
    let denom = tape.clamp_min(m00, grids.eps_mass());
    let c20 = central_moment(tape, s, grids, 2, 0)?;
    let c02 = central_moment(tape, s, grids, 0, 2)?;
    // Central second moments are sums of s * (coord - centroid)^2; tiny
    // negative rounding is clipped before the square root.
    let r20 = tape.div(c20, denom)?;
    let r02 = tape.div(c02, denom)?;
    let r20 = tape.clamp_min(r20, 0.0);
    let r02 = tape.clamp_min(r02, 0.0);
    Ok([tape.sqrt(r20), tape.sqrt(r02)])
}

/// Descriptor math on plain f64 maps (hard argmax masks); used for prior
/// estimation, where no gradients flow.
pub mod hard {
    use super::EPS_MASS_REL;

    pub fn raw_moment(map: &[f64], h: usize, w: usize, p: usize, q: usize) -> f64 {
        let mut acc = 0.0;
        for u in 0..h {
            for v in 0..w {
                acc += map[u * w + v] * (u as f64).powi(p as i32) * (v as f64).powi(q as i32);
            }
        }
        acc
    }

    pub fn class_ratio(map: &[f64], h: usize, w: usize) -> f64 {
        raw_moment(map, h, w, 0, 0) / (h * w) as f64
    }

    pub fn centroid(map: &[f64], h: usize, w: usize) -> [f64; 2] {
        let eps = EPS_MASS_REL * (h * w) as f64;
        let m00 = raw_moment(map, h, w, 0, 0).max(eps);
        [raw_moment(map, h, w, 1, 0) / m00, raw_moment(map, h, w, 0, 1) / m00]
    }

    pub fn dist_to_centroid(map: &[f64], h: usize, w: usize) -> [f64; 2] {
        let eps = EPS_MASS_REL * (h * w) as f64;
        let m00 = raw_moment(map, h, w, 0, 0).max(eps);
        let [cu, cv] = centroid(map, h, w);
        let mut c20 = 0.0;
        let mut c02 = 0.0;
        for u in 0..h {
            for v in 0..w {
                let s = map[u * w + v];
                c20 += s * (u as f64 - cu) * (u as f64 - cu);
                c02 += s * (v as f64 - cv) * (v as f64 - cv);
            }
        }
        [(c20 / m00).max(0.0).sqrt(), (c02 / m00).max(0.0).sqrt()]
    }
}
