//! Trilinear interpolation over a channel-last `[D, H, W, C]` grid.
//!
//! Query points are given in grid index coordinates `(x, y, z)` where `x`
//! runs along `W`, `y` along `H` and `z` along `D`. Integer coordinates land
//! exactly on stored vertices.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// What to do with a query outside `[0, n-1]` on some axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundsPolicy {
    #[default]
    Clamp,
    Error,
}

/// The eight corners touched by one query, their weights, and the weight
/// derivatives with respect to the query coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    /// Flat vertex indices into the `D*H*W` spatial layout.
    pub index: [usize; 8],
    pub weight: [f64; 8],
    /// `d weight / d (x, y, z)`; zero along clamped axes.
    pub dweight: [[f64; 3]; 8],
}

struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    live: f64,
}

fn axis(coord: f64, n: usize, policy: BoundsPolicy, label: char) -> Result<Axis> {
    if !coord.is_finite() {
        return Err(Error::numeric("trilinear query", format!("{label} = {coord}")));
    }
    let upper = (n - 1) as f64;
    let mut live = 1.0;
    let mut g = coord;
    if g < 0.0 || g > upper {
        if policy == BoundsPolicy::Error {
            return Err(Error::OutOfField(format!("{label} = {coord} outside [0, {upper}]")));
        }
        g = g.clamp(0.0, upper);
        live = 0.0;
    }
    if n == 1 {
        return Ok(Axis { lo: 0, hi: 0, frac: 0.0, live: 0.0 });
    }
    let lo = (g.floor() as usize).min(n - 2);
    Ok(Axis { lo, hi: lo + 1, frac: g - lo as f64, live })
}

/// Builds the interpolation stencil for `p` on a grid with spatial dims `[D, H, W]`.
pub fn stencil(p: [f64; 3], dims: [usize; 3], policy: BoundsPolicy) -> Result<Stencil> {
    let [d, h, w] = dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::contract("trilinear grid has an empty axis"));
    }
    let ax = axis(p[0], w, policy, 'x')?;
    let ay = axis(p[1], h, policy, 'y')?;
    let az = axis(p[2], d, policy, 'z')?;

    let mut out = Stencil { index: [0; 8], weight: [0.0; 8], dweight: [[0.0; 3]; 8] };
    for corner in 0..8 {
        let (bx, by, bz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let (ix, wx, dx) = pick(&ax, bx);
        let (iy, wy, dy) = pick(&ay, by);
        let (iz, wz, dz) = pick(&az, bz);
        out.index[corner] = (iz * h + iy) * w + ix;
        out.weight[corner] = wx * wy * wz;
        out.dweight[corner] = [dx * wy * wz, wx * dy * wz, wx * wy * dz];
    }
    Ok(out)
}

fn pick(a: &Axis, bit: usize) -> (usize, f64, f64) {
    if bit == 0 {
        (a.lo, 1.0 - a.frac, -a.live)
    } else {
        (a.hi, a.frac, a.live)
    }
}

/// Interpolates the feature vector of `grid` (shape `[D, H, W, C]`) at `p`.
pub fn trilinear_interpolate(p: [f64; 3], grid: &Tensor, policy: BoundsPolicy) -> Result<Vec<f64>> {
    let dims = grid_dims(grid)?;
    let c = grid.last_dim();
    let st = stencil(p, dims, policy)?;
    let mut out = vec![0.0; c];
    for k in 0..8 {
        let base = st.index[k] * c;
        let w = st.weight[k];
        for (o, v) in out.iter_mut().zip(&grid.data()[base..base + c]) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub(crate) fn grid_dims(grid: &Tensor) -> Result<[usize; 3]> {
    match grid.shape() {
        [d, h, w, _] => Ok([*d, *h, *w]),
        s => Err(Error::contract(format!("feature grid must be [D, H, W, C], got {s:?}"))),
    }
}
