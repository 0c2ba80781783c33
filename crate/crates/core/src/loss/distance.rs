//! Exact signed Euclidean distance to the opposite class.

use crate::prompt::BinaryMask;

const FAR: f64 = 1e20;

/// Signed distance per pixel: positive distance to the nearest foreground
/// pixel on background, negative distance to the nearest background pixel on
/// foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub width: usize,
    pub height: usize,
    pub phi: Vec<f64>,
    /// Set when the mask has no foreground or no background; `phi` is then zero.
    pub degenerate: bool,
}

/// Squared distance lower envelope of parabolas rooted at `f`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    for q in 1..n {
        let mut s = ((f[q] + sq(q)) - (f[v[k]] + sq(v[k]))) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = ((f[q] + sq(q)) - (f[v[k]] + sq(v[k]))) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest pixel where `seed` holds.
pub fn squared_edt(width: usize, height: usize, seed: impl Fn(usize) -> bool) -> Vec<f64> {
    let n = width.max(height);
    let mut grid: Vec<f64> = (0..width * height).map(|i| if seed(i) { 0.0 } else { FAR }).collect();
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for row in grid.chunks_mut(width) {
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

pub fn signed_distance(gt: &BinaryMask) -> DistanceMap {
    let (w, h) = (gt.width(), gt.height());
    let fg = gt.count();
    if fg == 0 || fg == w * h {
        log::warn!("signed distance undefined for a mask without both classes; using zeros");
        return DistanceMap { width: w, height: h, phi: vec![0.0; w * h], degenerate: true };
    }
    let bits = gt.bits();
    let to_fg = squared_edt(w, h, |i| bits[i]);
    let to_bg = squared_edt(w, h, |i| !bits[i]);
    let phi = bits
        .iter()
        .zip(to_fg.iter().zip(&to_bg))
        .map(|(&b, (&df, &db))| if b { -db.sqrt() } else { df.sqrt() })
        .collect();
    DistanceMap { width: w, height: h, phi, degenerate: false }
}
