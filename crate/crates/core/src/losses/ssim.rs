//! Windowed SSIM with a hand-written adjoint.
//!
//! 3x3 uniform window, reflective padding (the border pixel is not
//! repeated), stabilizers `C1 = 0.01^2` and `C2 = 0.03^2`, computed per
//! channel.

use crate::error::Result;
use crate::imaging::{Grid, Image, Rgb};

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

const WINDOW: f64 = 9.0;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// 3x3 box sum with reflective borders, applied to a row-major plane.
/// `scratch` must have the plane's length.
fn box3(src: &[f64], width: usize, height: usize, scratch: &mut [f64], out: &mut [f64]) {
    debug_assert!(width >= 2 && height >= 2);
    for (row, dst) in src.chunks_exact(width).zip(scratch.chunks_exact_mut(width)) {
        dst[0] = row[0] + 2.0 * row[1];
        for x in 1..width - 1 {
            dst[x] = row[x - 1] + row[x] + row[x + 1];
        }
        dst[width - 1] = row[width - 1] + 2.0 * row[width - 2];
    }
    for y in 0..height {
        let up = reflect(y as isize - 1, height) * width;
        let down = reflect(y as isize + 1, height) * width;
        let (a, b, c) = (
            &scratch[up..up + width],
            &scratch[y * width..(y + 1) * width],
            &scratch[down..down + width],
        );
        for (((o, a), b), c) in out[y * width..(y + 1) * width]
            .iter_mut()
            .zip(a)
            .zip(b)
            .zip(c)
        {
            *o = a + b + c;
        }
    }
}

/// Transpose of [`box3`]: scatters every entry back onto its window.
fn box3_transpose(src: &[f64], width: usize, height: usize, scratch: &mut [f64], out: &mut [f64]) {
    debug_assert!(width >= 2 && height >= 2);
    // vertical: column sums are symmetric except that a reflected border
    // row receives its neighbour twice
    for y in 0..height {
        let dst = &mut scratch[y * width..(y + 1) * width];
        let mid = &src[y * width..(y + 1) * width];
        dst.copy_from_slice(mid);
        let neighbours: [Option<usize>; 2] = [
            if y > 0 { Some(y - 1) } else { None },
            if y + 1 < height { Some(y + 1) } else { None },
        ];
        for n in neighbours.into_iter().flatten() {
            let weight = if n == 0 || n == height - 1 { 2.0 } else { 1.0 };
            for (d, v) in dst.iter_mut().zip(&src[n * width..(n + 1) * width]) {
                *d += weight * v;
            }
        }
    }
    for (row, dst) in scratch.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        for x in 0..width {
            let left = if x == 0 {
                0.0
            } else if x - 1 == 0 {
                2.0 * row[0]
            } else {
                row[x - 1]
            };
            let right = if x + 1 == width {
                0.0
            } else if x + 1 == width - 1 {
                2.0 * row[width - 1]
            } else {
                row[x + 1]
            };
            dst[x] = left + row[x] + right;
        }
    }
}

/// SSIM value and its partials with respect to the window moments
/// `(mu_a, mu_b, E[a^2], E[b^2], E[ab])`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SsimPixel {
    pub value: f64,
    pub partials: [f64; 5],
}

fn ssim_from_moments(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> SsimPixel {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    let n1 = 2.0 * mu_a * mu_b + C1;
    let n2 = 2.0 * cov + C2;
    let d1 = mu_a * mu_a + mu_b * mu_b + C1;
    let d2 = var_a + var_b + C2;
    let s = n1 * n2 / (d1 * d2);
    // d log S = dn1/n1 + dn2/n2 - dd1/d1 - dd2/d2
    let d_mu_a = s * (2.0 * mu_b / n1 - 2.0 * mu_b / n2 - 2.0 * mu_a / d1 + 2.0 * mu_a / d2);
    let d_mu_b = s * (2.0 * mu_a / n1 - 2.0 * mu_a / n2 - 2.0 * mu_b / d1 + 2.0 * mu_b / d2);
    let d_eaa = -s / d2;
    let d_ebb = -s / d2;
    let d_eab = 2.0 * s / n2;
    SsimPixel {
        value: s,
        partials: [d_mu_a, d_mu_b, d_eaa, d_ebb, d_eab],
    }
}

/// Per-pixel, per-channel SSIM of two equally sized images.
pub(crate) fn ssim_channels(a: &Image, b: &Image) -> Vec<[SsimPixel; 3]> {
    let (w, h) = a.dims();
    let n = w * h;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![[SsimPixel::default(); 3]; n];
    let mut planes = vec![vec![0.0; n]; 5];
    let mut sums = vec![vec![0.0; n]; 5];
    let mut scratch = vec![0.0; n];
    for c in 0..3 {
        for i in 0..n {
            let (va, vb) = (ad[i][c], bd[i][c]);
            planes[0][i] = va;
            planes[1][i] = vb;
            planes[2][i] = va * va;
            planes[3][i] = vb * vb;
            planes[4][i] = va * vb;
        }
        for k in 0..5 {
            box3(&planes[k], w, h, &mut scratch, &mut sums[k]);
        }
        for i in 0..n {
            out[i][c] = ssim_from_moments(
                sums[0][i] / WINDOW,
                sums[1][i] / WINDOW,
                sums[2][i] / WINDOW,
                sums[3][i] / WINDOW,
                sums[4][i] / WINDOW,
            );
        }
    }
    out
}

/// Pulls `dL/dSSIM` (per pixel and channel) back to the two input images,
/// accumulating into `grad_a` / `grad_b` when given.
pub(crate) fn ssim_backward(
    a: &Image,
    b: &Image,
    ssim: &[[SsimPixel; 3]],
    upstream: &[Rgb],
    mut grad_a: Option<&mut [Rgb]>,
    mut grad_b: Option<&mut [Rgb]>,
) {
    let (w, h) = a.dims();
    let n = w * h;
    let (ad, bd) = (a.data(), b.data());
    // per-pixel coefficients of d(mu_a), d(mu_b), d(E[a^2]), d(E[b^2]),
    // d(E[ab]), gathered back over each window by the transposed box
    let mut coeff = vec![vec![0.0; n]; 5];
    let mut spread = vec![vec![0.0; n]; 5];
    let mut scratch = vec![0.0; n];
    for c in 0..3 {
        for i in 0..n {
            let k = upstream[i][c] / WINDOW;
            let partials = &ssim[i][c].partials;
            for m in 0..5 {
                coeff[m][i] = k * partials[m];
            }
        }
        for m in 0..5 {
            box3_transpose(&coeff[m], w, h, &mut scratch, &mut spread[m]);
        }
        if let Some(ga) = grad_a.as_deref_mut() {
            for i in 0..n {
                ga[i][c] += spread[0][i] + 2.0 * ad[i][c] * spread[2][i] + bd[i][c] * spread[4][i];
            }
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            for i in 0..n {
                gb[i][c] += spread[1][i] + 2.0 * bd[i][c] * spread[3][i] + ad[i][c] * spread[4][i];
            }
        }
    }
}

/// Channel-averaged SSIM per pixel, in `[-1, 1]`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Grid<f64>> {
    b.ensure_dims(a.dims())?;
    let per_channel = ssim_channels(a, b);
    let data = per_channel
        .iter()
        .map(|px| (px[0].value + px[1].value + px[2].value) / 3.0)
        .collect();
    Grid::from_vec(a.width(), a.height(), data)
}
