//! Separable Gaussian filtering on scalar fields.
//!
//! Shared by the annotation density filter and by elastic-deformation field
//! smoothing. The kernel is truncated at 3 sigma and normalized to unit sum,
//! so filtering preserves the mean of a constant field exactly. Boundaries
//! reflect (sample -1 reads index 0, sample -2 reads index 1, ...).

use crate::error::{Error, Result};

/// Normalized 1-D Gaussian taps for offsets `-r..=r` with `r = floor(3 sigma)`.
pub fn gaussian_kernel(sigma_px: f64) -> Result<Vec<f64>> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "sigma out of range: {sigma_px}"
        )));
    }
    let r = (3.0 * sigma_px).floor() as usize;
    let mut k = Vec::with_capacity(2 * r + 1);
    for t in -(r as isize)..=(r as isize) {
        let x = t as f64;
        k.push((-x * x / (2.0 * sigma_px * sigma_px)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

#[inline]
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// In-place separable convolution of a single-channel `width x height` field
/// with the given 1-D kernel (applied along x, then along y).
pub fn blur_separable(values: &mut [f64], width: usize, height: usize, kernel: &[f64]) {
    assert_eq!(values.len(), width * height);
    assert_eq!(kernel.len() % 2, 1, "kernel must have odd length");
    let r = (kernel.len() / 2) as isize;

    let mut tmp = vec![0f64; values.len()];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        let out = &mut tmp[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0f64;
            for (j, &k) in kernel.iter().enumerate() {
                acc += k * row[reflect(x as isize + j as isize - r, width)];
            }
            out[x] = acc;
        }
    }
    for x in 0..width {
        for y in 0..height {
            let mut acc = 0f64;
            for (j, &k) in kernel.iter().enumerate() {
                acc += k * tmp[reflect(y as isize + j as isize - r, height) * width + x];
            }
            values[y * width + x] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Oracle: dense 2-D convolution with the outer product of the kernel,
    /// same reflective boundary rule.
    fn conv2d_oracle(v: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
        let r = (kernel.len() / 2) as isize;
        let mut out = vec![0f64; v.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0f64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let kx = kernel[(dx + r) as usize];
                        let ky = kernel[(dy + r) as usize];
                        acc += kx * ky * v[reflect(y + dy, h) * w + reflect(x + dx, w)];
                    }
                }
                out[(y as usize) * w + x as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(2.5).unwrap();
        assert_eq!(k.len(), 2 * 7 + 1);
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let k = gaussian_kernel(3.0).unwrap();
        let mut v = vec![0.42f64; 20 * 11];
        blur_separable(&mut v, 20, 11, &k);
        for x in &v {
            assert!((x - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_response_is_kernel_outer_product() {
        let k = gaussian_kernel(1.5).unwrap();
        let r = k.len() / 2;
        let (w, h) = (31, 31);
        let mut v = vec![0f64; w * h];
        v[15 * w + 15] = 1.0;
        blur_separable(&mut v, w, h, &k);
        for dy in 0..k.len() {
            for dx in 0..k.len() {
                let y = 15 + dy - r;
                let x = 15 + dx - r;
                assert!((v[y * w + x] - k[dy] * k[dx]).abs() < 1e-14);
            }
        }
        // Everything beyond the truncation radius is exactly zero.
        assert_eq!(v[15 * w + 15 - r - 1], 0.0);
    }

    #[test]
    fn separable_matches_dense_2d_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (32, 24);
        let v: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        for sigma in [0.8, 2.0, 4.5] {
            let k = gaussian_kernel(sigma).unwrap();
            let want = conv2d_oracle(&v, w, h, &k);
            let mut got = v.clone();
            blur_separable(&mut got, w, h, &k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "sigma {sigma}: {a} vs {b}");
            }
        }
    }
}
