//! 2D discrete Fourier transform: radix-2 FFT on power-of-two extents with a
//! naive O(N^2) fallback for everything else. Forward is unnormalized; the
//! inverse applies the full 1/(H*W) factor.

use num_complex::Complex64;
use std::f64::consts::PI;

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place iterative radix-2 FFT. `inverse` conjugates the twiddles but does
/// not normalize.
fn fft_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for i in 0..len / 2 {
                let u = buf[start + i];
                let v = buf[start + i + len / 2] * w;
                buf[start + i] = u + v;
                buf[start + i + len / 2] = u - v;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

fn dft_naive(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let input: Vec<Complex64> = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, x) in input.iter().enumerate() {
            let ang = sign * 2.0 * PI * (k * j % n) as f64 / n as f64;
            acc += x * Complex64::new(ang.cos(), ang.sin());
        }
        *out = acc;
    }
}

fn fft_1d(buf: &mut [Complex64], inverse: bool) {
    if is_pow2(buf.len()) {
        fft_radix2(buf, inverse);
    } else {
        dft_naive(buf, inverse);
    }
}

fn transform_2d(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    for row in data.chunks_mut(w) {
        fft_1d(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        fft_1d(&mut col, inverse);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Independent O((HW)^2) direct-sum 2D DFT, used only as a test oracle.
/// Shares no code with the fast path.
pub fn dft2_naive(channel: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    debug_assert_eq!(channel.len(), h * w);
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let angle = -2.0
                        * std::f64::consts::PI
                        * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    acc += channel[y * w + x] * Complex64::new(angle.cos(), angle.sin());
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

/// Forward unnormalized 2D DFT of a real H×W channel.
pub fn dft2(channel: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    debug_assert_eq!(channel.len(), h * w);
    let mut data: Vec<Complex64> = channel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut data, h, w, false);
    data
}

/// Inverse 2D DFT with 1/(H*W) normalization. Returns complex values; take
/// the real part for spectra derived from real inputs.
pub fn idft2(spectrum: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    debug_assert_eq!(spectrum.len(), h * w);
    let mut data = spectrum.to_vec();
    transform_2d(&mut data, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    for v in data.iter_mut() {
        *v *= norm;
    }
    data
}

/// Per-channel 2D spectrum of an image channel with amplitude/phase accessors.
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn forward(channel: &[f64], h: usize, w: usize) -> Self {
        Spectrum {
            h,
            w,
            bins: dft2(channel, h, w),
        }
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.arg()).collect()
    }

    /// Rebuild a complex spectrum from amplitude and phase and invert it.
    pub fn inverse_from(amplitude: &[f64], phase: &[f64], h: usize, w: usize) -> Vec<f64> {
        let bins: Vec<Complex64> = amplitude
            .iter()
            .zip(phase)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect();
        idft2(&bins, h, w).iter().map(|c| c.re).collect()
    }

    pub fn inverse(&self) -> Vec<f64> {
        idft2(&self.bins, self.h, self.w).iter().map(|c| c.re).collect()
    }
}
