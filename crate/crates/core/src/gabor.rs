//! Complex Gabor wavelet bank and dense magnitude responses.
//!
//! Kernel `(ν, μ)` is a plane wave of frequency `k_ν = k_max / spacing^ν`
//! along `φ_μ = π μ / num_orientations`, windowed by an isotropic Gaussian of
//! standard deviation `sigma / k_ν` pixels and scaled by `k_ν² / sigma²`.
//! Each kernel is DC-corrected on its sampled support, so a constant image
//! produces a zero response.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Error, PartialEq)]
pub enum GaborError {
    #[error("invalid Gabor parameters: {0}")]
    InvalidParams(String),
    #[error("filter bank is empty")]
    EmptyBank,
    #[error("plane has {len} samples, expected {width}x{height}")]
    PlaneSize {
        width: usize,
        height: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaborParams {
    pub num_frequencies: usize,
    pub num_orientations: usize,
    /// Peak frequency of scale 0, radians per pixel.
    pub k_max: f64,
    /// Ratio between adjacent scale frequencies.
    pub freq_spacing: f64,
    /// Envelope width in frequency-normalized units.
    pub sigma: f64,
    /// Half-width of the sampled kernel support.
    pub kernel_radius: usize,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            num_frequencies: 5,
            num_orientations: 8,
            k_max: PI / 2.0,
            freq_spacing: std::f64::consts::SQRT_2,
            sigma: 2.0 * PI,
            kernel_radius: 16,
        }
    }
}

impl GaborParams {
    pub fn bank_size(&self) -> usize {
        self.num_frequencies * self.num_orientations
    }

    pub fn validate(&self) -> Result<(), GaborError> {
        let fail = |msg: &str| Err(GaborError::InvalidParams(msg.to_string()));
        if self.num_frequencies == 0 || self.num_orientations == 0 {
            return fail("bank needs at least one frequency and one orientation");
        }
        if !(self.k_max > 0.0 && self.k_max.is_finite()) {
            return fail("k_max must be positive");
        }
        if !(self.freq_spacing > 1.0 && self.freq_spacing.is_finite()) {
            return fail("freq_spacing must exceed 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail("sigma must be positive");
        }
        if self.kernel_radius < 1 {
            return fail("kernel_radius must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaborKernel {
    pub scale_index: usize,
    pub orientation_index: usize,
    /// Center frequency, radians per pixel.
    pub frequency: f64,
    /// Wave-vector angle, radians.
    pub orientation: f64,
    radius: usize,
    /// Row-major `(2r+1)²` grid; tap `(u, v)` lives at `(v + r) * side + (u + r)`.
    taps: Vec<Complex64>,
}

impl GaborKernel {
    pub fn new(
        scale_index: usize,
        orientation_index: usize,
        frequency: f64,
        orientation: f64,
        sigma: f64,
        radius: usize,
    ) -> Self {
        let side = 2 * radius + 1;
        let r = radius as i64;
        let (kx, ky) = (frequency * orientation.cos(), frequency * orientation.sin());
        let k2 = frequency * frequency;
        let s2 = sigma * sigma;
        let mut envelope = Vec::with_capacity(side * side);
        let mut wave = Vec::with_capacity(side * side);
        for v in -r..=r {
            for u in -r..=r {
                let (uf, vf) = (u as f64, v as f64);
                envelope.push(k2 / s2 * (-k2 * (uf * uf + vf * vf) / (2.0 * s2)).exp());
                wave.push(Complex64::from_polar(1.0, kx * uf + ky * vf));
            }
        }
        // envelope-weighted mean of the harmonic; subtracting it zeroes the DC gain
        let env_sum: f64 = envelope.iter().sum();
        let weighted: Complex64 = envelope.iter().zip(&wave).map(|(g, w)| w * g).sum();
        let dc = weighted / env_sum;
        let taps = envelope
            .iter()
            .zip(&wave)
            .map(|(g, w)| (w - dc) * g)
            .collect();
        Self {
            scale_index,
            orientation_index,
            frequency,
            orientation,
            radius,
            taps,
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.taps
    }

    /// Tap at offset `(u, v)` from the kernel center.
    pub fn tap(&self, u: i64, v: i64) -> Complex64 {
        let r = self.radius as i64;
        self.taps[((v + r) as usize) * self.side() + (u + r) as usize]
    }
}

/// Kernels ordered scale-major: channel `ν * num_orientations + μ`.
pub fn build_bank(params: &GaborParams) -> Result<Vec<GaborKernel>, GaborError> {
    params.validate()?;
    let mut bank = Vec::with_capacity(params.bank_size());
    for nu in 0..params.num_frequencies {
        let k = params.k_max / params.freq_spacing.powi(nu as i32);
        for mu in 0..params.num_orientations {
            let phi = PI * mu as f64 / params.num_orientations as f64;
            bank.push(GaborKernel::new(
                nu,
                mu,
                k,
                phi,
                params.sigma,
                params.kernel_radius,
            ));
        }
    }
    Ok(bank)
}

/// Per-channel magnitude planes, one per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaborResponseField {
    width: usize,
    height: usize,
    channels: Vec<Vec<f64>>,
}

impl GaborResponseField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.channels[c][y * self.width + x]
    }

    /// Total number of response values (`width * height * channels`).
    pub fn len(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`).
#[inline]
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn check_plane(width: usize, height: usize, data: &[f64]) -> Result<(), GaborError> {
    if width == 0 || height == 0 || data.len() != width * height {
        return Err(GaborError::PlaneSize {
            width,
            height,
            len: data.len(),
        });
    }
    Ok(())
}

/// Reference spatial-domain convolution. `O(W·H·side²)` per channel.
pub fn convolve_direct(
    width: usize,
    height: usize,
    data: &[f64],
    bank: &[GaborKernel],
) -> Result<GaborResponseField, GaborError> {
    if bank.is_empty() {
        return Err(GaborError::EmptyBank);
    }
    check_plane(width, height, data)?;
    let channels = bank
        .par_iter()
        .map(|kernel| {
            let r = kernel.radius() as i64;
            let mut out = Vec::with_capacity(width * height);
            for y in 0..height as i64 {
                for x in 0..width as i64 {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for v in -r..=r {
                        let row = reflect(y - v, height) * width;
                        for u in -r..=r {
                            acc += kernel.tap(u, v) * data[row + reflect(x - u, width)];
                        }
                    }
                    out.push(acc.norm());
                }
            }
            out
        })
        .collect();
    Ok(GaborResponseField {
        width,
        height,
        channels,
    })
}

/// FFT convolution engine for a fixed bank and image size; kernel spectra
/// are computed once and reused across images.
pub struct FftConvolver {
    width: usize,
    height: usize,
    radius: usize,
    padded_w: usize,
    padded_h: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    spectra: Vec<Vec<Complex64>>,
}

impl FftConvolver {
    pub fn new(bank: &[GaborKernel], width: usize, height: usize) -> Result<Self, GaborError> {
        if bank.is_empty() {
            return Err(GaborError::EmptyBank);
        }
        if width == 0 || height == 0 {
            return Err(GaborError::PlaneSize {
                width,
                height,
                len: 0,
            });
        }
        let radius = bank.iter().map(GaborKernel::radius).max().unwrap_or(0);
        let padded_w = width + 2 * radius;
        let padded_h = height + 2 * radius;
        let mut planner = FftPlanner::new();
        let mut this = Self {
            width,
            height,
            radius,
            padded_w,
            padded_h,
            row_fwd: planner.plan_fft_forward(padded_w),
            row_inv: planner.plan_fft_inverse(padded_w),
            col_fwd: planner.plan_fft_forward(padded_h),
            col_inv: planner.plan_fft_inverse(padded_h),
            spectra: Vec::new(),
        };
        this.spectra = bank
            .par_iter()
            .map(|kernel| {
                let mut buf = vec![Complex64::new(0.0, 0.0); padded_w * padded_h];
                let r = kernel.radius() as i64;
                for v in -r..=r {
                    let py = v.rem_euclid(padded_h as i64) as usize;
                    for u in -r..=r {
                        let px = u.rem_euclid(padded_w as i64) as usize;
                        buf[py * padded_w + px] = kernel.tap(u, v);
                    }
                }
                this.fft2(&mut buf, false);
                buf
            })
            .collect();
        Ok(this)
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (w, h) = (self.padded_w, self.padded_h);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut transposed = vec![Complex64::new(0.0, 0.0); w * h];
        for y in 0..h {
            for x in 0..w {
                transposed[x * h + y] = buf[y * w + x];
            }
        }
        col.process(&mut transposed);
        for x in 0..w {
            for y in 0..h {
                buf[y * w + x] = transposed[x * h + y];
            }
        }
    }

    pub fn convolve_plane(&self, data: &[f64]) -> Result<GaborResponseField, GaborError> {
        check_plane(self.width, self.height, data)?;
        let (pw, ph, r) = (self.padded_w, self.padded_h, self.radius as i64);
        let mut padded = Vec::with_capacity(pw * ph);
        for py in 0..ph as i64 {
            let row = reflect(py - r, self.height) * self.width;
            for px in 0..pw as i64 {
                padded.push(Complex64::new(data[row + reflect(px - r, self.width)], 0.0));
            }
        }
        self.fft2(&mut padded, false);
        let scale = 1.0 / (pw * ph) as f64;
        let channels = self
            .spectra
            .par_iter()
            .map(|spectrum| {
                let mut prod: Vec<Complex64> =
                    padded.iter().zip(spectrum).map(|(a, b)| a * b).collect();
                self.fft2(&mut prod, true);
                let mut out = Vec::with_capacity(self.width * self.height);
                for y in 0..self.height {
                    let base = (y + self.radius) * pw + self.radius;
                    out.extend(
                        prod[base..base + self.width]
                            .iter()
                            .map(|c| c.norm() * scale),
                    );
                }
                out
            })
            .collect();
        Ok(GaborResponseField {
            width: self.width,
            height: self.height,
            channels,
        })
    }

    pub fn convolve(&self, img: &GrayImage) -> Result<GaborResponseField, GaborError> {
        self.convolve_plane(&img.to_f64())
    }
}

/// Magnitude responses of `img` to every kernel of `bank`, via FFT.
pub fn convolve(img: &GrayImage, bank: &[GaborKernel]) -> Result<GaborResponseField, GaborError> {
    FftConvolver::new(bank, img.width(), img.height())?.convolve(img)
}
