//! Channel-axis Fourier transform and the Gaussian low-pass filter applied to
//! every patch feature before stability scoring.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform; other
//! lengths fall back to a direct O(D²) DFT, which is cheap at feature widths of
//! a few hundred channels.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{invalid, shape_err, Result};
use crate::exec::Execution;
use crate::lazystrike::FeatureMap;

/// Spectrum of a length-`D` signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum(Vec<Complex64>);

impl ComplexSpectrum {
    pub fn new(bins: Vec<Complex64>) -> Result<Self> {
        if bins.is_empty() {
            return Err(invalid("spectrum must have at least one bin"));
        }
        Ok(Self(bins))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.0
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.0
    }

    /// `[re0, im0, re1, im1, ...]`.
    pub fn to_interleaved(&self) -> Vec<f64> {
        self.0.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    /// Largest `|X[k] - conj(X[D-k])|`; zero for the spectrum of a real signal.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let d = self.0.len();
        (0..d)
            .map(|k| (self.0[k] - self.0[(d - k) % d].conj()).norm())
            .fold(0.0, f64::max)
    }
}

/// Twiddle table for one transform length and direction.
///
/// Entry `m` is `exp(±2πi·m/n)`, computed from the exact ratio `m/n`; both the
/// radix-2 and direct paths index into it, so no trigonometry runs per
/// butterfly or per product.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(n: usize, inverse: bool) -> Self {
        let sign = if inverse { 1.0 } else { -1.0 };
        let twiddles = (0..n)
            .map(|m| Complex64::from_polar(1.0, sign * 2.0 * PI * m as f64 / n as f64))
            .collect();
        Self { n, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalised transform of `buf`, whose length must equal the plan's.
    pub fn process(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length differs from plan length");
        if self.n <= 1 {
            return;
        }
        if self.n.is_power_of_two() {
            self.radix2(buf);
        } else {
            self.direct(buf);
        }
    }

    fn direct(&self, buf: &mut [Complex64]) {
        let n = self.n;
        let src = buf.to_vec();
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            // m tracks j·k mod n without a division per term.
            let mut m = 0;
            for &x in &src {
                acc += x * self.twiddles[m];
                m += k;
                if m >= n {
                    m -= n;
                }
            }
            *out = acc;
        }
    }

    fn radix2(&self, buf: &mut [Complex64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            // exp(±2πi·k/len) == twiddles[k·n/len]; power-of-two scaling is exact.
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

/// Forward and inverse plans for low-pass filtering rows of one width.
#[derive(Debug, Clone)]
struct FilterPlan {
    forward: FftPlan,
    inverse: FftPlan,
}

impl FilterPlan {
    fn new(n: usize) -> Self {
        Self { forward: FftPlan::new(n, false), inverse: FftPlan::new(n, true) }
    }

    /// `Re(IFFT(FFT(row) ⊙ g))` in place.
    fn apply(&self, row: &mut [f64], g: &[f64]) {
        let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.iter_mut().zip(g).for_each(|(c, &w)| *c *= w);
        self.inverse.process(&mut buf);
        let scale = 1.0 / buf.len() as f64;
        row.iter_mut().zip(&buf).for_each(|(r, c)| *r = (c * scale).re);
    }
}

/// Forward DFT, `X[k] = Σ_j x[j]·exp(−2πi·jk/D)`.
pub fn fft1d(x: &[f64]) -> Result<ComplexSpectrum> {
    if x.is_empty() {
        return Err(invalid("fft1d of an empty signal"));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlan::new(buf.len(), false).process(&mut buf);
    Ok(ComplexSpectrum(buf))
}

/// Inverse DFT with 1/D normalisation, before the real part is taken.
pub fn ifft1d_complex(spectrum: &ComplexSpectrum) -> Result<Vec<Complex64>> {
    if spectrum.is_empty() {
        return Err(invalid("ifft1d of an empty spectrum"));
    }
    let mut buf = spectrum.0.clone();
    FftPlan::new(buf.len(), true).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    Ok(buf)
}

/// Inverse DFT, keeping only the real part.
pub fn ifft1d(spectrum: &ComplexSpectrum) -> Result<Vec<f64>> {
    Ok(ifft1d_complex(spectrum)?.into_iter().map(|c| c.re).collect())
}

/// Circularly symmetric Gaussian frequency response centred on DC.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeights {
    sigma: f64,
    weights: Vec<f64>,
}

impl GaussianWeights {
    /// `w[k] = exp(−min(k, D−k)² / 2σ²)`, so `w[0] = 1`.
    pub fn new(dim: usize, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("gaussian weights need D >= 1"));
        }
        if !(sigma > 0.0) || sigma.is_nan() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        let weights = (0..dim)
            .map(|k| {
                let d = k.min(dim - k) as f64;
                if sigma.is_infinite() {
                    1.0
                } else {
                    (-d * d / (2.0 * sigma * sigma)).exp()
                }
            })
            .collect();
        Ok(Self { sigma, weights })
    }

    /// Default bandwidth `σ = D/8`.
    pub fn with_default_sigma(dim: usize) -> Result<Self> {
        Self::new(dim, default_sigma(dim))
    }

    /// All-pass response; filtering with it is the identity.
    pub fn flat(dim: usize) -> Result<Self> {
        Self::new(dim, f64::INFINITY)
    }

    /// Arbitrary response, used by tests and the squared-filter identity.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("weights must be non-empty and finite"));
        }
        Ok(Self { sigma: f64::NAN, weights })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn default_sigma(dim: usize) -> f64 {
    dim as f64 / 8.0
}

/// Convenience constructor mirroring [`GaussianWeights::new`].
pub fn gaussian_weights(dim: usize, sigma: f64) -> Result<GaussianWeights> {
    GaussianWeights::new(dim, sigma)
}

/// Low-pass one row: `Re(IFFT(FFT(row) ⊙ g))`.
pub fn filter_row(row: &[f64], g: &GaussianWeights) -> Result<Vec<f64>> {
    if row.len() != g.len() {
        return Err(shape_err(format!("row has {} channels, filter has {}", row.len(), g.len())));
    }
    let mut out = row.to_vec();
    FilterPlan::new(row.len()).apply(&mut out, &g.weights);
    Ok(out)
}

/// Filter every patch of `x` along its channel axis.
///
/// The operator is linear and, for a frequency-symmetric `g`, self-adjoint, so
/// its backward pass is the same filter applied to the incoming gradient.
pub fn low_pass_filter(x: &FeatureMap, g: &GaussianWeights) -> Result<FeatureMap> {
    low_pass_filter_with(x, g, Execution::default())
}

pub fn low_pass_filter_with(x: &FeatureMap, g: &GaussianWeights, exec: Execution) -> Result<FeatureMap> {
    let d = x.dim();
    if g.len() != d {
        return Err(shape_err(format!("feature dim {d} but filter length {}", g.len())));
    }
    let plan = FilterPlan::new(d);
    let mut out = x.values().to_vec();
    exec.for_each_chunk_mut(&mut out, d, |_, row| plan.apply(row, &g.weights));
    FeatureMap::new(x.grid_h(), x.grid_w(), d, out)
}
