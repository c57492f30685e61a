//! The LMA input-wave dictionary: probe, localized trigonometric polynomials
//! (tensor and radial), Gaussians and pixel deltas, plus the change-of-basis
//! matrices between elementary waves and translated trigonometric
//! polynomials.
//!
//! Every wave is synthesized at the grid origin and placed by periodic
//! translation, which guarantees the exact translation structure the
//! coefficient-reuse logic requires. Trigonometric arguments are scaled as
//! `t = 2 pi x / l`, so one period spans the simulation window and the
//! discrete frequencies of the polynomial land exactly on grid Fourier
//! pixels.

use num_complex::Complex64;

use crate::grid::{wrapped_offset, ComplexField, GridGeometry};
use crate::optics::{build_probe, MicroscopeParams};
use crate::{Error, Result};

/// Which localized generator the dictionary is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputWaveKind {
    /// The STEM probe itself.
    Probe,
    /// Tensor product of localized trigonometric polynomials of degree `n`.
    TrigTensor { n: usize },
    /// Radially evaluated trigonometric polynomial of degree `n`.
    TrigRadial { n: usize },
    /// Gaussian of width `sigma` (Å); distinct from the interaction constant.
    Gaussian { sigma: f64 },
    /// A single-pixel delta. Retained for completeness; impractical as a
    /// dictionary because every pixel needs its own propagation.
    PixelDelta,
}

impl InputWaveKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            InputWaveKind::TrigTensor { n } | InputWaveKind::TrigRadial { n } if *n < 1 => Err(
                Error::InvalidParam(format!("trigonometric degree must be >= 1, got {n}")),
            ),
            InputWaveKind::Gaussian { sigma } if !(*sigma > 0.0) => Err(Error::InvalidParam(
                format!("gaussian width must be > 0, got {sigma}"),
            )),
            _ => Ok(()),
        }
    }
}

/// The localized trigonometric polynomial
/// `phi_n(t) = sum_{k=-n}^{n} e^{ikt} cos(k pi / (2n + 2))`.
pub fn trig_poly_phi(n: usize, t: f64) -> Complex64 {
    let denom = (2 * n + 2) as f64;
    let mut acc = Complex64::ZERO;
    for k in -(n as i64)..=(n as i64) {
        let weight = (k as f64 * std::f64::consts::PI / denom).cos();
        acc += weight * Complex64::new(0.0, k as f64 * t).exp();
    }
    acc
}

/// Change-of-basis matrices between the elementary waves `e^{ikt}` and the
/// translations `phi_n(t - 2 pi j / (2n + 1))`, both indexed by
/// `k, j = -n..n`. `m` is `W diag(cos(k pi / (2n+2)))` with
/// `W_{k,j} = exp(-2 pi i j k / (2n + 1))`; row `j` of `m` holds the
/// elementary-wave coefficients of translation `j`.
#[derive(Debug, Clone)]
pub struct ModulationMatrices {
    pub n: usize,
    /// Matrix dimension `2n + 1`.
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub m: Vec<Complex64>,
    /// Row-major `dim x dim` inverse.
    pub m_inv: Vec<Complex64>,
}

/// Build `M` and its closed-form inverse `(2n+1)^{-1} diag(1/cos) W*` and
/// verify `M M^{-1} = I`.
pub fn modulation_matrices(n: usize) -> ModulationMatrices {
    let dim = 2 * n + 1;
    let denom = (2 * n + 2) as f64;
    let w = |k: i64, j: i64| -> Complex64 {
        Complex64::new(
            0.0,
            -2.0 * std::f64::consts::PI * (j * k) as f64 / dim as f64,
        )
        .exp()
    };
    let cosine = |k: i64| (k as f64 * std::f64::consts::PI / denom).cos();

    let mut m = vec![Complex64::ZERO; dim * dim];
    let mut m_inv = vec![Complex64::ZERO; dim * dim];
    for (row, k) in (-(n as i64)..=(n as i64)).enumerate() {
        for (col, j) in (-(n as i64)..=(n as i64)).enumerate() {
            // M = W D: column j of W scaled by cos(j pi / (2n+2)).
            m[row * dim + col] = w(k, j) * cosine(j);
            // M^{-1} = (2n+1)^{-1} D^{-1} W^*: row k scaled by 1/cos(k ...).
            m_inv[row * dim + col] = w(k, j).conj() / cosine(k) / dim as f64;
        }
    }

    let out = ModulationMatrices { n, dim, m, m_inv };
    debug_assert!(out.identity_deviation() < 1e-10);
    out
}

impl ModulationMatrices {
    /// Largest entry deviation of `M M^{-1}` from the identity.
    pub fn identity_deviation(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for r in 0..d {
            for c in 0..d {
                let mut acc = Complex64::ZERO;
                for t in 0..d {
                    acc += self.m[r * d + t] * self.m_inv[t * d + c];
                }
                let expect = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((acc - expect).norm());
            }
        }
        worst
    }
}

/// Degree for a trigonometric input wave matching the probe's frequency
/// range: `n = round(alpha_max / (lambda q))`, at least 1.
pub fn trig_degree_from_probe(params: &MicroscopeParams, q: f64) -> Result<usize> {
    if !(q > 0.0) {
        return Err(Error::InvalidParam(format!(
            "Fourier pixel size must be > 0, got {q}"
        )));
    }
    let n = (params.alpha_max / (params.lambda * q)).round() as i64;
    Ok(n.max(1) as usize)
}

/// Synthesize the L2-normalized input wave centered at the grid origin.
pub fn make_input_wave(
    kind: &InputWaveKind,
    params: &MicroscopeParams,
    geom: &GridGeometry,
) -> Result<ComplexField> {
    kind.validate()?;
    let mut wave = match kind {
        InputWaveKind::Probe => build_probe((0, 0), params, geom)?,
        InputWaveKind::TrigTensor { n } => {
            check_trig_degree(*n, geom)?;
            ComplexField::from_fn(*geom, |ix, iy| {
                let tx = 2.0 * std::f64::consts::PI * ix as f64 / geom.nx as f64;
                let ty = 2.0 * std::f64::consts::PI * iy as f64 / geom.ny as f64;
                trig_poly_phi(*n, tx) * trig_poly_phi(*n, ty)
            })
        }
        InputWaveKind::TrigRadial { n } => {
            check_trig_degree(*n, geom)?;
            ComplexField::from_fn(*geom, |ix, iy| {
                let rx = wrapped_offset(ix as i64, 0, geom.nx) as f64 / geom.nx as f64;
                let ry = wrapped_offset(iy as i64, 0, geom.ny) as f64 / geom.ny as f64;
                let t = 2.0 * std::f64::consts::PI * (rx * rx + ry * ry).sqrt();
                trig_poly_phi(*n, t)
            })
        }
        InputWaveKind::Gaussian { sigma } => ComplexField::from_fn(*geom, |ix, iy| {
            let dx = wrapped_offset(ix as i64, 0, geom.nx) as f64 * geom.px();
            let dy = wrapped_offset(iy as i64, 0, geom.ny) as f64 * geom.py();
            Complex64::new((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp(), 0.0)
        }),
        InputWaveKind::PixelDelta => {
            let mut f = ComplexField::zeros(*geom);
            f.set(0, 0, Complex64::new(1.0, 0.0));
            f
        }
    };
    let norm = wave.norm_l2();
    wave.scale(1.0 / norm);
    Ok(wave)
}

/// The default Gaussian width matched to the probe's frequency range:
/// `sigma = lambda / (2 alpha_max)`.
pub fn gaussian_sigma_from_probe(params: &MicroscopeParams) -> f64 {
    params.lambda / (2.0 * params.alpha_max)
}

fn check_trig_degree(n: usize, geom: &GridGeometry) -> Result<()> {
    let max_n = (geom.nx.min(geom.ny) - 1) / 2;
    if n > max_n {
        return Err(Error::InvalidParam(format!(
            "trig degree {n} implies frequencies beyond Nyquist; grid supports n <= {max_n}"
        )));
    }
    Ok(())
}
