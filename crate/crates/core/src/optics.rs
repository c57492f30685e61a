//! STEM probe construction from the aberration and aperture functions.
//!
//! All lengths are Ångström, angles are radians. The aberration model is
//! third-order spherical aberration plus defocus only.

use num_complex::Complex64;

use crate::grid::{dft2_in_place, ComplexField, Direction, GridGeometry};
use crate::{Error, Result};

/// Microscope parameters defining the probe and the propagator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroscopeParams {
    /// Electron wavelength (Å).
    pub lambda: f64,
    /// Third-order spherical aberration (Å).
    pub cs: f64,
    /// Focus (Å).
    pub z: f64,
    /// Objective aperture semiangle (rad).
    pub alpha_max: f64,
    /// Beam-sample interaction constant (rad/(V·Å)).
    pub sigma: f64,
}

impl MicroscopeParams {
    pub fn new(lambda: f64, cs: f64, z: f64, alpha_max: f64, sigma: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidParam(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        if !(alpha_max > 0.0) {
            return Err(Error::InvalidParam(format!(
                "alpha_max must be > 0, got {alpha_max}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParam(format!(
                "sigma must be > 0, got {sigma}"
            )));
        }
        Ok(Self {
            lambda,
            cs,
            z,
            alpha_max,
            sigma,
        })
    }
}

/// Wave aberration phase `chi(k) = pi/2 Cs lambda^3 |k|^4 - pi Z lambda |k|^2`.
pub fn aberration_chi(k: (f64, f64), params: &MicroscopeParams) -> f64 {
    let k2 = k.0 * k.0 + k.1 * k.1;
    0.5 * std::f64::consts::PI * params.cs * params.lambda.powi(3) * k2 * k2
        - std::f64::consts::PI * params.z * params.lambda * k2
}

/// Ideal lowpass aperture: passes iff `lambda * |k| < alpha_max` (strict).
pub fn aperture(k: (f64, f64), params: &MicroscopeParams) -> bool {
    params.lambda * (k.0 * k.0 + k.1 * k.1).sqrt() < params.alpha_max
}

/// Number of grid frequencies passing the aperture (the size of the plane
/// wave set used by PRISM).
pub fn aperture_pixel_count(geom: &GridGeometry, params: &MicroscopeParams) -> usize {
    let mut count = 0;
    for jy in 0..geom.ny {
        for jx in 0..geom.nx {
            if aperture(geom.freq(jx, jy), params) {
                count += 1;
            }
        }
    }
    count
}

/// Fourier-space probe value at frequency `g` for a probe at physical
/// position `p`, before aperture masking and normalization:
/// `exp(-i chi(g)) * exp(-2 pi i g.p)`.
pub fn probe_spectrum_phase(g: (f64, f64), p: (f64, f64), params: &MicroscopeParams) -> Complex64 {
    let chi = aberration_chi(g, params);
    let modulation = 2.0 * std::f64::consts::PI * (g.0 * p.0 + g.1 * p.1);
    Complex64::new(0.0, -(chi + modulation)).exp()
}

/// Scale factor mapping the unit-modulus aperture spectrum to the spectrum of
/// the L2-normalized probe.
pub fn probe_spectrum_norm_factor(geom: &GridGeometry, params: &MicroscopeParams) -> Result<f64> {
    let k = aperture_pixel_count(geom, params);
    // The zero frequency always passes the strict lowpass test; an aperture
    // below the grid's Fourier resolution passes nothing else and yields a
    // degenerate (constant) probe.
    if k <= 1 {
        return Err(Error::EmptyAperture);
    }
    Ok((geom.len() as f64 / k as f64).sqrt())
}

/// Build the focused STEM probe at pixel position `p` (probe positions are
/// snapped to grid pixels). The result is L2-normalized.
pub fn build_probe(
    p: (i64, i64),
    params: &MicroscopeParams,
    geom: &GridGeometry,
) -> Result<ComplexField> {
    let pos = (p.0 as f64 * geom.px(), p.1 as f64 * geom.py());
    probe_spectrum_norm_factor(geom, params)?;
    let mut spectrum = ComplexField::from_fn(*geom, |jx, jy| {
        let g = geom.freq(jx, jy);
        if aperture(g, params) {
            probe_spectrum_phase(g, pos, params)
        } else {
            Complex64::ZERO
        }
    });
    dft2_in_place(&mut spectrum, Direction::Inverse);
    let mut probe = spectrum;
    let norm = probe.norm_l2();
    probe.scale(1.0 / norm);
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{dft2, periodic_translate, rel_error, Norm};

    fn paper_params() -> MicroscopeParams {
        MicroscopeParams::new(0.0250793, -2000.0, 100.0, 0.026, 0.01).unwrap()
    }

    #[test]
    fn chi_zero_at_origin() {
        assert_eq!(aberration_chi((0.0, 0.0), &paper_params()), 0.0);
    }

    #[test]
    fn chi_vanishes_without_aberrations() {
        let p = MicroscopeParams::new(0.0250793, 0.0, 0.0, 0.026, 0.01).unwrap();
        for k in [(0.3, 0.1), (1.0, -2.0), (0.0, 5.0)] {
            assert_eq!(aberration_chi(k, &p), 0.0);
        }
    }

    #[test]
    fn chi_matches_direct_formula() {
        // Direct evaluation of the two monomials for the experiment settings.
        let p = paper_params();
        let k = (0.5, 0.0);
        let k2: f64 = 0.25;
        let expected = 0.5 * std::f64::consts::PI * (-2000.0) * 0.0250793f64.powi(3) * k2 * k2
            - std::f64::consts::PI * 100.0 * 0.0250793 * k2;
        assert!((aberration_chi(k, &p) - expected).abs() < 1e-15);
    }

    #[test]
    fn chi_is_radially_symmetric() {
        let p = paper_params();
        let k = (0.3f64, -0.4f64);
        let r = (k.0 * k.0 + k.1 * k.1).sqrt();
        assert!((aberration_chi(k, &p) - aberration_chi((r, 0.0), &p)).abs() < 1e-12);
    }

    #[test]
    fn aperture_edges() {
        let p = paper_params();
        assert!(aperture((0.0, 0.0), &p));
        // Exactly on the boundary: strictly outside by the lowpass definition.
        let k_edge = p.alpha_max / p.lambda;
        assert!(!aperture((k_edge, 0.0), &p));
        // lambda * 1.0 = 0.0250793 < 0.026 passes.
        assert!(aperture((1.0, 0.0), &p));
    }

    #[test]
    fn probe_spectrum_is_aperture_indicator() {
        let geom = GridGeometry::new(32, 32, 12.0, 12.0).unwrap();
        let p = paper_params();
        let probe = build_probe((5, 9), &p, &geom).unwrap();
        let spec = dft2(&probe, Direction::Forward).unwrap();
        let expected = probe_spectrum_norm_factor(&geom, &p).unwrap();
        for jy in 0..32 {
            for jx in 0..32 {
                let inside = aperture(geom.freq(jx, jy), &p);
                let m = spec.at(jx, jy).norm();
                if inside {
                    assert!((m - expected).abs() < 1e-9 * expected);
                } else {
                    assert!(m < 1e-9 * expected);
                }
            }
        }
    }

    #[test]
    fn probe_is_normalized() {
        let geom = GridGeometry::new(64, 64, 20.0, 20.0).unwrap();
        let probe = build_probe((0, 0), &paper_params(), &geom).unwrap();
        assert!((probe.norm_l2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probe_translation_equivariance() {
        let geom = GridGeometry::new(32, 32, 12.0, 12.0).unwrap();
        let p = paper_params();
        let at_zero = build_probe((0, 0), &p, &geom).unwrap();
        let at_p = build_probe((7, 3), &p, &geom).unwrap();
        let shifted = periodic_translate(&at_zero, (7, 3));
        assert!(rel_error(&at_p, &shifted, Norm::Euclidean).unwrap() < 1e-12);
    }

    #[test]
    fn aperture_too_small_rejected() {
        let geom = GridGeometry::new(16, 16, 4.0, 4.0).unwrap();
        // alpha_max below one Fourier pixel: lambda * qx = 0.0250793 * 0.25.
        let p = MicroscopeParams::new(0.0250793, 0.0, 0.0, 1e-4, 0.01).unwrap();
        assert!(matches!(
            build_probe((0, 0), &p, &geom),
            Err(Error::EmptyAperture)
        ));
    }

    #[test]
    fn experiment_scale_probe() {
        // The window used throughout the experiments: 1024 pixels over
        // 62.416 Angstrom.
        let geom = GridGeometry::new(1024, 1024, 62.416, 62.416).unwrap();
        let p = paper_params();
        let probe = build_probe((0, 0), &p, &geom).unwrap();
        assert!((probe.norm_l2() - 1.0).abs() < 1e-10);
        let support = aperture_pixel_count(&geom, &p);
        // Radius in Fourier pixels is alpha_max / lambda * lx ~ 64.7.
        let radius = p.alpha_max / p.lambda * 62.416;
        let disk = std::f64::consts::PI * radius * radius;
        assert!((support as f64 - disk).abs() < 0.02 * disk);
    }
}
