//! PRISM reference implementation: Fourier-delta input set, plane-wave
//! propagation and cropped linear reconstruction.
//!
//! The probe's Fourier coefficients are read from the analytic expression
//! rather than from a numerical DFT of the probe, so the f = 1 configuration
//! reproduces per-probe Multislice up to floating-point accumulation alone.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::counters::OpCounters;
use crate::grid::{
    dft2_in_place, fft_index_of_centered, window_origin, ComplexField, Direction, GridGeometry,
    Patch,
};
use crate::multislice::{PropagatorSpec, SolverContext};
use crate::optics::{aperture, aperture_pixel_count, probe_spectrum_phase, MicroscopeParams};
use crate::specimen::Specimen;
use crate::{Error, Result};

/// The set of aperture-passing Fourier pixels, optionally restricted to the
/// `f`-strided sublattice anchored at the zero-frequency pixel. Entries are
/// centered pixel pairs (zero frequency at `(nx/2, ny/2)`).
#[derive(Debug, Clone)]
pub struct FrequencySet {
    entries: Vec<(usize, usize)>,
    f: usize,
}

impl FrequencySet {
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Enumerate the aperture-passing Fourier pixels; `f > 1` keeps every f-th
/// pixel per direction, anchored at the zero frequency.
pub fn build_frequency_set(
    geom: &GridGeometry,
    params: &MicroscopeParams,
    f: usize,
) -> Result<FrequencySet> {
    if f == 0 {
        return Err(Error::InvalidParam(
            "interpolation factor f must be >= 1".into(),
        ));
    }
    if aperture_pixel_count(geom, params) <= 1 {
        return Err(Error::EmptyAperture);
    }
    let (ax, ay) = (geom.nx / 2, geom.ny / 2);
    let mut entries = Vec::new();
    for cy in 0..geom.ny {
        for cx in 0..geom.nx {
            if !aperture(geom.freq_centered(cx, cy), params) {
                continue;
            }
            if (cx + ax) % f != 0 || (cy + ay) % f != 0 {
                continue;
            }
            entries.push((cx, cy));
        }
    }
    Ok(FrequencySet { entries, f })
}

/// Inverse DFT of the discrete delta at a centered Fourier pixel: a constant
/// modulus plane wave.
pub fn plane_wave(entry: (usize, usize), geom: &GridGeometry) -> Result<ComplexField> {
    if entry.0 >= geom.nx || entry.1 >= geom.ny {
        return Err(Error::InvalidParam(format!(
            "frequency entry {entry:?} outside {}x{} grid",
            geom.nx, geom.ny
        )));
    }
    let jx = fft_index_of_centered(entry.0, geom.nx);
    let jy = fft_index_of_centered(entry.1, geom.ny);
    let mut delta = ComplexField::zeros(*geom);
    delta.set(jx, jy, Complex64::new(1.0, 0.0));
    dft2_in_place(&mut delta, Direction::Inverse);
    Ok(delta)
}

/// The probe coefficient attached to a frequency entry in the linear
/// reconstruction, for a probe at pixel position `p`.
fn probe_coefficient(
    entry: (usize, usize),
    p: (i64, i64),
    geom: &GridGeometry,
    params: &MicroscopeParams,
    norm_factor: f64,
) -> Complex64 {
    let g = geom.freq_centered(entry.0, entry.1);
    let pos = (p.0 as f64 * geom.px(), p.1 as f64 * geom.py());
    norm_factor * probe_spectrum_phase(g, pos, params)
}

/// Assemble the f-approximation of the probe itself (no propagation); for
/// f > 1 this shows the f^2 periodic probe copies.
pub fn reconstruct_init(
    fset: &FrequencySet,
    p: (i64, i64),
    geom: &GridGeometry,
    params: &MicroscopeParams,
) -> Result<ComplexField> {
    let norm_factor = crate::optics::probe_spectrum_norm_factor(geom, params)?;
    let mut spectrum = ComplexField::zeros(*geom);
    for &entry in &fset.entries {
        let jx = fft_index_of_centered(entry.0, geom.nx);
        let jy = fft_index_of_centered(entry.1, geom.ny);
        spectrum.set(
            jx,
            jy,
            probe_coefficient(entry, p, geom, params, norm_factor),
        );
    }
    dft2_in_place(&mut spectrum, Direction::Inverse);
    Ok(spectrum)
}

/// Run PRISM: propagate every plane wave of the frequency set through the
/// specimen, then form each probe's exit wave as the coefficient-weighted
/// sum. With `crop` set, each result is restricted to an `(X/f) x (Y/f)`
/// window centered at the probe position and rescaled by `f^2`, undoing the
/// amplitude split over the f^2 periodic probe copies so the window
/// approximates the true exit wave; the returned patches record the window
/// placement.
pub fn prism_simulate(
    spec: &Specimen,
    params: &MicroscopeParams,
    f: usize,
    probes: &[(i64, i64)],
    crop: bool,
    counters: &OpCounters,
) -> Result<Vec<Patch>> {
    let geom = spec.geometry();
    let fset = build_frequency_set(&geom, params, f)?;
    let norm_factor = crate::optics::probe_spectrum_norm_factor(&geom, params)?;
    let ctx = SolverContext::new(spec, params, &PropagatorSpec::fourier())?;

    // Phase 1: independent plane-wave propagations.
    let propagated: Vec<ComplexField> = fset
        .entries
        .par_iter()
        .map(|&entry| ctx.solve(&plane_wave(entry, &geom)?, counters))
        .collect::<Result<_>>()?;

    // Phase 2: per-probe linear combinations over the completed set.
    let window = (geom.nx / f, geom.ny / f);
    probes
        .par_iter()
        .map(|&p| {
            if crop {
                let origin = window_origin(p, window);
                let out_geom = GridGeometry {
                    nx: window.0,
                    ny: window.1,
                    lx: window.0 as f64 * geom.px(),
                    ly: window.1 as f64 * geom.py(),
                };
                let mut out = ComplexField::zeros(out_geom);
                for (entry, wave) in fset.entries.iter().zip(&propagated) {
                    let coeff = probe_coefficient(*entry, p, &geom, params, norm_factor);
                    for oy in 0..window.1 {
                        for ox in 0..window.0 {
                            let v = wave.at_wrapped(origin.0 + ox as i64, origin.1 + oy as i64);
                            let cur = out.at(ox, oy);
                            out.set(ox, oy, cur + coeff * v);
                        }
                    }
                }
                counters.add_combine_macs((fset.len() * window.0 * window.1) as u64);
                out.scale((f * f) as f64);
                Ok(Patch { field: out, origin })
            } else {
                let mut out = ComplexField::zeros(geom);
                for (entry, wave) in fset.entries.iter().zip(&propagated) {
                    let coeff = probe_coefficient(*entry, p, &geom, params, norm_factor);
                    out.accumulate(wave, coeff)?;
                }
                counters.add_combine_macs((fset.len() * geom.len()) as u64);
                Ok(Patch::full(out))
            }
        })
        .collect()
}
