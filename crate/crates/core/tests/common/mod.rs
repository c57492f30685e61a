//! Shared fixtures for the integration and acceptance suites.

use lma_core::grid::GridGeometry;
use lma_core::optics::MicroscopeParams;
use lma_core::specimen::{synth_specimen, AtomSpec, Specimen};

/// The microscope settings used throughout the experiments (200 kV).
pub fn paper_microscope() -> MicroscopeParams {
    MicroscopeParams::new(0.0250793, -2000.0, 100.0, 0.026, 0.05).unwrap()
}

/// Same optics with a small aperture, keeping plane-wave sets cheap enough
/// for exhaustive oracle comparisons.
pub fn narrow_microscope() -> MicroscopeParams {
    MicroscopeParams::new(0.0250793, -2000.0, 100.0, 0.006, 0.05).unwrap()
}

/// A handful of asymmetric Gaussian-blob atoms spread over the slices.
pub fn synthetic_atoms(lx: f64, ly: f64, thickness: f64) -> Vec<AtomSpec> {
    let place = |fx: f64, fy: f64, fz: f64, amplitude: f64, width: f64| AtomSpec {
        x: fx * lx,
        y: fy * ly,
        z: fz * thickness,
        amplitude,
        width,
    };
    vec![
        place(0.31, 0.27, 0.10, 30.0, 0.40),
        place(0.55, 0.42, 0.35, 26.0, 0.35),
        place(0.72, 0.68, 0.60, 34.0, 0.45),
        place(0.18, 0.61, 0.85, 22.0, 0.30),
        place(0.47, 0.82, 0.35, 28.0, 0.40),
        place(0.86, 0.23, 0.60, 25.0, 0.35),
    ]
}

pub fn synthetic_specimen(geom: &GridGeometry, eps: f64, n_slices: usize) -> Specimen {
    let thickness = eps * n_slices as f64;
    synth_specimen(
        &synthetic_atoms(geom.lx, geom.ly, thickness),
        geom,
        eps,
        n_slices,
    )
    .unwrap()
}
