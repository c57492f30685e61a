//! The split-step Multislice solver in both the Fourier-space and the
//! real-space-convolution variants, with operation counters.
//!
//! One solve alternates a pointwise transmission step `psi <- t_z psi` with a
//! Fresnel propagation step `psi <- q * psi` over the slices of the specimen.
//! The Fourier variant applies the propagation as a unit-modulus pointwise
//! multiplication between a forward and an inverse FFT and is exactly linear
//! and norm-preserving up to rounding. The real-space variant convolves with
//! a truncated, discretized kernel and may run on a reduced window centered
//! on the wave's support; the Fourier variant always runs on the full grid
//! because a reduced periodic window would wrap the probe onto itself.

use num_complex::Complex64;

use crate::counters::OpCounters;
use crate::grid::{
    crop_window, dft2_in_place, window_origin, ComplexField, Direction, GridGeometry, Patch,
};
use crate::optics::MicroscopeParams;
use crate::specimen::{transmission, Specimen};
use crate::{Error, Result};

/// Which realization of the propagation step to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagatorVariant {
    /// Pointwise multiplication in Fourier space on the full grid.
    Fourier,
    /// Direct convolution with a `k1` x `k2` kernel, optionally restricted to
    /// a `window` centered on the wave's support (zero boundary).
    RealSpace {
        k1: usize,
        k2: usize,
        window: Option<(usize, usize)>,
    },
}

/// Propagation settings for [`multislice_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagatorSpec {
    pub variant: PropagatorVariant,
    /// Optional 2/3-Nyquist lowpass applied after each propagation step.
    /// Off by default; the split-step equations themselves contain no such
    /// mask. With the mask on, norm conservation only holds as `<= 1`.
    pub bandwidth_limit: bool,
}

impl PropagatorSpec {
    pub fn fourier() -> Self {
        Self {
            variant: PropagatorVariant::Fourier,
            bandwidth_limit: false,
        }
    }

    pub fn realspace(k1: usize, k2: usize, window: Option<(usize, usize)>) -> Self {
        Self {
            variant: PropagatorVariant::RealSpace { k1, k2, window },
            bandwidth_limit: false,
        }
    }

    pub fn validate(&self, geom: &GridGeometry) -> Result<()> {
        match self.variant {
            PropagatorVariant::Fourier => Ok(()),
            PropagatorVariant::RealSpace { k1, k2, window } => {
                if k1 < 3 || k2 < 3 || k1 % 2 == 0 || k2 % 2 == 0 {
                    return Err(Error::InvalidParam(format!(
                        "real-space kernel must be odd and >= 3 per axis, got {k1}x{k2}"
                    )));
                }
                if k1 * k2 >= geom.len() {
                    return Err(Error::InvalidParam(format!(
                        "real-space kernel {k1}x{k2} is not small against the {}x{} grid",
                        geom.nx, geom.ny
                    )));
                }
                if let Some((wx, wy)) = window {
                    if wx > geom.nx || wy > geom.ny || wx == 0 || wy == 0 {
                        return Err(Error::InvalidParam(format!(
                            "computation window {wx}x{wy} exceeds the {}x{} grid",
                            geom.nx, geom.ny
                        )));
                    }
                }
                if self.bandwidth_limit {
                    return Err(Error::InvalidParam(
                        "bandwidth limiting is a Fourier-space mask; use the fourier variant"
                            .into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Frequency response of the Fresnel propagation kernel:
/// `P(k) = exp(-i pi lambda eps |k|^2)`, unit modulus at every frequency.
pub fn fourier_propagator(geom: &GridGeometry, lambda: f64, eps: f64) -> ComplexField {
    ComplexField::from_fn(*geom, |jx, jy| {
        let (gx, gy) = geom.freq(jx, jy);
        let phase = -std::f64::consts::PI * lambda * eps * (gx * gx + gy * gy);
        Complex64::new(0.0, phase).exp()
    })
}

/// Central `k1` x `k2` samples of the real-space Fresnel kernel
/// `q(x, y) = -i/(lambda eps) exp(i pi (x^2 + y^2)/(lambda eps))`, scaled by
/// the pixel area so that discrete convolution approximates the integral.
/// Row-major with x fastest; the center sample sits at `(k1/2, k2/2)`.
pub fn realspace_kernel(
    geom: &GridGeometry,
    lambda: f64,
    eps: f64,
    k1: usize,
    k2: usize,
) -> Vec<Complex64> {
    let (px, py) = (geom.px(), geom.py());
    let amp = Complex64::new(0.0, -1.0) / (lambda * eps) * (px * py);
    let mut kernel = Vec::with_capacity(k1 * k2);
    for iy in 0..k2 {
        let y = (iy as i64 - (k2 / 2) as i64) as f64 * py;
        for ix in 0..k1 {
            let x = (ix as i64 - (k1 / 2) as i64) as f64 * px;
            let phase = std::f64::consts::PI * (x * x + y * y) / (lambda * eps);
            kernel.push(amp * Complex64::new(0.0, phase).exp());
        }
    }
    kernel
}

/// Precomputed per-specimen state shared by many solves: transmission
/// functions, the propagator response or kernel, and the optional band mask.
pub struct SolverContext {
    geom: GridGeometry,
    prop: PropagatorSpec,
    transmissions: Vec<ComplexField>,
    propagator: Option<ComplexField>,
    kernel: Option<Vec<Complex64>>,
    mask: Option<Vec<f64>>,
}

impl SolverContext {
    pub fn new(spec: &Specimen, params: &MicroscopeParams, prop: &PropagatorSpec) -> Result<Self> {
        let geom = spec.geometry();
        prop.validate(&geom)?;
        let transmissions = (0..spec.n_slices())
            .map(|j| transmission(spec.slice(j), &geom, params.sigma))
            .collect::<Result<Vec<_>>>()?;
        let (propagator, kernel) = match prop.variant {
            PropagatorVariant::Fourier => (
                Some(fourier_propagator(&geom, params.lambda, spec.eps())),
                None,
            ),
            PropagatorVariant::RealSpace { k1, k2, .. } => (
                None,
                Some(realspace_kernel(&geom, params.lambda, spec.eps(), k1, k2)),
            ),
        };
        let mask = prop.bandwidth_limit.then(|| {
            let k_nyq = (geom.nx as f64 / (2.0 * geom.lx)).min(geom.ny as f64 / (2.0 * geom.ly));
            let cutoff = 2.0 / 3.0 * k_nyq;
            let mut m = Vec::with_capacity(geom.len());
            for jy in 0..geom.ny {
                for jx in 0..geom.nx {
                    let (gx, gy) = geom.freq(jx, jy);
                    m.push(if (gx * gx + gy * gy).sqrt() < cutoff {
                        1.0
                    } else {
                        0.0
                    });
                }
            }
            m
        });
        Ok(Self {
            geom,
            prop: *prop,
            transmissions,
            propagator,
            kernel,
            mask,
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    /// Run the split-step loop for one initial wave.
    pub fn solve(&self, init: &ComplexField, counters: &OpCounters) -> Result<ComplexField> {
        if init.geometry() != self.geom {
            return Err(Error::GeometryMismatch(
                "initial wave does not live on the specimen grid".into(),
            ));
        }
        init.ensure_finite("multislice initial wave")?;
        let exit = match self.prop.variant {
            PropagatorVariant::Fourier => self.solve_fourier(init, counters)?,
            PropagatorVariant::RealSpace { k1, k2, window } => {
                self.solve_realspace(init, k1, k2, window, counters)?
            }
        };
        counters.add_multislice_call();
        Ok(exit)
    }

    fn solve_fourier(&self, init: &ComplexField, counters: &OpCounters) -> Result<ComplexField> {
        let propagator = self.propagator.as_ref().expect("fourier context");
        let xy = self.geom.len() as u64;
        let mut psi = init.clone();
        for (j, t) in self.transmissions.iter().enumerate() {
            for (v, t) in psi.data_mut().iter_mut().zip(t.data()) {
                *v *= t;
            }
            dft2_in_place(&mut psi, Direction::Forward);
            for (v, p) in psi.data_mut().iter_mut().zip(propagator.data()) {
                *v *= p;
            }
            if let Some(mask) = &self.mask {
                for (v, m) in psi.data_mut().iter_mut().zip(mask) {
                    *v *= *m;
                }
            }
            dft2_in_place(&mut psi, Direction::Inverse);
            counters.add_ffts(2);
            counters.add_pointwise_muls(2 * xy);
            psi.ensure_finite(&format!("multislice wave after slice {j}"))?;
        }
        Ok(psi)
    }

    fn solve_realspace(
        &self,
        init: &ComplexField,
        k1: usize,
        k2: usize,
        window: Option<(usize, usize)>,
        counters: &OpCounters,
    ) -> Result<ComplexField> {
        let kernel = self.kernel.as_ref().expect("realspace context");
        match window {
            None => {
                // Full grid, periodic wrap.
                let mut psi = init.clone();
                for (j, t) in self.transmissions.iter().enumerate() {
                    for (v, t) in psi.data_mut().iter_mut().zip(t.data()) {
                        *v *= t;
                    }
                    psi = convolve_periodic(&psi, kernel, k1, k2);
                    counters.add_pointwise_muls(self.geom.len() as u64);
                    counters.add_convolution_macs((self.geom.len() * k1 * k2) as u64);
                    psi.ensure_finite(&format!("multislice wave after slice {j}"))?;
                }
                Ok(psi)
            }
            Some(size) => {
                // Reduced window centered on the wave's dominant pixel, zero
                // boundary outside.
                let center = dominant_pixel(init);
                let origin = window_origin(center, size);
                let mut psi = crop_window(init, center, size)?;
                let win_geom = psi.geometry();
                let windowed_t: Vec<ComplexField> = self
                    .transmissions
                    .iter()
                    .map(|t| crop_window(t, center, size))
                    .collect::<Result<_>>()?;
                for (j, t) in windowed_t.iter().enumerate() {
                    for (v, t) in psi.data_mut().iter_mut().zip(t.data()) {
                        *v *= t;
                    }
                    psi = convolve_zero_boundary(&psi, kernel, k1, k2);
                    counters.add_pointwise_muls(win_geom.len() as u64);
                    counters.add_convolution_macs((win_geom.len() * k1 * k2) as u64);
                    psi.ensure_finite(&format!("multislice wave after slice {j}"))?;
                }
                Ok(Patch { field: psi, origin }.embed(self.geom))
            }
        }
    }
}

/// One-off solve; PRISM and LMA build a [`SolverContext`] once and reuse it.
pub fn multislice_solve(
    init: &ComplexField,
    spec: &Specimen,
    params: &MicroscopeParams,
    prop: &PropagatorSpec,
    counters: &OpCounters,
) -> Result<ComplexField> {
    SolverContext::new(spec, params, prop)?.solve(init, counters)
}

/// Pixel with the largest modulus (first in scan order on ties).
fn dominant_pixel(field: &ComplexField) -> (i64, i64) {
    let g = field.geometry();
    let mut best = (0usize, 0usize);
    let mut best_v = -1.0;
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let v = field.at(ix, iy).norm_sqr();
            if v > best_v {
                best_v = v;
                best = (ix, iy);
            }
        }
    }
    (best.0 as i64, best.1 as i64)
}

fn convolve_periodic(
    field: &ComplexField,
    kernel: &[Complex64],
    k1: usize,
    k2: usize,
) -> ComplexField {
    let g = field.geometry();
    let (hx, hy) = ((k1 / 2) as i64, (k2 / 2) as i64);
    ComplexField::from_fn(g, |ix, iy| {
        let mut acc = Complex64::ZERO;
        for ky in 0..k2 {
            let dy = ky as i64 - hy;
            let sy = (iy as i64 - dy).rem_euclid(g.ny as i64) as usize;
            for kx in 0..k1 {
                let dx = kx as i64 - hx;
                let sx = (ix as i64 - dx).rem_euclid(g.nx as i64) as usize;
                acc += kernel[ky * k1 + kx] * field.at(sx, sy);
            }
        }
        acc
    })
}

fn convolve_zero_boundary(
    field: &ComplexField,
    kernel: &[Complex64],
    k1: usize,
    k2: usize,
) -> ComplexField {
    let g = field.geometry();
    let (hx, hy) = ((k1 / 2) as i64, (k2 / 2) as i64);
    ComplexField::from_fn(g, |ix, iy| {
        let mut acc = Complex64::ZERO;
        for ky in 0..k2 {
            let sy = iy as i64 - (ky as i64 - hy);
            if sy < 0 || sy >= g.ny as i64 {
                continue;
            }
            for kx in 0..k1 {
                let sx = ix as i64 - (kx as i64 - hx);
                if sx < 0 || sx >= g.nx as i64 {
                    continue;
                }
                acc += kernel[ky * k1 + kx] * field.at(sx as usize, sy as usize);
            }
        }
        acc
    })
}
