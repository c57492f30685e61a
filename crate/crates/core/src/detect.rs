//! Detector models over exit waves and STEM image assembly.
//!
//! A detector integrates the squared modulus of the exit wave's spectrum:
//! one annulus (2D), a stack of annuli (3D) or a sampled patch of the
//! spectrum itself (4D). Annulus membership is decided by pixel-center
//! radius, lower-inclusive and upper-exclusive. Detectors operate on the
//! wave's own grid, so cropped waves integrate with their own Fourier pixel
//! size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::grid::{dft2, parse_field, read_header_line, ComplexField, Direction};
use crate::{Error, Result};

/// Detector geometry; angular radii are mrad, converted to frequency via
/// `k = theta / lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorConfig {
    /// One annulus `[r1, r2)` mrad (disk for `r1 = 0`).
    TwoD { r1_mrad: f64, r2_mrad: f64 },
    /// `annuli + 1` rings of width `r_mrad`: `[a r, (a+1) r)` for `a = 0..=annuli`.
    ThreeD { annuli: usize, r_mrad: f64 },
    /// Spectrum sampled at `(a dx, b dy)` for `a = -a_max..=a_max`,
    /// `b = -b_max..=b_max`; `dx`, `dy` in 1/Å.
    FourD {
        a_max: usize,
        b_max: usize,
        dx: f64,
        dy: f64,
    },
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DetectorConfig::TwoD { r1_mrad, r2_mrad } => {
                if !(*r1_mrad >= 0.0 && r2_mrad > r1_mrad) {
                    return Err(Error::InvalidParam(format!(
                        "2d detector needs 0 <= r1 < r2, got [{r1_mrad}, {r2_mrad})"
                    )));
                }
            }
            DetectorConfig::ThreeD { annuli, r_mrad } => {
                if *annuli < 1 || !(*r_mrad > 0.0) {
                    return Err(Error::InvalidParam(format!(
                        "3d detector needs annuli >= 1 and r > 0, got {annuli}, {r_mrad}"
                    )));
                }
            }
            DetectorConfig::FourD { dx, dy, .. } => {
                if !(*dx > 0.0 && *dy > 0.0) {
                    return Err(Error::InvalidParam(format!(
                        "4d detector needs positive sampling steps, got {dx}, {dy}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of values one detection produces.
    pub fn channels(&self) -> usize {
        match self {
            DetectorConfig::TwoD { .. } => 1,
            DetectorConfig::ThreeD { annuli, .. } => annuli + 1,
            DetectorConfig::FourD { a_max, b_max, .. } => (2 * a_max + 1) * (2 * b_max + 1),
        }
    }
}

/// Detector values plus a flag marking a partial integral (the requested
/// angular range extends beyond the wave's maximum grid frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub values: Vec<f64>,
    pub clipped: bool,
}

/// Record the detector output for one exit wave.
pub fn detect(exit: &ComplexField, cfg: &DetectorConfig, lambda: f64) -> Result<DetectorOutput> {
    cfg.validate()?;
    exit.ensure_finite("detector input")?;
    let spectrum = dft2(exit, Direction::Forward)?;
    let g = exit.geometry();
    let pixel_area = g.qx() * g.qy();
    // Largest frequency radius fully represented on the grid.
    let k_max = (g.nx as f64 / (2.0 * g.lx)).min(g.ny as f64 / (2.0 * g.ly));

    let out = match cfg {
        DetectorConfig::TwoD { r1_mrad, r2_mrad } => {
            let k1 = r1_mrad * 1e-3 / lambda;
            let k2 = r2_mrad * 1e-3 / lambda;
            let mut acc = 0.0;
            for jy in 0..g.ny {
                for jx in 0..g.nx {
                    let (fx, fy) = g.freq(jx, jy);
                    let k = (fx * fx + fy * fy).sqrt();
                    if k >= k1 && k < k2 {
                        acc += spectrum.at(jx, jy).norm_sqr();
                    }
                }
            }
            DetectorOutput {
                values: vec![acc * pixel_area],
                clipped: k2 > k_max,
            }
        }
        DetectorConfig::ThreeD { annuli, r_mrad } => {
            let ring = r_mrad * 1e-3 / lambda;
            let mut values = vec![0.0; annuli + 1];
            for jy in 0..g.ny {
                for jx in 0..g.nx {
                    let (fx, fy) = g.freq(jx, jy);
                    let k = (fx * fx + fy * fy).sqrt();
                    let bin = (k / ring).floor() as usize;
                    if bin <= *annuli {
                        values[bin] += spectrum.at(jx, jy).norm_sqr();
                    }
                }
            }
            for v in &mut values {
                *v *= pixel_area;
            }
            DetectorOutput {
                values,
                clipped: (*annuli as f64 + 1.0) * ring > k_max,
            }
        }
        DetectorConfig::FourD {
            a_max,
            b_max,
            dx,
            dy,
        } => {
            let mut values = Vec::with_capacity(cfg.channels());
            let mut clipped = false;
            for b in -(*b_max as i64)..=(*b_max as i64) {
                for a in -(*a_max as i64)..=(*a_max as i64) {
                    let target = (a as f64 * dx, b as f64 * dy);
                    // Nearest grid frequency pixel.
                    let sx = (target.0 * g.lx).round() as i64;
                    let sy = (target.1 * g.ly).round() as i64;
                    if 2 * sx.abs() > g.nx as i64 || 2 * sy.abs() > g.ny as i64 {
                        clipped = true;
                        values.push(0.0);
                        continue;
                    }
                    let jx = sx.rem_euclid(g.nx as i64) as usize;
                    let jy = sy.rem_euclid(g.ny as i64) as usize;
                    values.push(spectrum.at(jx, jy).norm_sqr());
                }
            }
            DetectorOutput { values, clipped }
        }
    };
    Ok(out)
}

/// `P_x x P_y` grid of detector outputs, one value vector per probe pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct STEMImage {
    pub probe_counts: (usize, usize),
    pub channels: usize,
    /// Row-major over probes, channels fastest:
    /// `data[(b * P_x + a) * channels + ch]`.
    pub data: Vec<f64>,
}

impl STEMImage {
    pub fn zeros(probe_counts: (usize, usize), channels: usize) -> Self {
        Self {
            probe_counts,
            channels,
            data: vec![0.0; probe_counts.0 * probe_counts.1 * channels],
        }
    }

    pub fn probe_values(&self, a: usize, b: usize) -> &[f64] {
        let at = (b * self.probe_counts.0 + a) * self.channels;
        &self.data[at..at + self.channels]
    }

    fn set_probe(&mut self, a: usize, b: usize, values: &[f64]) {
        let at = (b * self.probe_counts.0 + a) * self.channels;
        self.data[at..at + self.channels].copy_from_slice(values);
    }
}

/// Assemble per-probe detector outputs into a lattice-ordered image. Probes
/// not present keep their value from `prior` (partial recompute) or zero.
pub fn assemble_image(
    outputs: &[((usize, usize), Vec<f64>)],
    probe_counts: (usize, usize),
    channels: usize,
    prior: Option<&STEMImage>,
) -> Result<STEMImage> {
    let mut image = match prior {
        Some(p) => {
            if p.probe_counts != probe_counts || p.channels != channels {
                return Err(Error::GeometryMismatch(
                    "prior image dimensions do not match".into(),
                ));
            }
            p.clone()
        }
        None => STEMImage::zeros(probe_counts, channels),
    };
    for ((a, b), values) in outputs {
        if *a >= probe_counts.0 || *b >= probe_counts.1 {
            return Err(Error::InvalidParam(format!(
                "probe index ({a}, {b}) outside the {probe_counts:?} lattice"
            )));
        }
        if values.len() != channels {
            return Err(Error::InvalidParam(format!(
                "probe ({a}, {b}) carries {} values, detector has {channels} channels",
                values.len()
            )));
        }
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "detector values at probe ({a}, {b})"
            )));
        }
        image.set_probe(*a, *b, values);
    }
    Ok(image)
}

// ---------------------------------------------------------------------------
// LMAIMG serialization and PGM export
// ---------------------------------------------------------------------------

pub fn write_image(w: &mut impl Write, image: &STEMImage) -> Result<()> {
    writeln!(
        w,
        "LMAIMG {} {} {}",
        image.probe_counts.0, image.probe_counts.1, image.channels
    )?;
    for v in &image.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_image(r: &mut impl Read) -> Result<STEMImage> {
    let header = read_header_line(r, "LMAIMG")?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "LMAIMG" {
        return Err(Error::Format {
            format: "LMAIMG",
            reason: format!("bad header: {header:?}"),
        });
    }
    let px: usize = parse_field(parts[1], "P_x")?;
    let py: usize = parse_field(parts[2], "P_y")?;
    let channels: usize = parse_field(parts[3], "channels")?;
    let mut data = vec![0.0; px * py * channels];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf).map_err(|e| Error::Format {
            format: "LMAIMG",
            reason: format!("truncated payload: {e}"),
        })?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(STEMImage {
        probe_counts: (px, py),
        channels,
        data,
    })
}

pub fn save_image(path: impl AsRef<Path>, image: &STEMImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_image(&mut w, image)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<STEMImage> {
    let mut r = BufReader::new(File::open(path)?);
    read_image(&mut r)
}

/// 16-bit binary PGM (P5, big-endian samples).
pub fn write_pgm16(w: &mut impl Write, width: usize, height: usize, data: &[u16]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::GeometryMismatch("pgm data size".into()));
    }
    write!(w, "P5\n{width} {height}\n65535\n")?;
    for v in data {
        w.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Min-max scale one channel of an image to 16-bit gray for inspection.
pub fn image_to_gray16(image: &STEMImage, channel: usize) -> Result<Vec<u16>> {
    if channel >= image.channels {
        return Err(Error::InvalidParam(format!(
            "channel {channel} out of {}",
            image.channels
        )));
    }
    let values: Vec<f64> = image
        .data
        .chunks_exact(image.channels)
        .map(|c| c[channel])
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(values
        .iter()
        .map(|v| (((v - lo) / span) * 65535.0).round() as u16)
        .collect())
}

pub fn export_pgm(path: impl AsRef<Path>, image: &STEMImage, channel: usize) -> Result<()> {
    let gray = image_to_gray16(image, channel)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm16(&mut w, image.probe_counts.0, image.probe_counts.1, &gray)
}
