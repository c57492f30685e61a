//! Projected-potential slice stacks: synthetic generation, file import and
//! transmission functions.
//!
//! The synthetic generator stands in for tabulated atomic potentials with
//! periodic Gaussian blobs; externally computed slices can be supplied
//! through the LMASLICES import format for realism.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::grid::{parse_field, read_header_line, wrap_pixel, ComplexField, GridGeometry};
use crate::{Error, Result};

/// Gaussian deposits are truncated at this many widths; beyond it the tail is
/// below 3.4e-4 of the peak. The recompute planner relies on this hard
/// locality radius.
pub const ATOM_TRUNCATION_WIDTHS: f64 = 4.0;

/// A synthetic atom: a Gaussian blob of projected potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomSpec {
    /// Position (Å).
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Potential strength (V·Å).
    pub amplitude: f64,
    /// Gaussian radius (Å).
    pub width: f64,
}

impl AtomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) {
            return Err(Error::InvalidParam(format!(
                "atom width must be > 0, got {}",
                self.width
            )));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::InvalidParam(format!(
                "atom amplitude must be > 0, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// A stack of projected-potential slices `v` on the grid, each of thickness
/// `eps`, ordered along the beam direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Specimen {
    geom: GridGeometry,
    eps: f64,
    slices: Vec<Vec<f64>>,
}

impl Specimen {
    pub fn new(geom: GridGeometry, eps: f64, slices: Vec<Vec<f64>>) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidParam(format!(
                "slice thickness must be > 0, got {eps}"
            )));
        }
        if slices.is_empty() {
            return Err(Error::InvalidParam(
                "specimen needs at least one slice".into(),
            ));
        }
        for (i, s) in slices.iter().enumerate() {
            if s.len() != geom.len() {
                return Err(Error::GeometryMismatch(format!(
                    "slice {i} has {} values for a {}x{} grid",
                    s.len(),
                    geom.nx,
                    geom.ny
                )));
            }
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFinite(format!("slice {i} of specimen")));
            }
        }
        Ok(Self { geom, eps, slices })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    /// Total specimen thickness (Å).
    pub fn thickness(&self) -> f64 {
        self.eps * self.slices.len() as f64
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        &self.slices[j]
    }

    /// Grid pixels where any slice of `self` and `other` differ by more than
    /// `tol`; the input to the recompute planner.
    pub fn changed_pixels(&self, other: &Specimen, tol: f64) -> Result<Vec<(usize, usize)>> {
        if self.geom != other.geom || self.slices.len() != other.slices.len() {
            return Err(Error::GeometryMismatch(
                "specimens differ in geometry or slicing".into(),
            ));
        }
        let mut changed = vec![false; self.geom.len()];
        for (a, b) in self.slices.iter().zip(&other.slices) {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                if (x - y).abs() > tol {
                    changed[i] = true;
                }
            }
        }
        Ok(changed
            .iter()
            .enumerate()
            .filter(|(_, c)| **c)
            .map(|(i, _)| (i % self.geom.nx, i / self.geom.nx))
            .collect())
    }
}

/// Build a specimen from Gaussian-blob atoms. Each atom is assigned wholly to
/// the slice containing its `z` and deposits
/// `amplitude * exp(-r^2 / (2 width^2))` with periodic wrap in x and y.
pub fn synth_specimen(
    atoms: &[AtomSpec],
    geom: &GridGeometry,
    eps: f64,
    n_slices: usize,
) -> Result<Specimen> {
    if n_slices == 0 {
        return Err(Error::InvalidParam("n_slices must be >= 1".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!(
            "slice thickness must be > 0, got {eps}"
        )));
    }
    let mut slices = vec![vec![0.0; geom.len()]; n_slices];
    let thickness = eps * n_slices as f64;
    for atom in atoms {
        atom.validate()?;
        if !(0.0..thickness).contains(&atom.z) {
            return Err(Error::InvalidParam(format!(
                "atom z = {} outside specimen [0, {thickness})",
                atom.z
            )));
        }
        let j = (atom.z / eps) as usize;
        deposit(&mut slices[j], geom, atom);
    }
    Specimen::new(*geom, eps, slices)
}

fn deposit(slice: &mut [f64], geom: &GridGeometry, atom: &AtomSpec) {
    let (px, py) = (geom.px(), geom.py());
    let cut = ATOM_TRUNCATION_WIDTHS * atom.width;
    let cx = (atom.x / px).round() as i64;
    let cy = (atom.y / py).round() as i64;
    // Visit each pixel at most once even when the truncation radius spans
    // more than half the (periodic) grid.
    let span = |r: f64, pitch: f64, n: usize| -> Vec<i64> {
        let half = (r / pitch).ceil() as i64;
        if 2 * half + 1 >= n as i64 {
            (0..n as i64).collect()
        } else {
            (-half..=half).collect()
        }
    };
    let xs = span(cut, px, geom.nx);
    let ys = span(cut, py, geom.ny);
    let full_x = xs.len() == geom.nx;
    let full_y = ys.len() == geom.ny;
    for dy in &ys {
        let gy = if full_y {
            *dy as usize
        } else {
            wrap_pixel(cy + dy, geom.ny)
        };
        for dx in &xs {
            let gx = if full_x {
                *dx as usize
            } else {
                wrap_pixel(cx + dx, geom.nx)
            };
            // Torus distance from the atom itself, not the nearest pixel center.
            let ddx = (gx as f64 * px - atom.x).rem_euclid(geom.lx);
            let ddy = (gy as f64 * py - atom.y).rem_euclid(geom.ly);
            let ddx = ddx.min(geom.lx - ddx);
            let ddy = ddy.min(geom.ly - ddy);
            let r2 = ddx * ddx + ddy * ddy;
            if r2 <= cut * cut {
                slice[gy * geom.nx + gx] +=
                    atom.amplitude * (-r2 / (2.0 * atom.width * atom.width)).exp();
            }
        }
    }
}

/// Pointwise transmission function `exp(i sigma v)`; unit modulus everywhere.
pub fn transmission(slice: &[f64], geom: &GridGeometry, sigma: f64) -> Result<ComplexField> {
    if slice.len() != geom.len() {
        return Err(Error::GeometryMismatch("transmission slice size".into()));
    }
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transmission input slice".into()));
    }
    let data = slice
        .iter()
        .map(|v| Complex64::new(0.0, sigma * v).exp())
        .collect();
    ComplexField::from_data(*geom, data)
}

// ---------------------------------------------------------------------------
// LMASLICES serialization: one text header line, then N slices of row-major
// little-endian f64.
// ---------------------------------------------------------------------------

pub fn write_specimen(w: &mut impl Write, spec: &Specimen) -> Result<()> {
    let g = spec.geom;
    writeln!(
        w,
        "LMASLICES {} {} {} {} {} {}",
        g.nx,
        g.ny,
        g.lx,
        g.ly,
        spec.eps,
        spec.slices.len()
    )?;
    for slice in &spec.slices {
        for v in slice {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_specimen(r: &mut impl Read) -> Result<Specimen> {
    let header = read_header_line(r, "LMASLICES")?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 7 || parts[0] != "LMASLICES" {
        return Err(Error::Format {
            format: "LMASLICES",
            reason: format!("bad header: {header:?}"),
        });
    }
    let nx: usize = parse_field(parts[1], "nx")?;
    let ny: usize = parse_field(parts[2], "ny")?;
    let lx: f64 = parse_field(parts[3], "lx")?;
    let ly: f64 = parse_field(parts[4], "ly")?;
    let eps: f64 = parse_field(parts[5], "eps")?;
    let n: usize = parse_field(parts[6], "N")?;
    let geom = GridGeometry::new(nx, ny, lx, ly)?;
    if n == 0 {
        return Err(Error::Format {
            format: "LMASLICES",
            reason: "slice count is zero".into(),
        });
    }
    let mut slices = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for j in 0..n {
        let mut slice = Vec::with_capacity(geom.len());
        for _ in 0..geom.len() {
            r.read_exact(&mut buf).map_err(|e| Error::Format {
                format: "LMASLICES",
                reason: format!("truncated payload in slice {j}: {e}"),
            })?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::Format {
                    format: "LMASLICES",
                    reason: format!("non-finite value in slice {j}"),
                });
            }
            slice.push(v);
        }
        slices.push(slice);
    }
    // A well-formed file ends exactly after the last slice.
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format {
            format: "LMASLICES",
            reason: "trailing bytes after declared slice count".into(),
        });
    }
    Specimen::new(geom, eps, slices)
}

pub fn save_specimen(path: impl AsRef<Path>, spec: &Specimen) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_specimen(&mut w, spec)
}

pub fn load_specimen(path: impl AsRef<Path>) -> Result<Specimen> {
    let mut r = BufReader::new(File::open(path)?);
    read_specimen(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> GridGeometry {
        GridGeometry::new(32, 32, 16.0, 16.0).unwrap()
    }

    fn atom(x: f64, y: f64, z: f64) -> AtomSpec {
        AtomSpec {
            x,
            y,
            z,
            amplitude: 3.0,
            width: 0.4,
        }
    }

    #[test]
    fn empty_atoms_give_zero_slices() {
        let s = synth_specimen(&[], &geom(), 2.0, 3).unwrap();
        assert_eq!(s.n_slices(), 3);
        for j in 0..3 {
            assert!(s.slice(j).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_atom_peaks_at_its_pixel() {
        let g = geom();
        // Pixel size is 0.5, so (4.0, 6.0) sits exactly on pixel (8, 12).
        let s = synth_specimen(&[atom(4.0, 6.0, 1.0)], &g, 2.0, 2).unwrap();
        let slice = s.slice(0);
        let (mut best, mut best_v) = ((0, 0), f64::MIN);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                if slice[iy * g.nx + ix] > best_v {
                    best_v = slice[iy * g.nx + ix];
                    best = (ix, iy);
                }
            }
        }
        assert_eq!(best, (8, 12));
        assert!((best_v - 3.0).abs() < 1e-12);
        assert!(s.slice(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_atoms_superpose() {
        let g = geom();
        let a = atom(4.0, 4.0, 0.5);
        let b = atom(12.0, 12.0, 0.5);
        let both = synth_specimen(&[a, b], &g, 2.0, 1).unwrap();
        let only_a = synth_specimen(&[a], &g, 2.0, 1).unwrap();
        let only_b = synth_specimen(&[b], &g, 2.0, 1).unwrap();
        for i in 0..g.len() {
            let sum = only_a.slice(0)[i] + only_b.slice(0)[i];
            assert!((both.slice(0)[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn atom_outside_thickness_rejected() {
        let g = geom();
        assert!(synth_specimen(&[atom(1.0, 1.0, 4.0)], &g, 2.0, 2).is_err());
        assert!(synth_specimen(&[atom(1.0, 1.0, -0.1)], &g, 2.0, 2).is_err());
        assert!(synth_specimen(&[atom(1.0, 1.0, 3.9)], &g, 2.0, 2).is_ok());
    }

    #[test]
    fn deposits_wrap_periodically() {
        let g = geom();
        let near_edge = synth_specimen(&[atom(0.1, 0.1, 0.0)], &g, 2.0, 1).unwrap();
        // Mass must appear on both sides of the wrap boundary.
        let slice = near_edge.slice(0);
        assert!(slice[0] > 0.0);
        assert!(slice[g.nx - 1] > 0.0);
        assert!(slice[(g.ny - 1) * g.nx] > 0.0);
    }

    #[test]
    fn edit_locality_radius() {
        let g = geom();
        let base = vec![atom(8.0, 8.0, 0.5), atom(3.0, 12.0, 0.5)];
        let mut edited = base.clone();
        edited[0].amplitude = 5.0;
        let s0 = synth_specimen(&base, &g, 2.0, 1).unwrap();
        let s1 = synth_specimen(&edited, &g, 2.0, 1).unwrap();
        let changed = s0.changed_pixels(&s1, 1e-12).unwrap();
        assert!(!changed.is_empty());
        let cut = ATOM_TRUNCATION_WIDTHS * 0.4;
        for (ix, iy) in changed {
            let dx = (ix as f64 * g.px() - 8.0)
                .abs()
                .min(g.lx - (ix as f64 * g.px() - 8.0).abs());
            let dy = (iy as f64 * g.py() - 8.0)
                .abs()
                .min(g.ly - (iy as f64 * g.py() - 8.0).abs());
            assert!(dx * dx + dy * dy <= cut * cut + 1e-9);
        }
    }

    #[test]
    fn transmission_zero_slice_is_ones() {
        let g = geom();
        let t = transmission(&vec![0.0; g.len()], &g, 0.01).unwrap();
        for v in t.data() {
            assert_eq!(*v, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn transmission_pi_over_sigma_gives_minus_one() {
        let g = GridGeometry::new(2, 2, 1.0, 1.0).unwrap();
        let sigma = 0.02;
        let mut slice = vec![0.0; 4];
        slice[2] = std::f64::consts::PI / sigma;
        let t = transmission(&slice, &g, sigma).unwrap();
        assert!((t.data()[2] - Complex64::new(-1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn transmission_is_unit_modulus() {
        let g = geom();
        let s = synth_specimen(&[atom(5.0, 5.0, 0.5), atom(9.5, 2.5, 0.5)], &g, 2.0, 1).unwrap();
        let t = transmission(s.slice(0), &g, 0.05).unwrap();
        for v in t.data() {
            assert!((v.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn transmission_preserves_l2_norm() {
        let g = geom();
        let s = synth_specimen(&[atom(5.0, 5.0, 0.5)], &g, 2.0, 1).unwrap();
        let t = transmission(s.slice(0), &g, 0.05).unwrap();
        let mut wave = crate::optics::build_probe(
            (3, 3),
            &crate::optics::MicroscopeParams::new(0.0250793, 0.0, 0.0, 0.026, 0.05).unwrap(),
            &g,
        )
        .unwrap();
        let before = wave.norm_l2();
        for (w, t) in wave.data_mut().iter_mut().zip(t.data()) {
            *w *= t;
        }
        assert!((wave.norm_l2() - before).abs() < 1e-12);
    }

    #[test]
    fn specimen_io_roundtrip() {
        let g = geom();
        let s = synth_specimen(&[atom(4.0, 6.0, 1.0), atom(10.0, 2.0, 3.0)], &g, 2.0, 2).unwrap();
        let mut buf = Vec::new();
        write_specimen(&mut buf, &s).unwrap();
        let back = read_specimen(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn specimen_io_truncated_rejected() {
        let g = geom();
        let s = synth_specimen(&[atom(4.0, 6.0, 1.0)], &g, 2.0, 2).unwrap();
        let mut buf = Vec::new();
        write_specimen(&mut buf, &s).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(read_specimen(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn specimen_io_count_mismatch_rejected() {
        let g = geom();
        let s = synth_specimen(&[atom(4.0, 6.0, 1.0)], &g, 2.0, 2).unwrap();
        let mut buf = Vec::new();
        write_specimen(&mut buf, &s).unwrap();
        let payload_at = buf.iter().position(|b| *b == b'\n').unwrap() + 1;

        // Header claims 3 slices but the payload holds 2.
        let mut over = format!("LMASLICES {} {} {} {} 2 3\n", g.nx, g.ny, g.lx, g.ly).into_bytes();
        over.extend_from_slice(&buf[payload_at..]);
        assert!(read_specimen(&mut over.as_slice()).is_err());

        // Header claims 1 slice: trailing bytes must also be rejected.
        let mut under = format!("LMASLICES {} {} {} {} 2 1\n", g.nx, g.ny, g.lx, g.ly).into_bytes();
        under.extend_from_slice(&buf[payload_at..]);
        assert!(read_specimen(&mut under.as_slice()).is_err());
    }
}
