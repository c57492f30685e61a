//! Complex 2D fields on a periodic grid: DFTs, periodic shifts, cropping and
//! error norms.
//!
//! The DFT convention is fixed once for the whole crate: the forward
//! transform is the plain unnormalized sum and the inverse carries the
//! `1/(nx*ny)` factor. Fields are stored in FFT order (frequency zero at
//! pixel index 0 along each axis); the centered indexing used by the
//! frequency-set bookkeeping is reached through the shift helpers below.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

/// Pixel counts and physical extent of the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    /// Physical extent in x (Ångström).
    pub lx: f64,
    /// Physical extent in y (Ångström).
    pub ly: f64,
}

impl GridGeometry {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidParam(format!(
                "grid needs at least 2 pixels per axis, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0) || !lx.is_finite() || !ly.is_finite() {
            return Err(Error::InvalidParam(format!(
                "physical extent must be positive and finite, got {lx}x{ly}"
            )));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    /// Real-space pixel size in x (Ångström).
    pub fn px(&self) -> f64 {
        self.lx / self.nx as f64
    }

    /// Real-space pixel size in y (Ångström).
    pub fn py(&self) -> f64 {
        self.ly / self.ny as f64
    }

    /// Fourier-space pixel size in x (1/Ångström).
    pub fn qx(&self) -> f64 {
        1.0 / self.lx
    }

    /// Fourier-space pixel size in y (1/Ångström).
    pub fn qy(&self) -> f64 {
        1.0 / self.ly
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frequency vector (1/Ångström) of the FFT-order pixel `(jx, jy)`.
    pub fn freq(&self, jx: usize, jy: usize) -> (f64, f64) {
        (
            signed_freq_index(jx, self.nx) as f64 / self.lx,
            signed_freq_index(jy, self.ny) as f64 / self.ly,
        )
    }

    /// Frequency vector of a centered pixel pair, as used by the
    /// frequency-set bookkeeping (centered pixel `floor(n/2)` is frequency
    /// zero).
    pub fn freq_centered(&self, cx: usize, cy: usize) -> (f64, f64) {
        (
            (cx as i64 - (self.nx / 2) as i64) as f64 / self.lx,
            (cy as i64 - (self.ny / 2) as i64) as f64 / self.ly,
        )
    }
}

/// Signed frequency index of FFT-order pixel `j` on an axis of `n` pixels.
pub fn signed_freq_index(j: usize, n: usize) -> i64 {
    let h = (n / 2) as i64;
    ((j as i64 + h) % n as i64) - h
}

/// FFT-order pixel index of the centered pixel `c` (zero frequency sits at
/// centered index `floor(n/2)`).
pub fn fft_index_of_centered(c: usize, n: usize) -> usize {
    (c + n - n / 2) % n
}

/// Centered pixel index of the FFT-order pixel `j`.
pub fn centered_index_of_fft(j: usize, n: usize) -> usize {
    (j + n / 2) % n
}

/// Wrap a signed pixel coordinate onto `0..n`.
pub fn wrap_pixel(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

/// Signed wrapped offset `a - b` on a periodic axis, in `[-n/2, n/2)`.
pub fn wrapped_offset(a: i64, b: i64, n: usize) -> i64 {
    let n = n as i64;
    let mut d = (a - b).rem_euclid(n);
    if d >= n - n / 2 {
        d -= n;
    }
    d
}

/// A complex-valued 2D field on a [`GridGeometry`]; data is row-major with
/// `x` fastest: `data[iy * nx + ix]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    geometry: GridGeometry,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            data: vec![Complex64::ZERO; geometry.len()],
            geometry,
        }
    }

    pub fn from_data(geometry: GridGeometry, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "data length {} does not match {}x{} grid",
                data.len(),
                geometry.nx,
                geometry.ny
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(geometry.len());
        for iy in 0..geometry.ny {
            for ix in 0..geometry.nx {
                data.push(f(ix, iy));
            }
        }
        Self { geometry, data }
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn at(&self, ix: usize, iy: usize) -> Complex64 {
        self.data[iy * self.geometry.nx + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: Complex64) {
        self.data[iy * self.geometry.nx + ix] = v;
    }

    /// Value at a signed pixel coordinate, wrapped periodically.
    pub fn at_wrapped(&self, ix: i64, iy: i64) -> Complex64 {
        let x = wrap_pixel(ix, self.geometry.nx);
        let y = wrap_pixel(iy, self.geometry.ny);
        self.at(x, y)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn norm_sup(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += coeff * other`; geometries must match.
    pub fn accumulate(&mut self, other: &ComplexField, coeff: Complex64) -> Result<()> {
        if self.geometry != other.geometry {
            return Err(Error::GeometryMismatch(
                "accumulate over mismatched grids".into(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += coeff * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// Transform direction for [`dft2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, direction: Direction) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        match direction {
            Direction::Forward => p.plan_fft_forward(n),
            Direction::Inverse => p.plan_fft_inverse(n),
        }
    })
}

/// 2D DFT of a field. Forward is the unnormalized sum; inverse carries the
/// `1/(nx*ny)` factor so that `inverse(forward(x)) == x`.
pub fn dft2(field: &ComplexField, direction: Direction) -> Result<ComplexField> {
    field.ensure_finite("dft2 input")?;
    let mut out = field.clone();
    dft2_in_place(&mut out, direction);
    Ok(out)
}

/// In-place variant of [`dft2`] without the finiteness check; used by the
/// hot solver loops which validate their own state.
pub fn dft2_in_place(field: &mut ComplexField, direction: Direction) {
    let (nx, ny) = (field.geometry.nx, field.geometry.ny);
    let row_fft = plan(nx, direction);
    let col_fft = plan(ny, direction);

    for row in field.data.chunks_exact_mut(nx) {
        row_fft.process(row);
    }

    // Columns via transpose so both passes run on contiguous rows.
    let mut scratch = vec![Complex64::ZERO; nx * ny];
    transpose(&field.data, &mut scratch, nx, ny);
    for row in scratch.chunks_exact_mut(ny) {
        col_fft.process(row);
    }
    transpose(&scratch, &mut field.data, ny, nx);

    if direction == Direction::Inverse {
        let norm = 1.0 / (nx * ny) as f64;
        for v in &mut field.data {
            *v *= norm;
        }
    }
}

fn transpose(input: &[Complex64], output: &mut [Complex64], w: usize, h: usize) {
    for y in 0..h {
        for x in 0..w {
            output[x * h + y] = input[y * w + x];
        }
    }
}

/// Norm used by [`rel_error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Euclidean,
    Supremum,
}

/// Relative error `||a - b|| / ||b||` in the requested norm.
pub fn rel_error(a: &ComplexField, b: &ComplexField, norm: Norm) -> Result<f64> {
    if a.geometry != b.geometry {
        return Err(Error::GeometryMismatch(
            "rel_error over mismatched grids".into(),
        ));
    }
    let (num, den) = match norm {
        Norm::Euclidean => {
            let num = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).norm_sqr())
                .sum::<f64>()
                .sqrt();
            (num, b.norm_l2())
        }
        Norm::Supremum => {
            let num = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max);
            (num, b.norm_sup())
        }
    };
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(num / den)
}

/// Relative error of `values` against reference `reference` for plain scalar
/// slices (detector images).
pub fn rel_error_scalar(values: &[f64], reference: &[f64], norm: Norm) -> Result<f64> {
    if values.len() != reference.len() {
        return Err(Error::GeometryMismatch(
            "rel_error over mismatched slices".into(),
        ));
    }
    let (num, den) = match norm {
        Norm::Euclidean => (
            values
                .iter()
                .zip(reference)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            reference.iter().map(|b| b * b).sum::<f64>().sqrt(),
        ),
        Norm::Supremum => (
            values
                .iter()
                .zip(reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
            reference.iter().map(|b| b.abs()).fold(0.0, f64::max),
        ),
    };
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(num / den)
}

/// Circular shift with wrap-around: output pixel `x` holds input `x - shift`.
pub fn periodic_translate(field: &ComplexField, shift: (i64, i64)) -> ComplexField {
    let geom = field.geometry;
    let sx = wrap_pixel(shift.0, geom.nx);
    let sy = wrap_pixel(shift.1, geom.ny);
    let mut out = ComplexField::zeros(geom);
    for iy in 0..geom.ny {
        let src_y = (iy + geom.ny - sy) % geom.ny;
        for ix in 0..geom.nx {
            let src_x = (ix + geom.nx - sx) % geom.nx;
            out.data[iy * geom.nx + ix] = field.data[src_y * geom.nx + src_x];
        }
    }
    out
}

/// Periodic extraction of a `size` window centered at `center`. The output
/// geometry scales the physical extent proportionally; output pixel
/// `(wx/2, wy/2)` holds the input value at `center`.
pub fn crop_window(
    field: &ComplexField,
    center: (i64, i64),
    size: (usize, usize),
) -> Result<ComplexField> {
    let geom = field.geometry;
    let (wx, wy) = size;
    if wx == 0 || wy == 0 || wx > geom.nx || wy > geom.ny {
        return Err(Error::CropTooLarge {
            requested: size,
            grid: (geom.nx, geom.ny),
        });
    }
    let out_geom = GridGeometry {
        nx: wx,
        ny: wy,
        lx: wx as f64 * geom.px(),
        ly: wy as f64 * geom.py(),
    };
    let origin = window_origin(center, size);
    let mut out = ComplexField::zeros(out_geom);
    for oy in 0..wy {
        let src_y = wrap_pixel(origin.1 + oy as i64, geom.ny);
        for ox in 0..wx {
            let src_x = wrap_pixel(origin.0 + ox as i64, geom.nx);
            out.data[oy * wx + ox] = field.data[src_y * geom.nx + src_x];
        }
    }
    Ok(out)
}

/// Origin (lowest-index corner) of a `size` window centered at `center`.
pub fn window_origin(center: (i64, i64), size: (usize, usize)) -> (i64, i64) {
    (
        center.0 - (size.0 / 2) as i64,
        center.1 - (size.1 / 2) as i64,
    )
}

/// A cropped field together with its placement on the full grid: patch pixel
/// `(0, 0)` sits at full-grid pixel `origin` (wrapped).
#[derive(Debug, Clone)]
pub struct Patch {
    pub field: ComplexField,
    pub origin: (i64, i64),
}

impl Patch {
    /// A full-grid field viewed as a trivial patch.
    pub fn full(field: ComplexField) -> Self {
        Self {
            field,
            origin: (0, 0),
        }
    }

    /// Crop `field` to a `size` window centered at `center`.
    pub fn cropped(field: &ComplexField, center: (i64, i64), size: (usize, usize)) -> Result<Self> {
        let origin = window_origin(center, size);
        Ok(Self {
            field: crop_window(field, center, size)?,
            origin,
        })
    }

    /// Accumulate `coeff * patch` into a full-grid field, wrapping at the
    /// periodic boundary.
    pub fn accumulate_into(&self, target: &mut ComplexField, coeff: Complex64) {
        let tg = target.geometry();
        let pg = self.field.geometry();
        for py in 0..pg.ny {
            let ty = wrap_pixel(self.origin.1 + py as i64, tg.ny);
            for px in 0..pg.nx {
                let tx = wrap_pixel(self.origin.0 + px as i64, tg.nx);
                let v = coeff * self.field.at(px, py);
                let cur = target.at(tx, ty);
                target.set(tx, ty, cur + v);
            }
        }
    }

    /// Embed the patch into a zero full-grid field.
    pub fn embed(&self, geometry: GridGeometry) -> ComplexField {
        let mut out = ComplexField::zeros(geometry);
        self.accumulate_into(&mut out, Complex64::new(1.0, 0.0));
        out
    }
}

// ---------------------------------------------------------------------------
// LMAFIELD serialization: one text header line, then row-major interleaved
// re/im little-endian f64.
// ---------------------------------------------------------------------------

pub fn write_field(w: &mut impl Write, field: &ComplexField) -> Result<()> {
    let g = field.geometry;
    writeln!(w, "LMAFIELD {} {} {} {}", g.nx, g.ny, g.lx, g.ly)?;
    for v in &field.data {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field(r: &mut impl Read) -> Result<ComplexField> {
    let header = read_header_line(r, "LMAFIELD")?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "LMAFIELD" {
        return Err(Error::Format {
            format: "LMAFIELD",
            reason: format!("bad header: {header:?}"),
        });
    }
    let nx: usize = parse_field(parts[1], "nx")?;
    let ny: usize = parse_field(parts[2], "ny")?;
    let lx: f64 = parse_field(parts[3], "lx")?;
    let ly: f64 = parse_field(parts[4], "ly")?;
    let geom = GridGeometry::new(nx, ny, lx, ly)?;
    let mut data = Vec::with_capacity(geom.len());
    let mut buf = [0u8; 16];
    for _ in 0..geom.len() {
        r.read_exact(&mut buf).map_err(|e| Error::Format {
            format: "LMAFIELD",
            reason: format!("truncated payload: {e}"),
        })?;
        let re = f64::from_le_bytes(buf[0..8].try_into().unwrap());
        let im = f64::from_le_bytes(buf[8..16].try_into().unwrap());
        if !re.is_finite() || !im.is_finite() {
            return Err(Error::Format {
                format: "LMAFIELD",
                reason: "non-finite value in payload".into(),
            });
        }
        data.push(Complex64::new(re, im));
    }
    ComplexField::from_data(geom, data)
}

pub fn save_field(path: impl AsRef<Path>, field: &ComplexField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field(&mut w, field)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<ComplexField> {
    let mut r = BufReader::new(File::open(path)?);
    read_field(&mut r)
}

/// Read bytes up to and including the first newline; shared by the text+binary
/// container formats.
pub(crate) fn read_header_line(r: &mut impl Read, format: &'static str) -> Result<String> {
    let mut bytes = Vec::new();
    let mut b = [0u8; 1];
    loop {
        if r.read(&mut b)? == 0 {
            return Err(Error::Format {
                format,
                reason: "unexpected end of file in header".into(),
            });
        }
        if b[0] == b'\n' {
            break;
        }
        bytes.push(b[0]);
        if bytes.len() > 4096 {
            return Err(Error::Format {
                format,
                reason: "header line too long".into(),
            });
        }
    }
    String::from_utf8(bytes).map_err(|_| Error::Format {
        format,
        reason: "header is not valid UTF-8".into(),
    })
}

pub(crate) fn parse_field<T: std::str::FromStr>(s: &str, name: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format {
        format: "header",
        reason: format!("cannot parse {name} from {s:?}"),
    })
}
