//! The Lattice Multislice Algorithm: lattice construction, neighbor
//! selection, least-squares probe approximation with translation reuse, and
//! the two-phase simulate driver.
//!
//! Probes live on a rectangular lattice `P`, input waves on a compatible
//! lattice `I`; only every f-th input lattice point is used. Compatibility is
//! classified against the f-subsampled lattice: either the subsampled input
//! lattice refines the probe lattice (one coefficient family serves every
//! probe) or the probe lattice refines it (`c*d` families indexed by the
//! probe classes). Either way a family's coefficients transfer to all its
//! probes by exact grid translation, with identical approximation error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::counters::OpCounters;
use crate::grid::{
    parse_field, read_header_line, rel_error, wrap_pixel, wrapped_offset, ComplexField,
    GridGeometry, Norm, Patch,
};
use crate::inputwaves::{make_input_wave, InputWaveKind};
use crate::multislice::{PropagatorSpec, SolverContext};
use crate::optics::{build_probe, MicroscopeParams};
use crate::scheduler::Partition;
use crate::specimen::Specimen;
use crate::{Error, Result};

/// Propagated input waves keyed by their lattice position.
pub type WaveCache = BTreeMap<(i64, i64), Patch>;

/// How the input lattice is derived from the probe lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeMode {
    /// Input positions coincide with probe positions.
    Aligned,
    /// Input lattice shifted by half the probe spacing in each direction,
    /// avoiding the checkerboard error pattern of aligned lattices at f > 1.
    HalfShift,
}

/// Compatibility classification of probe lattice and f-subsampled input
/// lattice, with the integer ratios `(c, d)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeCase {
    /// The subsampled input lattice has `c*d` times more points: one
    /// coefficient family serves every probe.
    OneToMany { c: usize, d: usize },
    /// The probe lattice is finer: `c*d` coefficient families, one per probe
    /// class.
    ManyToOne { c: usize, d: usize },
}

/// Probe lattice and input-wave lattice with their compatibility data.
/// All positions are grid pixels; both lattices tile the periodic domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePair {
    geom: GridGeometry,
    probe_counts: (usize, usize),
    probe_step: (i64, i64),
    input_counts: (usize, usize),
    input_step: (i64, i64),
    offset: (i64, i64),
    f: usize,
    case: LatticeCase,
}

/// Build the lattice pair from probe and input counts. Counts must divide
/// the grid so that lattice spacings are exact pixel translations; the input
/// count is rounded up to the next multiple of `f` before validation.
pub fn build_lattices(
    geom: &GridGeometry,
    probe_counts: (usize, usize),
    input_counts: (usize, usize),
    mode: LatticeMode,
    f: usize,
) -> Result<LatticePair> {
    if f == 0 {
        return Err(Error::InvalidParam(
            "subsampling factor f must be >= 1".into(),
        ));
    }
    let round_up = |r: usize| r.div_ceil(f) * f;
    let input_counts = (round_up(input_counts.0), round_up(input_counts.1));
    let probe_step = (
        lattice_step(geom.nx, probe_counts.0, "probe", "x")?,
        lattice_step(geom.ny, probe_counts.1, "probe", "y")?,
    );
    let offset = match mode {
        LatticeMode::Aligned => (0, 0),
        LatticeMode::HalfShift => (
            (probe_step.0 as f64 / 2.0).round() as i64,
            (probe_step.1 as f64 / 2.0).round() as i64,
        ),
    };
    lattice_pair_from_raw(geom, probe_counts, input_counts, offset, f)
}

/// Rebuild a lattice pair from its raw stored fields (plan deserialization).
pub fn lattice_pair_from_raw(
    geom: &GridGeometry,
    probe_counts: (usize, usize),
    input_counts: (usize, usize),
    offset: (i64, i64),
    f: usize,
) -> Result<LatticePair> {
    if f == 0 {
        return Err(Error::InvalidParam(
            "subsampling factor f must be >= 1".into(),
        ));
    }
    if !input_counts.0.is_multiple_of(f) || !input_counts.1.is_multiple_of(f) {
        return Err(Error::IncompatibleLattices(format!(
            "input counts {input_counts:?} not divisible by f = {f}"
        )));
    }
    let probe_step = (
        lattice_step(geom.nx, probe_counts.0, "probe", "x")?,
        lattice_step(geom.ny, probe_counts.1, "probe", "y")?,
    );
    let input_step = (
        lattice_step(geom.nx, input_counts.0, "input", "x")?,
        lattice_step(geom.ny, input_counts.1, "input", "y")?,
    );
    let sub_counts = (input_counts.0 / f, input_counts.1 / f);
    let case = classify(probe_counts, sub_counts)?;
    Ok(LatticePair {
        geom: *geom,
        probe_counts,
        probe_step,
        input_counts,
        input_step,
        offset,
        f,
        case,
    })
}

fn lattice_step(n: usize, count: usize, which: &str, axis: &str) -> Result<i64> {
    if count == 0 {
        return Err(Error::InvalidParam(format!(
            "{which} lattice count on {axis} is zero"
        )));
    }
    if !n.is_multiple_of(count) {
        return Err(Error::IncompatibleLattices(format!(
            "{which} lattice count {count} does not divide the {n}-pixel {axis} axis \
             (lattice points must snap to grid pixels)"
        )));
    }
    Ok((n / count) as i64)
}

fn classify(probe: (usize, usize), sub: (usize, usize)) -> Result<LatticeCase> {
    if sub.0.is_multiple_of(probe.0) && sub.1.is_multiple_of(probe.1) {
        Ok(LatticeCase::OneToMany {
            c: sub.0 / probe.0,
            d: sub.1 / probe.1,
        })
    } else if probe.0.is_multiple_of(sub.0) && probe.1.is_multiple_of(sub.1) {
        Ok(LatticeCase::ManyToOne {
            c: probe.0 / sub.0,
            d: probe.1 / sub.1,
        })
    } else {
        Err(Error::IncompatibleLattices(format!(
            "probe counts {probe:?} and subsampled input counts {sub:?} are not integer \
             multiples of each other"
        )))
    }
}

impl LatticePair {
    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    pub fn probe_counts(&self) -> (usize, usize) {
        self.probe_counts
    }

    pub fn probe_step(&self) -> (i64, i64) {
        self.probe_step
    }

    pub fn input_counts(&self) -> (usize, usize) {
        self.input_counts
    }

    pub fn offset(&self) -> (i64, i64) {
        self.offset
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn case(&self) -> LatticeCase {
        self.case
    }

    /// Counts of the f-subsampled input lattice.
    pub fn subsampled_counts(&self) -> (usize, usize) {
        (self.input_counts.0 / self.f, self.input_counts.1 / self.f)
    }

    /// Number of points in the f-subsampled input lattice.
    pub fn subsampled_len(&self) -> usize {
        let (sx, sy) = self.subsampled_counts();
        sx * sy
    }

    /// Pixel position of probe `(a, b)`.
    pub fn probe_position(&self, a: usize, b: usize) -> (i64, i64) {
        (a as i64 * self.probe_step.0, b as i64 * self.probe_step.1)
    }

    /// All pixel positions of the f-subsampled input lattice.
    pub fn subsampled_positions(&self) -> Vec<(i64, i64)> {
        let (sx, sy) = self.subsampled_counts();
        let step = (
            self.input_step.0 * self.f as i64,
            self.input_step.1 * self.f as i64,
        );
        let mut out = Vec::with_capacity(sx * sy);
        for b in 0..sy {
            for a in 0..sx {
                out.push((
                    wrap_pixel(a as i64 * step.0 + self.offset.0, self.geom.nx) as i64,
                    wrap_pixel(b as i64 * step.1 + self.offset.1, self.geom.ny) as i64,
                ));
            }
        }
        out
    }

    /// Representative probe positions needing their own coefficient fits.
    pub fn representatives(&self) -> Vec<(i64, i64)> {
        match self.case {
            LatticeCase::OneToMany { .. } => vec![(0, 0)],
            LatticeCase::ManyToOne { c, d } => {
                let mut reps = Vec::with_capacity(c * d);
                for b in 0..d {
                    for a in 0..c {
                        reps.push(self.probe_position(a, b));
                    }
                }
                reps
            }
        }
    }

    /// Representative index and translation `q` for probe `(a, b)`: the
    /// probe's constellation equals its representative's shifted by `q`, a
    /// subsampled-lattice vector.
    pub fn rep_for_probe(&self, a: usize, b: usize) -> Result<(usize, (i64, i64))> {
        if a >= self.probe_counts.0 || b >= self.probe_counts.1 {
            return Err(Error::InvalidParam(format!(
                "probe index ({a}, {b}) outside lattice {:?}",
                self.probe_counts
            )));
        }
        match self.case {
            LatticeCase::OneToMany { .. } => Ok((0, self.probe_position(a, b))),
            LatticeCase::ManyToOne { c, d } => {
                let rep_idx = (b % d) * c + (a % c);
                let q = (
                    ((a - a % c) as i64) * self.probe_step.0,
                    ((b - b % d) as i64) * self.probe_step.1,
                );
                Ok((rep_idx, q))
            }
        }
    }

    /// Probe lattice index of a pixel position, if it lies on the lattice.
    pub fn probe_index_of(&self, p: (i64, i64)) -> Result<(usize, usize)> {
        let x = wrap_pixel(p.0, self.geom.nx) as i64;
        let y = wrap_pixel(p.1, self.geom.ny) as i64;
        if x % self.probe_step.0 != 0 || y % self.probe_step.1 != 0 {
            return Err(Error::InvalidParam(format!(
                "position {p:?} is not on the probe lattice (step {:?})",
                self.probe_step
            )));
        }
        Ok((
            (x / self.probe_step.0) as usize,
            (y / self.probe_step.1) as usize,
        ))
    }
}

/// The `L` input positions of the subsampled lattice closest to `p` under
/// periodic distance, ordered by distance with deterministic tie-breaking
/// (signed wrapped `(dy, dx)` lexicographic).
pub fn neighbor_set(p: (i64, i64), lattice: &LatticePair, l: usize) -> Result<Vec<(i64, i64)>> {
    let positions = lattice.subsampled_positions();
    if l == 0 || l > positions.len() {
        return Err(Error::InvalidParam(format!(
            "neighbor count {l} outside 1..={}",
            positions.len()
        )));
    }
    let g = lattice.geom;
    let mut keyed: Vec<((f64, i64, i64), (i64, i64))> = positions
        .into_iter()
        .map(|i| {
            let dx = wrapped_offset(i.0, p.0, g.nx);
            let dy = wrapped_offset(i.1, p.1, g.ny);
            let ddx = dx as f64 * g.px();
            let ddy = dy as f64 * g.py();
            ((ddx * ddx + ddy * ddy, dy, dx), i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances"));
    Ok(keyed.into_iter().take(l).map(|(_, i)| i).collect())
}

// ---------------------------------------------------------------------------
// Least-squares fitting
// ---------------------------------------------------------------------------

/// Relative rank tolerance on the unit-normalized dictionary columns.
const RANK_TOL: f64 = 1e-10;

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm_sq(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

/// Modified Gram-Schmidt factorization of an ordered dictionary against one
/// target, keeping enough state to extract the least-squares solution for
/// every prefix of the columns.
struct ProgressiveFit {
    q_cols: Vec<Vec<Complex64>>,
    /// `r_cols[j][i]` = projection of (normalized) column j on `q_i`, i <= j.
    r_cols: Vec<Vec<Complex64>>,
    beta: Vec<Complex64>,
    col_norms: Vec<f64>,
}

fn progressive_fit(target: &[Complex64], columns: &[Vec<Complex64>]) -> Result<ProgressiveFit> {
    let mut fit = ProgressiveFit {
        q_cols: Vec::with_capacity(columns.len()),
        r_cols: Vec::with_capacity(columns.len()),
        beta: Vec::new(),
        col_norms: Vec::new(),
    };
    for (j, col) in columns.iter().enumerate() {
        let norm = norm_sq(col).sqrt();
        if !(norm > 0.0) {
            return Err(Error::RankDeficient {
                rep: (0, 0),
                column: j,
            });
        }
        let mut v: Vec<Complex64> = col.iter().map(|x| x / norm).collect();
        let mut r = Vec::with_capacity(j + 1);
        // Two orthogonalization sweeps keep Q orthonormal for long prefixes.
        for _ in 0..2 {
            for (i, q) in fit.q_cols.iter().enumerate() {
                let proj = inner(q, &v);
                if r.len() <= i {
                    r.push(proj);
                } else {
                    r[i] += proj;
                }
                for (vv, qq) in v.iter_mut().zip(q) {
                    *vv -= proj * qq;
                }
            }
        }
        let rnorm = norm_sq(&v).sqrt();
        if rnorm < RANK_TOL {
            return Err(Error::RankDeficient {
                rep: (0, 0),
                column: j,
            });
        }
        for vv in &mut v {
            *vv /= rnorm;
        }
        r.push(Complex64::new(rnorm, 0.0));
        fit.beta.push(inner(&v, target));
        fit.q_cols.push(v);
        fit.r_cols.push(r);
        fit.col_norms.push(norm);
    }
    Ok(fit)
}

impl ProgressiveFit {
    /// Least-squares coefficients using the first `l` columns, in original
    /// column scaling.
    fn coefficients(&self, l: usize) -> Vec<Complex64> {
        let mut alpha = vec![Complex64::ZERO; l];
        for i in (0..l).rev() {
            let mut acc = self.beta[i];
            for (r_col, a) in self.r_cols[i + 1..l].iter().zip(&alpha[i + 1..l]) {
                acc -= r_col[i] * a;
            }
            alpha[i] = acc / self.r_cols[i][i];
        }
        for (a, n) in alpha.iter_mut().zip(&self.col_norms) {
            *a /= n;
        }
        alpha
    }
}

/// Fit window: a square patch around the representative covering four times
/// the probe's 99%-mass radius, clamped to the full grid.
fn fit_window_size(probe: &ComplexField, center: (i64, i64)) -> (usize, usize) {
    let g = probe.geometry();
    let mut by_dist: Vec<(f64, f64)> = Vec::with_capacity(g.len());
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let dx = wrapped_offset(ix as i64, center.0, g.nx) as f64 * g.px();
            let dy = wrapped_offset(iy as i64, center.1, g.ny) as f64 * g.py();
            by_dist.push((dx * dx + dy * dy, probe.at(ix, iy).norm_sqr()));
        }
    }
    by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = by_dist.iter().map(|(_, m)| m).sum();
    let mut acc = 0.0;
    let mut r99_sq = 0.0;
    for (d2, m) in &by_dist {
        acc += m;
        r99_sq = *d2;
        if acc >= 0.99 * total {
            break;
        }
    }
    let half = 4.0 * r99_sq.sqrt();
    let wx = (2 * (half / g.px()).ceil() as usize + 1).min(g.nx);
    let wy = (2 * (half / g.py()).ceil() as usize + 1).min(g.ny);
    (wx, wy)
}

/// One representative probe's fitted approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeFit {
    /// Probe position of the representative (pixels).
    pub rep: (i64, i64),
    /// Absolute input positions used, in plan order.
    pub neighbors: Vec<(i64, i64)>,
    pub coefficients: Vec<Complex64>,
    /// Relative euclidean error of the reconstruction on the full grid.
    pub fit_error_euclid: f64,
    /// Relative supremum error on the full grid.
    pub fit_error_sup: f64,
}

/// Precomputed approximation coefficients for every probe class of a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxPlan {
    pub kind: InputWaveKind,
    pub l_neighbors: usize,
    pub lattice: LatticePair,
    pub reps: Vec<RepresentativeFit>,
}

impl ApproxPlan {
    /// Worst-case recorded fit errors over the representatives.
    pub fn max_errors(&self) -> (f64, f64) {
        self.reps.iter().fold((0.0, 0.0), |(e, s), r| {
            (r.fit_error_euclid.max(e), r.fit_error_sup.max(s))
        })
    }

    /// Representative and translated absolute input positions for probe
    /// `(a, b)`; the coefficients are the representative's, the error is
    /// exactly the representative's recorded error.
    pub fn for_probe_index(
        &self,
        a: usize,
        b: usize,
    ) -> Result<(&RepresentativeFit, Vec<(i64, i64)>)> {
        let (rep_idx, q) = self.lattice.rep_for_probe(a, b)?;
        let rep = &self.reps[rep_idx];
        let g = self.lattice.geom;
        let positions = rep
            .neighbors
            .iter()
            .map(|i| {
                (
                    wrap_pixel(i.0 + q.0, g.nx) as i64,
                    wrap_pixel(i.1 + q.1, g.ny) as i64,
                )
            })
            .collect();
        Ok((rep, positions))
    }

    /// Same as [`Self::for_probe_index`] but addressed by pixel position;
    /// the position must lie on the probe lattice.
    pub fn for_probe_position(
        &self,
        p: (i64, i64),
    ) -> Result<(&RepresentativeFit, Vec<(i64, i64)>)> {
        let (a, b) = self.lattice.probe_index_of(p)?;
        self.for_probe_index(a, b)
    }
}

/// Reconstruct `sum alpha_i u_i` on the full grid.
fn reconstruct(
    u0: &ComplexField,
    positions: &[(i64, i64)],
    coefficients: &[Complex64],
) -> ComplexField {
    let mut out = ComplexField::zeros(u0.geometry());
    for (pos, coeff) in positions.iter().zip(coefficients) {
        let shifted = crate::grid::periodic_translate(u0, *pos);
        out.accumulate(&shifted, *coeff).expect("same geometry");
    }
    out
}

/// Fit per-representative coefficients for the `L` nearest input waves by
/// linear least squares on a window around each representative; recorded
/// errors are evaluated on the full grid.
pub fn fit_coefficients(
    lattice: &LatticePair,
    kind: &InputWaveKind,
    l: usize,
    params: &MicroscopeParams,
    fit_window: Option<(usize, usize)>,
) -> Result<ApproxPlan> {
    let geom = lattice.geom;
    let u0 = make_input_wave(kind, params, &geom)?;
    let reps = lattice
        .representatives()
        .into_par_iter()
        .map(|rep| fit_one_rep(lattice, kind, l, params, &u0, rep, fit_window))
        .collect::<Result<Vec<_>>>()?;
    Ok(ApproxPlan {
        kind: *kind,
        l_neighbors: l,
        lattice: lattice.clone(),
        reps,
    })
}

fn fit_one_rep(
    lattice: &LatticePair,
    _kind: &InputWaveKind,
    l: usize,
    params: &MicroscopeParams,
    u0: &ComplexField,
    rep: (i64, i64),
    fit_window: Option<(usize, usize)>,
) -> Result<RepresentativeFit> {
    let geom = lattice.geom;
    let probe = build_probe(rep, params, &geom)?;
    let neighbors = neighbor_set(rep, lattice, l)?;
    let window = fit_window.unwrap_or_else(|| fit_window_size(&probe, rep));
    let target = crate::grid::crop_window(&probe, rep, window)?;
    let columns: Vec<Vec<Complex64>> = neighbors
        .iter()
        .map(|i| {
            let shifted = crate::grid::periodic_translate(u0, *i);
            Ok(crate::grid::crop_window(&shifted, rep, window)?
                .data()
                .to_vec())
        })
        .collect::<Result<_>>()?;
    let fit = progressive_fit(target.data(), &columns).map_err(|e| match e {
        Error::RankDeficient { column, .. } => Error::RankDeficient { rep, column },
        other => other,
    })?;
    let coefficients = fit.coefficients(l);
    let recon = reconstruct(u0, &neighbors, &coefficients);
    let fit_error_euclid = rel_error(&recon, &probe, Norm::Euclidean)?;
    let fit_error_sup = rel_error(&recon, &probe, Norm::Supremum)?;
    Ok(RepresentativeFit {
        rep,
        neighbors,
        coefficients,
        fit_error_euclid,
        fit_error_sup,
    })
}

/// One row of the probe-approximation error report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxReportRow {
    pub f: usize,
    pub l: usize,
    /// Worst full-grid relative euclidean error over the representatives.
    pub error_euclid: f64,
    /// Worst full-grid relative supremum error over the representatives.
    pub error_sup: f64,
}

/// Probe-approximation errors over ranges of `f` and `L`, one fit per
/// representative and subsampling factor.
#[allow(clippy::too_many_arguments)]
pub fn probe_approx_report(
    geom: &GridGeometry,
    params: &MicroscopeParams,
    probe_counts: (usize, usize),
    input_counts: (usize, usize),
    mode: LatticeMode,
    kind: &InputWaveKind,
    f_values: &[usize],
    l_values: &[usize],
    fit_window: Option<(usize, usize)>,
) -> Result<Vec<ApproxReportRow>> {
    let u0 = make_input_wave(kind, params, geom)?;
    let mut rows = Vec::new();
    for &f in f_values {
        let lattice = build_lattices(geom, probe_counts, input_counts, mode, f)?;
        let l_max = l_values
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .min(lattice.subsampled_len());
        if l_max == 0 {
            continue;
        }
        let mut per_rep: Vec<(Vec<(i64, i64)>, ProgressiveFit, ComplexField)> = Vec::new();
        for rep in lattice.representatives() {
            let probe = build_probe(rep, params, geom)?;
            let neighbors = neighbor_set(rep, &lattice, l_max)?;
            let window = fit_window.unwrap_or_else(|| fit_window_size(&probe, rep));
            let target = crate::grid::crop_window(&probe, rep, window)?;
            let columns: Vec<Vec<Complex64>> = neighbors
                .iter()
                .map(|i| {
                    let shifted = crate::grid::periodic_translate(&u0, *i);
                    Ok(crate::grid::crop_window(&shifted, rep, window)?
                        .data()
                        .to_vec())
                })
                .collect::<Result<_>>()?;
            let fit = progressive_fit(target.data(), &columns).map_err(|e| match e {
                Error::RankDeficient { column, .. } => Error::RankDeficient { rep, column },
                other => other,
            })?;
            per_rep.push((neighbors, fit, probe));
        }
        for &l in l_values {
            if l == 0 || l > l_max {
                continue;
            }
            let mut worst = (0.0f64, 0.0f64);
            for (neighbors, fit, probe) in &per_rep {
                let coefficients = fit.coefficients(l);
                let recon = reconstruct(&u0, &neighbors[..l], &coefficients);
                let eu = rel_error(&recon, probe, Norm::Euclidean)?;
                let sup = rel_error(&recon, probe, Norm::Supremum)?;
                worst = (worst.0.max(eu), worst.1.max(sup));
            }
            rows.push(ApproxReportRow {
                f,
                l,
                error_euclid: worst.0,
                error_sup: worst.1,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Simulation driver
// ---------------------------------------------------------------------------

/// An LMA simulation bound to one specimen and one fitted plan.
pub struct LmaRun<'a> {
    pub spec: &'a Specimen,
    pub params: &'a MicroscopeParams,
    pub plan: &'a ApproxPlan,
    pub prop: PropagatorSpec,
    /// Storage window `(X', Y')` for propagated input waves; `None` keeps
    /// the full grid. Propagation itself always runs per `prop`.
    pub store_window: Option<(usize, usize)>,
}

impl<'a> LmaRun<'a> {
    /// Run the two-phase algorithm for the requested probe lattice indices.
    /// With a schedule, propagation and combination interleave per partition
    /// set under its memory bound; outputs are identical either way.
    pub fn simulate(
        &self,
        probes: &[(usize, usize)],
        schedule: Option<&Partition>,
        counters: &OpCounters,
    ) -> Result<Vec<ComplexField>> {
        let geom = self.spec.geometry();
        if geom != self.plan.lattice.geom {
            return Err(Error::GeometryMismatch(
                "plan lattice and specimen grids differ".into(),
            ));
        }
        if let Some((wx, wy)) = self.store_window {
            if wx > geom.nx || wy > geom.ny || wx == 0 || wy == 0 {
                return Err(Error::InvalidParam(format!(
                    "storage window {wx}x{wy} invalid for {}x{} grid",
                    geom.nx, geom.ny
                )));
            }
        }
        match schedule {
            None => self.simulate_unscheduled(probes, counters),
            Some(partition) => {
                if partition.memory_bound < self.plan.l_neighbors {
                    return Err(Error::InvalidParam(format!(
                        "schedule memory bound {} is below the neighbor count {}",
                        partition.memory_bound, self.plan.l_neighbors
                    )));
                }
                self.simulate_scheduled(probes, partition, counters)
            }
        }
    }

    /// Phase 1 for an explicit set of input positions: propagate `u` at each
    /// position through the specimen and crop for storage. Exposed so that
    /// partial recomputation can refresh exactly the flagged inputs.
    pub fn propagate_set(
        &self,
        positions: &BTreeSet<(i64, i64)>,
        counters: &OpCounters,
    ) -> Result<WaveCache> {
        let ctx = SolverContext::new(self.spec, self.params, &self.prop)?;
        let u0 = make_input_wave(&self.plan.kind, self.params, &self.spec.geometry())?;
        Ok(self
            .propagate_inputs(&ctx, &u0, positions, counters)?
            .into_iter()
            .collect())
    }

    /// Phase 2 for explicit probes against a propagated-wave cache; the
    /// cache must hold every input position the probes reference.
    pub fn combine_probes(
        &self,
        cache: &WaveCache,
        probes: &[(usize, usize)],
        counters: &OpCounters,
    ) -> Result<Vec<ComplexField>> {
        let geom = self.spec.geometry();
        probes
            .par_iter()
            .map(|&(a, b)| {
                let (rep, positions) = self.plan.for_probe_index(a, b)?;
                self.combine_probe(cache, rep, &positions, &geom, counters)
            })
            .collect()
    }

    /// Input positions the given probes need.
    pub fn needed_inputs(&self, probes: &[(usize, usize)]) -> Result<BTreeSet<(i64, i64)>> {
        let mut needed = BTreeSet::new();
        for &(a, b) in probes {
            let (_, positions) = self.plan.for_probe_index(a, b)?;
            needed.extend(positions);
        }
        Ok(needed)
    }

    fn propagate_inputs(
        &self,
        ctx: &SolverContext,
        u0: &ComplexField,
        positions: &BTreeSet<(i64, i64)>,
        counters: &OpCounters,
    ) -> Result<Vec<((i64, i64), Patch)>> {
        positions
            .iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&&pos| {
                let wave = crate::grid::periodic_translate(u0, pos);
                let exit = ctx.solve(&wave, counters)?;
                let patch = match self.store_window {
                    Some(size) => Patch::cropped(&exit, pos, size)?,
                    None => Patch::full(exit),
                };
                Ok((pos, patch))
            })
            .collect()
    }

    fn combine_probe(
        &self,
        cache: &WaveCache,
        rep: &RepresentativeFit,
        positions: &[(i64, i64)],
        geom: &GridGeometry,
        counters: &OpCounters,
    ) -> Result<ComplexField> {
        let mut out = ComplexField::zeros(*geom);
        let mut macs = 0u64;
        for (pos, coeff) in positions.iter().zip(&rep.coefficients) {
            let patch = cache.get(pos).ok_or_else(|| {
                Error::InvalidParam(format!("propagated wave for input {pos:?} missing"))
            })?;
            patch.accumulate_into(&mut out, *coeff);
            macs += patch.field.geometry().len() as u64;
        }
        counters.add_combine_macs(macs);
        Ok(out)
    }

    fn simulate_unscheduled(
        &self,
        probes: &[(usize, usize)],
        counters: &OpCounters,
    ) -> Result<Vec<ComplexField>> {
        let needed = self.needed_inputs(probes)?;
        let cache = self.propagate_set(&needed, counters)?;
        self.combine_probes(&cache, probes, counters)
    }

    fn simulate_scheduled(
        &self,
        probes: &[(usize, usize)],
        partition: &Partition,
        counters: &OpCounters,
    ) -> Result<Vec<ComplexField>> {
        let geom = self.spec.geometry();
        let ctx = SolverContext::new(self.spec, self.params, &self.prop)?;
        let u0 = make_input_wave(&self.plan.kind, self.params, &geom)?;

        // Requested probe -> output slots (a probe may be requested once).
        let mut slots: std::collections::HashMap<(usize, usize), Vec<usize>> =
            std::collections::HashMap::new();
        for (idx, p) in probes.iter().enumerate() {
            slots.entry(*p).or_default().push(idx);
        }

        // Per-set needs, restricted to requested probes.
        let mut set_probes: Vec<Vec<((usize, usize), &RepresentativeFit, Vec<(i64, i64)>)>> =
            Vec::with_capacity(partition.sets.len());
        let mut set_needs: Vec<BTreeSet<(i64, i64)>> = Vec::with_capacity(partition.sets.len());
        for set in &partition.sets {
            let mut probes_here = Vec::new();
            let mut needs = BTreeSet::new();
            for &(a, b) in set {
                if !slots.contains_key(&(a, b)) {
                    continue;
                }
                let (rep, positions) = self.plan.for_probe_index(a, b)?;
                needs.extend(positions.iter().copied());
                probes_here.push(((a, b), rep, positions));
            }
            set_probes.push(probes_here);
            set_needs.push(needs);
        }

        let mut results: Vec<Option<ComplexField>> = vec![None; probes.len()];
        let mut cache = WaveCache::new();
        for j in 0..set_probes.len() {
            let missing: BTreeSet<(i64, i64)> = set_needs[j]
                .iter()
                .filter(|pos| !cache.contains_key(pos))
                .copied()
                .collect();
            cache.extend(self.propagate_inputs(&ctx, &u0, &missing, counters)?);
            let outputs: Vec<((usize, usize), ComplexField)> = set_probes[j]
                .par_iter()
                .map(|(p, rep, positions)| {
                    Ok((
                        *p,
                        self.combine_probe(&cache, rep, positions, &geom, counters)?,
                    ))
                })
                .collect::<Result<_>>()?;
            for (p, field) in outputs {
                for slot in &slots[&p] {
                    results[*slot] = Some(field.clone());
                }
            }
            // Keep only what the next set reuses; the cost formula credits
            // exactly this adjacent intersection.
            match set_needs.get(j + 1) {
                Some(next) => cache.retain(|pos, _| next.contains(pos)),
                None => cache.clear(),
            }
        }
        results
            .into_iter()
            .enumerate()
            .map(|(idx, r)| {
                r.ok_or_else(|| {
                    Error::InvalidParam(format!(
                        "probe {:?} not covered by the schedule",
                        probes[idx]
                    ))
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// LMAPLAN serialization: versioned text header plus binary coefficients.
// ---------------------------------------------------------------------------

fn kind_token(kind: &InputWaveKind) -> String {
    match kind {
        InputWaveKind::Probe => "probe".into(),
        InputWaveKind::TrigTensor { n } => format!("trig_tensor {n}"),
        InputWaveKind::TrigRadial { n } => format!("trig_radial {n}"),
        InputWaveKind::Gaussian { sigma } => format!("gaussian {sigma}"),
        InputWaveKind::PixelDelta => "pixel_delta".into(),
    }
}

fn kind_from_tokens(tokens: &[&str]) -> Result<InputWaveKind> {
    let bad = || Error::Format {
        format: "LMAPLAN",
        reason: format!("bad wave kind: {tokens:?}"),
    };
    match tokens {
        ["probe"] => Ok(InputWaveKind::Probe),
        ["trig_tensor", n] => Ok(InputWaveKind::TrigTensor {
            n: n.parse().map_err(|_| bad())?,
        }),
        ["trig_radial", n] => Ok(InputWaveKind::TrigRadial {
            n: n.parse().map_err(|_| bad())?,
        }),
        ["gaussian", s] => Ok(InputWaveKind::Gaussian {
            sigma: s.parse().map_err(|_| bad())?,
        }),
        ["pixel_delta"] => Ok(InputWaveKind::PixelDelta),
        _ => Err(bad()),
    }
}

pub fn write_plan(w: &mut impl Write, plan: &ApproxPlan) -> Result<()> {
    let lat = &plan.lattice;
    writeln!(w, "LMAPLAN 1")?;
    writeln!(
        w,
        "lattice {} {} {} {} {} {} {}",
        lat.probe_counts.0,
        lat.probe_counts.1,
        lat.input_counts.0,
        lat.input_counts.1,
        lat.offset.0,
        lat.offset.1,
        lat.f
    )?;
    writeln!(w, "wave {}", kind_token(&plan.kind))?;
    writeln!(w, "l {}", plan.l_neighbors)?;
    writeln!(w, "reps {}", plan.reps.len())?;
    for rep in &plan.reps {
        writeln!(
            w,
            "rep {} {} {} {}",
            rep.rep.0, rep.rep.1, rep.fit_error_euclid, rep.fit_error_sup
        )?;
    }
    for rep in &plan.reps {
        for (pos, coeff) in rep.neighbors.iter().zip(&rep.coefficients) {
            w.write_all(&pos.0.to_le_bytes())?;
            w.write_all(&pos.1.to_le_bytes())?;
            w.write_all(&coeff.re.to_le_bytes())?;
            w.write_all(&coeff.im.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a plan and re-verify the recorded fit errors against a fresh
/// reconstruction on the given grid.
pub fn read_plan(
    r: &mut impl Read,
    params: &MicroscopeParams,
    geom: &GridGeometry,
) -> Result<ApproxPlan> {
    let bad = |reason: String| Error::Format {
        format: "LMAPLAN",
        reason,
    };
    let magic = read_header_line(r, "LMAPLAN")?;
    if magic.trim() != "LMAPLAN 1" {
        return Err(bad(format!("unsupported version line: {magic:?}")));
    }
    let lattice_line = read_header_line(r, "LMAPLAN")?;
    let parts: Vec<&str> = lattice_line.split_whitespace().collect();
    if parts.len() != 8 || parts[0] != "lattice" {
        return Err(bad(format!("bad lattice line: {lattice_line:?}")));
    }
    let lattice = lattice_pair_from_raw(
        geom,
        (parse_field(parts[1], "P_x")?, parse_field(parts[2], "P_y")?),
        (parse_field(parts[3], "R_x")?, parse_field(parts[4], "R_y")?),
        (
            parse_field(parts[5], "off_x")?,
            parse_field(parts[6], "off_y")?,
        ),
        parse_field(parts[7], "f")?,
    )?;
    let wave_line = read_header_line(r, "LMAPLAN")?;
    let tokens: Vec<&str> = wave_line.split_whitespace().collect();
    if tokens.first() != Some(&"wave") {
        return Err(bad(format!("bad wave line: {wave_line:?}")));
    }
    let kind = kind_from_tokens(&tokens[1..])?;
    let l_line = read_header_line(r, "LMAPLAN")?;
    let l: usize = match l_line.split_whitespace().collect::<Vec<_>>()[..] {
        ["l", v] => parse_field(v, "l")?,
        _ => return Err(bad(format!("bad l line: {l_line:?}"))),
    };
    let reps_line = read_header_line(r, "LMAPLAN")?;
    let n_reps: usize = match reps_line.split_whitespace().collect::<Vec<_>>()[..] {
        ["reps", v] => parse_field(v, "reps")?,
        _ => return Err(bad(format!("bad reps line: {reps_line:?}"))),
    };
    let mut headers = Vec::with_capacity(n_reps);
    for _ in 0..n_reps {
        let line = read_header_line(r, "LMAPLAN")?;
        let p: Vec<&str> = line.split_whitespace().collect();
        if p.len() != 5 || p[0] != "rep" {
            return Err(bad(format!("bad rep line: {line:?}")));
        }
        headers.push((
            (
                parse_field::<i64>(p[1], "rep_x")?,
                parse_field::<i64>(p[2], "rep_y")?,
            ),
            parse_field::<f64>(p[3], "err_euclid")?,
            parse_field::<f64>(p[4], "err_sup")?,
        ));
    }
    let mut reps = Vec::with_capacity(n_reps);
    let mut buf8 = [0u8; 8];
    for (rep_pos, err_eu, err_sup) in headers {
        let mut neighbors = Vec::with_capacity(l);
        let mut coefficients = Vec::with_capacity(l);
        for _ in 0..l {
            let mut read_i64 = |r: &mut dyn Read| -> Result<i64> {
                r.read_exact(&mut buf8).map_err(|e| Error::Format {
                    format: "LMAPLAN",
                    reason: format!("truncated payload: {e}"),
                })?;
                Ok(i64::from_le_bytes(buf8))
            };
            let x = read_i64(r)?;
            let y = read_i64(r)?;
            let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
                r.read_exact(&mut buf8).map_err(|e| Error::Format {
                    format: "LMAPLAN",
                    reason: format!("truncated payload: {e}"),
                })?;
                Ok(f64::from_le_bytes(buf8))
            };
            let re = read_f64(r)?;
            let im = read_f64(r)?;
            neighbors.push((x, y));
            coefficients.push(Complex64::new(re, im));
        }
        reps.push(RepresentativeFit {
            rep: rep_pos,
            neighbors,
            coefficients,
            fit_error_euclid: err_eu,
            fit_error_sup: err_sup,
        });
    }
    let plan = ApproxPlan {
        kind,
        l_neighbors: l,
        lattice,
        reps,
    };
    verify_plan(&plan, params, geom)?;
    Ok(plan)
}

/// Recompute each representative's reconstruction errors and compare with
/// the recorded values.
pub fn verify_plan(
    plan: &ApproxPlan,
    params: &MicroscopeParams,
    geom: &GridGeometry,
) -> Result<()> {
    let u0 = make_input_wave(&plan.kind, params, geom)?;
    for rep in &plan.reps {
        let probe = build_probe(rep.rep, params, geom)?;
        let recon = reconstruct(&u0, &rep.neighbors, &rep.coefficients);
        let eu = rel_error(&recon, &probe, Norm::Euclidean)?;
        let sup = rel_error(&recon, &probe, Norm::Supremum)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 + 1e-6 * b.abs();
        if !close(eu, rep.fit_error_euclid) || !close(sup, rep.fit_error_sup) {
            return Err(Error::Format {
                format: "LMAPLAN",
                reason: format!(
                    "recorded errors ({}, {}) for representative {:?} do not match \
                     recomputed ({eu}, {sup})",
                    rep.fit_error_euclid, rep.fit_error_sup, rep.rep
                ),
            });
        }
    }
    Ok(())
}

pub fn save_plan(path: impl AsRef<Path>, plan: &ApproxPlan) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_plan(&mut w, plan)
}

pub fn load_plan(
    path: impl AsRef<Path>,
    params: &MicroscopeParams,
    geom: &GridGeometry,
) -> Result<ApproxPlan> {
    let mut r = BufReader::new(File::open(path)?);
    read_plan(&mut r, params, geom)
}
