//! Run configuration: a single TOML file with nested sections. Unknown keys
//! are hard errors so that typos cannot silently corrupt comparisons.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use lma_core::detect::DetectorConfig;
use lma_core::grid::GridGeometry;
use lma_core::inputwaves::{gaussian_sigma_from_probe, trig_degree_from_probe, InputWaveKind};
use lma_core::lma::{build_lattices, LatticeMode, LatticePair};
use lma_core::multislice::PropagatorSpec;
use lma_core::optics::MicroscopeParams;
use lma_core::scheduler::PartitionStrategy;
use lma_core::specimen::{load_specimen, synth_specimen, AtomSpec, Specimen};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for all configured randomness (greedy start pixel).
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 means available parallelism.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub grid: GridSection,
    pub microscope: MicroscopeSection,
    pub specimen: SpecimenSection,
    pub probes: ProbesSection,
    pub solver: SolverSection,
    #[serde(default)]
    pub detectors: Vec<DetectorSection>,
    pub recompute: Option<RecomputeSection>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroscopeSection {
    pub lambda: f64,
    pub cs: f64,
    pub z: f64,
    pub alpha_max: f64,
    pub sigma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecimenSection {
    /// "synthetic" builds Gaussian-blob atoms; "file" imports LMASLICES.
    pub source: String,
    pub path: Option<PathBuf>,
    pub eps: Option<f64>,
    pub n_slices: Option<usize>,
    #[serde(default)]
    pub atoms: Vec<AtomSection>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSection {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub amplitude: f64,
    pub width: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesSection {
    /// Probe lattice pixel counts (P_x, P_y); must divide the grid.
    pub counts: [usize; 2],
    /// Optional rectangular subset of lattice indices; defaults to the full
    /// lattice.
    pub x0: Option<usize>,
    pub y0: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// "multislice", "prism" or "lma".
    pub kind: String,
    pub multislice: Option<MultisliceSection>,
    pub prism: Option<PrismSection>,
    pub lma: Option<LmaSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultisliceSection {
    #[serde(default = "default_variant")]
    pub variant: String,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub window: Option<[usize; 2]>,
    #[serde(default)]
    pub bandwidth_limit: bool,
}

fn default_variant() -> String {
    "fourier".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrismSection {
    pub f: usize,
    #[serde(default)]
    pub crop: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmaSection {
    /// "probe", "trig_tensor", "trig_radial", "gaussian" or "pixel_delta".
    pub wave: String,
    /// Trigonometric degree; defaults to the frequency-matching formula.
    pub trig_n: Option<usize>,
    /// Gaussian width in Å; defaults to lambda / (2 alpha_max).
    pub gaussian_sigma: Option<f64>,
    pub f: usize,
    pub l: usize,
    /// "aligned" or "half_shift".
    #[serde(default = "default_lattice_mode")]
    pub lattice: String,
    /// Input lattice counts; defaults to the probe counts.
    pub input_counts: Option<[usize; 2]>,
    /// Storage window (X', Y') for propagated waves; defaults to
    /// (nx/f, ny/f). Set to the grid size to keep full waves.
    pub store_window: Option<[usize; 2]>,
    /// Least-squares window; defaults to 4x the probe's 99%-mass radius.
    pub fit_window: Option<[usize; 2]>,
    /// Maximum resident propagated waves; omitted means no schedule.
    pub memory_bound: Option<usize>,
    #[serde(default = "default_strategy")]
    pub strategy: String,
}

fn default_lattice_mode() -> String {
    "half_shift".into()
}

fn default_strategy() -> String {
    "row_by_row".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub name: String,
    /// "2d", "3d" or "4d".
    pub mode: String,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub annuli: Option<usize>,
    pub r: Option<f64>,
    pub a: Option<usize>,
    pub b: Option<usize>,
    pub dx: Option<f64>,
    pub dy: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecomputeSection {
    /// Index into the synthetic atom list.
    pub atom_index: usize,
    pub amplitude: Option<f64>,
    pub width: Option<f64>,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub z: Option<f64>,
    /// Beam-spreading half-angle override (rad); defaults to 2 alpha_max.
    pub alpha_spread: Option<f64>,
}

/// Parsed and validated configuration with the core objects built.
pub struct Prepared {
    pub config: RunConfig,
    pub geom: GridGeometry,
    pub params: MicroscopeParams,
    pub specimen: Specimen,
    pub atoms: Vec<AtomSpec>,
    pub lattice: LatticePair,
    pub probes: Vec<(usize, usize)>,
    pub solver: Solver,
    pub detectors: Vec<(String, DetectorConfig)>,
}

pub enum Solver {
    Multislice {
        prop: PropagatorSpec,
    },
    Prism {
        f: usize,
        crop: bool,
    },
    Lma {
        kind: InputWaveKind,
        l: usize,
        store_window: (usize, usize),
        fit_window: Option<(usize, usize)>,
        memory_bound: Option<usize>,
        strategy: PartitionStrategy,
    },
}

pub fn load(path: &Path) -> Result<Prepared, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    prepare(config)
}

fn bad(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {reason}"))
}

pub fn prepare(config: RunConfig) -> Result<Prepared, CliError> {
    let g = &config.grid;
    let geom = GridGeometry::new(g.nx, g.ny, g.lx, g.ly).map_err(|e| bad("grid", e))?;
    let m = &config.microscope;
    let params = MicroscopeParams::new(m.lambda, m.cs, m.z, m.alpha_max, m.sigma)
        .map_err(|e| bad("microscope", e))?;

    let (specimen, atoms) = build_specimen(&config.specimen, &geom)?;
    if specimen.geometry() != geom {
        return Err(bad(
            "specimen.path",
            "imported slices do not match the [grid] section",
        ));
    }

    let solver = build_solver(&config, &geom, &params)?;
    let lattice = build_probe_lattice(&config, &geom, &solver)?;
    let probes = probe_subset(&config.probes, &lattice)?;

    let mut detectors = Vec::new();
    for (i, d) in config.detectors.iter().enumerate() {
        detectors.push((d.name.clone(), build_detector(d, i)?));
    }

    Ok(Prepared {
        geom,
        params,
        specimen,
        atoms,
        lattice,
        probes,
        solver,
        detectors,
        config,
    })
}

pub fn build_specimen(
    section: &SpecimenSection,
    geom: &GridGeometry,
) -> Result<(Specimen, Vec<AtomSpec>), CliError> {
    match section.source.as_str() {
        "synthetic" => {
            let eps = section
                .eps
                .ok_or_else(|| bad("specimen.eps", "required for synthetic specimens"))?;
            let n_slices = section
                .n_slices
                .ok_or_else(|| bad("specimen.n_slices", "required for synthetic specimens"))?;
            let atoms: Vec<AtomSpec> = section
                .atoms
                .iter()
                .map(|a| AtomSpec {
                    x: a.x,
                    y: a.y,
                    z: a.z,
                    amplitude: a.amplitude,
                    width: a.width,
                })
                .collect();
            let spec = synth_specimen(&atoms, geom, eps, n_slices)
                .map_err(|e| bad("specimen.atoms", e))?;
            Ok((spec, atoms))
        }
        "file" => {
            let path = section
                .path
                .as_ref()
                .ok_or_else(|| bad("specimen.path", "required for file specimens"))?;
            let spec = load_specimen(path).map_err(|e| bad("specimen.path", e))?;
            Ok((spec, Vec::new()))
        }
        other => Err(bad("specimen.source", format!("unknown source {other:?}"))),
    }
}

fn build_solver(
    config: &RunConfig,
    geom: &GridGeometry,
    params: &MicroscopeParams,
) -> Result<Solver, CliError> {
    let s = &config.solver;
    match s.kind.as_str() {
        "multislice" => {
            let ms = s.multislice.as_ref();
            let prop = match ms.map(|m| m.variant.as_str()).unwrap_or("fourier") {
                "fourier" => {
                    let mut p = PropagatorSpec::fourier();
                    p.bandwidth_limit = ms.map(|m| m.bandwidth_limit).unwrap_or(false);
                    p
                }
                "realspace" => {
                    let ms = ms.ok_or_else(|| {
                        bad("solver.multislice", "realspace variant needs k1 and k2")
                    })?;
                    let k1 = ms
                        .k1
                        .ok_or_else(|| bad("solver.multislice.k1", "required"))?;
                    let k2 = ms
                        .k2
                        .ok_or_else(|| bad("solver.multislice.k2", "required"))?;
                    let mut p = PropagatorSpec::realspace(k1, k2, ms.window.map(|w| (w[0], w[1])));
                    p.bandwidth_limit = ms.bandwidth_limit;
                    p
                }
                other => {
                    return Err(bad(
                        "solver.multislice.variant",
                        format!("unknown variant {other:?}"),
                    ))
                }
            };
            prop.validate(geom)
                .map_err(|e| bad("solver.multislice", e))?;
            Ok(Solver::Multislice { prop })
        }
        "prism" => {
            let p = s
                .prism
                .as_ref()
                .ok_or_else(|| bad("solver.prism", "missing [solver.prism] block"))?;
            if p.f == 0 {
                return Err(bad("solver.prism.f", "must be >= 1"));
            }
            Ok(Solver::Prism {
                f: p.f,
                crop: p.crop,
            })
        }
        "lma" => {
            let l = s
                .lma
                .as_ref()
                .ok_or_else(|| bad("solver.lma", "missing [solver.lma] block"))?;
            if l.f == 0 {
                return Err(bad("solver.lma.f", "must be >= 1"));
            }
            if l.l == 0 {
                return Err(bad("solver.lma.l", "must be >= 1"));
            }
            let kind = match l.wave.as_str() {
                "probe" => InputWaveKind::Probe,
                "trig_tensor" | "trig_radial" => {
                    let n = match l.trig_n {
                        Some(n) => n,
                        None => trig_degree_from_probe(params, geom.qx().max(geom.qy()))
                            .map_err(|e| bad("solver.lma.trig_n", e))?,
                    };
                    if l.wave == "trig_tensor" {
                        InputWaveKind::TrigTensor { n }
                    } else {
                        InputWaveKind::TrigRadial { n }
                    }
                }
                "gaussian" => InputWaveKind::Gaussian {
                    sigma: l
                        .gaussian_sigma
                        .unwrap_or_else(|| gaussian_sigma_from_probe(params)),
                },
                "pixel_delta" => InputWaveKind::PixelDelta,
                other => return Err(bad("solver.lma.wave", format!("unknown wave {other:?}"))),
            };
            kind.validate().map_err(|e| bad("solver.lma", e))?;
            let store_window = match l.store_window {
                Some(w) => (w[0], w[1]),
                None => ((geom.nx / l.f).max(1), (geom.ny / l.f).max(1)),
            };
            let strategy = match l.strategy.as_str() {
                "row_by_row" => PartitionStrategy::RowByRow,
                "rectangles" => PartitionStrategy::Rectangles,
                "greedy" => PartitionStrategy::Greedy,
                other => {
                    return Err(bad(
                        "solver.lma.strategy",
                        format!("unknown strategy {other:?}"),
                    ))
                }
            };
            Ok(Solver::Lma {
                kind,
                l: l.l,
                store_window,
                fit_window: l.fit_window.map(|w| (w[0], w[1])),
                memory_bound: l.memory_bound,
                strategy,
            })
        }
        other => Err(bad("solver.kind", format!("unknown solver {other:?}"))),
    }
}

fn build_probe_lattice(
    config: &RunConfig,
    geom: &GridGeometry,
    solver: &Solver,
) -> Result<LatticePair, CliError> {
    let counts = (config.probes.counts[0], config.probes.counts[1]);
    let (mode, input_counts, f) = match (&config.solver.lma, solver) {
        (Some(l), Solver::Lma { .. }) => {
            let mode = match l.lattice.as_str() {
                "aligned" => LatticeMode::Aligned,
                "half_shift" => LatticeMode::HalfShift,
                other => {
                    return Err(bad(
                        "solver.lma.lattice",
                        format!("unknown lattice mode {other:?}"),
                    ))
                }
            };
            let input = l.input_counts.map(|c| (c[0], c[1])).unwrap_or(counts);
            (mode, input, l.f)
        }
        // Other solvers only need the probe-position mapping.
        _ => (LatticeMode::Aligned, counts, 1),
    };
    build_lattices(geom, counts, input_counts, mode, f).map_err(|e| bad("probes.counts", e))
}

fn probe_subset(
    section: &ProbesSection,
    lattice: &LatticePair,
) -> Result<Vec<(usize, usize)>, CliError> {
    let counts = lattice.probe_counts();
    let x0 = section.x0.unwrap_or(0);
    let y0 = section.y0.unwrap_or(0);
    let width = section.width.unwrap_or(counts.0.saturating_sub(x0));
    let height = section.height.unwrap_or(counts.1.saturating_sub(y0));
    if width == 0 || height == 0 || x0 + width > counts.0 || y0 + height > counts.1 {
        return Err(bad(
            "probes",
            format!("subset {width}x{height} at ({x0}, {y0}) exceeds the {counts:?} lattice"),
        ));
    }
    Ok(lma_core::scheduler::probe_rect(
        lattice,
        (x0, y0),
        (width, height),
    ))
}

fn build_detector(d: &DetectorSection, index: usize) -> Result<DetectorConfig, CliError> {
    let field = |name: &str| format!("detectors[{index}].{name}");
    let need_f64 = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| bad(&field(name), format!("required for mode {:?}", d.mode)))
    };
    let need_usize = |v: Option<usize>, name: &str| {
        v.ok_or_else(|| bad(&field(name), format!("required for mode {:?}", d.mode)))
    };
    let cfg = match d.mode.as_str() {
        "2d" => DetectorConfig::TwoD {
            r1_mrad: need_f64(d.r1, "r1")?,
            r2_mrad: need_f64(d.r2, "r2")?,
        },
        "3d" => DetectorConfig::ThreeD {
            annuli: need_usize(d.annuli, "annuli")?,
            r_mrad: need_f64(d.r, "r")?,
        },
        "4d" => DetectorConfig::FourD {
            a_max: need_usize(d.a, "a")?,
            b_max: need_usize(d.b, "b")?,
            dx: need_f64(d.dx, "dx")?,
            dy: need_f64(d.dy, "dy")?,
        },
        other => return Err(bad(&field("mode"), format!("unknown mode {other:?}"))),
    };
    cfg.validate().map_err(|e| bad(&field("mode"), e))?;
    Ok(cfg)
}
