//! Subcommand drivers: simulate, compare, probe-approx, partition-report,
//! recompute-demo and the crossover report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use lma_core::counters::{
    crossover_min_f, t_lma_fourier, t_multislice_fourier, t_multislice_realspace, t_prism,
    CounterSnapshot, OpCounters,
};
use lma_core::detect::{
    assemble_image, detect, export_pgm, load_image, save_image, write_pgm16, DetectorConfig,
    STEMImage,
};
use lma_core::grid::{rel_error_scalar, ComplexField, Norm};
use lma_core::lma::{fit_coefficients, probe_approx_report, save_plan, ApproxPlan, LmaRun};
use lma_core::multislice::{PropagatorSpec, PropagatorVariant, SolverContext};
use lma_core::optics::build_probe;
use lma_core::prism::{build_frequency_set, prism_simulate};
use lma_core::scheduler::{
    neighbor_union, partition_build, partition_cost, partition_index_map, recompute_plan,
    Partition, PartitionStrategy,
};
use lma_core::specimen::synth_specimen;

use crate::config::{Prepared, Solver};
use crate::CliError;

fn run_error(e: lma_core::Error) -> CliError {
    CliError::Run(e.to_string())
}

fn io_error(e: std::io::Error) -> CliError {
    CliError::Run(format!("io: {e}"))
}

fn greedy_seed(prepared: &Prepared) -> (usize, usize) {
    let counts = prepared.lattice.probe_counts();
    let s = prepared.config.seed as usize;
    (s % counts.0, (s / counts.0) % counts.1)
}

/// Exit waves plus the bookkeeping needed for detector assembly and the
/// counter report.
struct SolveOutput {
    exits: Vec<ComplexField>,
    counters: CounterSnapshot,
    modeled_calls: u64,
    modeled_flops: f64,
    plan: Option<ApproxPlan>,
}

fn solve(prepared: &Prepared, verbose: bool) -> Result<SolveOutput, CliError> {
    let counters = OpCounters::new();
    let geom = prepared.geom;
    let n_slices = prepared.specimen.n_slices();
    let n_probes = prepared.probes.len();
    match &prepared.solver {
        Solver::Multislice { prop } => {
            let ctx = SolverContext::new(&prepared.specimen, &prepared.params, prop)
                .map_err(run_error)?;
            let exits: Vec<ComplexField> = prepared
                .probes
                .par_iter()
                .map(|&(a, b)| {
                    let p = prepared.lattice.probe_position(a, b);
                    let probe = build_probe(p, &prepared.params, &geom)?;
                    ctx.solve(&probe, &counters)
                })
                .collect::<lma_core::Result<_>>()
                .map_err(run_error)?;
            let modeled_flops = n_probes as f64
                * match prop.variant {
                    PropagatorVariant::Fourier => t_multislice_fourier(n_slices, geom.nx, geom.ny),
                    PropagatorVariant::RealSpace { k1, k2, window } => {
                        let (wx, wy) = window.unwrap_or((geom.nx, geom.ny));
                        t_multislice_realspace(n_slices, wx, wy, k1, k2)
                    }
                };
            Ok(SolveOutput {
                exits,
                counters: counters.snapshot(),
                modeled_calls: n_probes as u64,
                modeled_flops,
                plan: None,
            })
        }
        Solver::Prism { f, crop } => {
            let positions: Vec<(i64, i64)> = prepared
                .probes
                .iter()
                .map(|&(a, b)| prepared.lattice.probe_position(a, b))
                .collect();
            let patches = prism_simulate(
                &prepared.specimen,
                &prepared.params,
                *f,
                &positions,
                *crop,
                &counters,
            )
            .map_err(run_error)?;
            let exits = patches.into_iter().map(|p| p.field).collect();
            let fset = build_frequency_set(&geom, &prepared.params, *f).map_err(run_error)?;
            Ok(SolveOutput {
                exits,
                counters: counters.snapshot(),
                modeled_calls: fset.len() as u64,
                modeled_flops: t_prism(fset.len(), n_probes, n_slices, geom.nx, geom.ny, *f),
                plan: None,
            })
        }
        Solver::Lma {
            kind,
            l,
            store_window,
            fit_window,
            memory_bound,
            strategy,
        } => {
            let t0 = Instant::now();
            let plan = fit_coefficients(&prepared.lattice, kind, *l, &prepared.params, *fit_window)
                .map_err(run_error)?;
            if verbose {
                let (eu, sup) = plan.max_errors();
                eprintln!(
                    "fit: {} representatives in {:?}; worst errors euclid {eu:.3e} sup {sup:.3e}",
                    plan.reps.len(),
                    t0.elapsed()
                );
            }
            let run = LmaRun {
                spec: &prepared.specimen,
                params: &prepared.params,
                plan: &plan,
                prop: PropagatorSpec::fourier(),
                store_window: Some(*store_window),
            };
            let schedule: Option<Partition> = match memory_bound {
                Some(m) => Some(
                    partition_build(
                        *strategy,
                        &prepared.probes,
                        &plan,
                        *m,
                        greedy_seed(prepared),
                    )
                    .map_err(run_error)?,
                ),
                None => None,
            };
            let needed = run.needed_inputs(&prepared.probes).map_err(run_error)?;
            let exits = run
                .simulate(&prepared.probes, schedule.as_ref(), &counters)
                .map_err(run_error)?;
            let modeled_calls = match &schedule {
                Some(p) => partition_cost(p, &plan).map_err(run_error)? as u64,
                None => needed.len() as u64,
            };
            Ok(SolveOutput {
                exits,
                counters: counters.snapshot(),
                modeled_calls,
                modeled_flops: t_lma_fourier(
                    needed.len(),
                    n_probes,
                    *l,
                    n_slices,
                    geom.nx,
                    geom.ny,
                    store_window.0,
                    store_window.1,
                ),
                plan: Some(plan),
            })
        }
    }
}

fn counter_report(prepared: &Prepared, out: &SolveOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "solver {}", prepared.config.solver.kind);
    let _ = writeln!(s, "probes {}", prepared.probes.len());
    let _ = writeln!(s, "slices {}", prepared.specimen.n_slices());
    let _ = writeln!(s, "{}", out.counters);
    let _ = writeln!(s, "modeled_multislice_calls {}", out.modeled_calls);
    let _ = writeln!(
        s,
        "modeled_fft_count {}",
        2 * prepared.specimen.n_slices() as u64 * out.counters.multislice_calls
    );
    let _ = writeln!(s, "modeled_total_flops {:.6e}", out.modeled_flops);
    s
}

/// `simulate`: run the configured solver, write images, counters and (for
/// LMA) the fitted plan with its error table.
pub fn simulate(prepared: &Prepared, out_dir: &Path, verbose: bool) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(io_error)?;
    let t0 = Instant::now();
    let out = solve(prepared, verbose)?;

    let counts = prepared.lattice.probe_counts();
    for (name, cfg) in &prepared.detectors {
        let outputs: Vec<((usize, usize), Vec<f64>)> = prepared
            .probes
            .par_iter()
            .zip(&out.exits)
            .map(|(&p, exit)| detect(exit, cfg, prepared.params.lambda).map(|d| (p, d.values)))
            .collect::<lma_core::Result<_>>()
            .map_err(run_error)?;
        let image = assemble_image(&outputs, counts, cfg.channels(), None).map_err(run_error)?;
        save_image(out_dir.join(format!("{name}.lmaimg")), &image).map_err(run_error)?;
        if cfg.channels() == 1 {
            export_pgm(out_dir.join(format!("{name}.pgm")), &image, 0).map_err(run_error)?;
        }
    }

    std::fs::write(out_dir.join("counters.txt"), counter_report(prepared, &out))
        .map_err(io_error)?;

    if let Some(plan) = &out.plan {
        save_plan(out_dir.join("plan.lmaplan"), plan).map_err(run_error)?;
        let mut table = String::from("rep_x,rep_y,error_euclid,error_sup\n");
        for rep in &plan.reps {
            let _ = writeln!(
                table,
                "{},{},{},{}",
                rep.rep.0, rep.rep.1, rep.fit_error_euclid, rep.fit_error_sup
            );
        }
        std::fs::write(out_dir.join("fit_errors.csv"), table).map_err(io_error)?;
    }

    println!(
        "simulate: {} probes, {} detectors, {} multislice calls (modeled {}) in {:?} -> {}",
        prepared.probes.len(),
        prepared.detectors.len(),
        out.counters.multislice_calls,
        out.modeled_calls,
        t0.elapsed(),
        out_dir.display()
    );
    Ok(())
}

/// `compare`: relative errors between same-named images of two run outputs.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<(), CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir_a)
        .map_err(io_error)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".lmaimg"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Config(format!(
            "no .lmaimg files under {}",
            dir_a.display()
        )));
    }
    println!("{:<24} {:>14} {:>14}", "image", "rel_euclid", "rel_sup");
    for name in names {
        let a = load_image(dir_a.join(&name)).map_err(run_error)?;
        let b_path = dir_b.join(&name);
        if !b_path.exists() {
            println!("{name:<24} missing in {}", dir_b.display());
            continue;
        }
        let b = load_image(b_path).map_err(run_error)?;
        let eu = rel_error_scalar(&a.data, &b.data, Norm::Euclidean).map_err(run_error)?;
        let sup = rel_error_scalar(&a.data, &b.data, Norm::Supremum).map_err(run_error)?;
        println!("{name:<24} {eu:>14.6e} {sup:>14.6e}");
    }
    Ok(())
}

/// `probe-approx`: fit-error rows over ranges of f and L.
pub fn probe_approx(
    prepared: &Prepared,
    out_dir: &Path,
    f_list: &[usize],
    l_list: &[usize],
) -> Result<(), CliError> {
    let Solver::Lma {
        kind, fit_window, ..
    } = &prepared.solver
    else {
        return Err(CliError::Config(
            "probe-approx needs solver.kind = \"lma\"".into(),
        ));
    };
    let lma = prepared
        .config
        .solver
        .lma
        .as_ref()
        .expect("lma solver block");
    let mode = match lma.lattice.as_str() {
        "aligned" => lma_core::lma::LatticeMode::Aligned,
        _ => lma_core::lma::LatticeMode::HalfShift,
    };
    let counts = prepared.lattice.probe_counts();
    let input_counts = lma.input_counts.map(|c| (c[0], c[1])).unwrap_or(counts);
    let rows = probe_approx_report(
        &prepared.geom,
        &prepared.params,
        counts,
        input_counts,
        mode,
        kind,
        f_list,
        l_list,
        *fit_window,
    )
    .map_err(run_error)?;
    let mut csv = String::from("f,l,error_euclid,error_sup\n");
    println!(
        "{:>4} {:>6} {:>14} {:>14}",
        "f", "L", "rel_euclid", "rel_sup"
    );
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.f, r.l, r.error_euclid, r.error_sup);
        println!(
            "{:>4} {:>6} {:>14.6e} {:>14.6e}",
            r.f, r.l, r.error_euclid, r.error_sup
        );
    }
    std::fs::create_dir_all(out_dir).map_err(io_error)?;
    let path = out_dir.join("probe_approx.csv");
    std::fs::write(&path, csv).map_err(io_error)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// `partition-report`: cost of the three strategies at the configured bound,
/// with set-index maps for inspection.
pub fn partition_report(
    prepared: &Prepared,
    out_dir: &Path,
    bounds: &[usize],
) -> Result<(), CliError> {
    let Solver::Lma {
        kind,
        l,
        fit_window,
        ..
    } = &prepared.solver
    else {
        return Err(CliError::Config(
            "partition-report needs solver.kind = \"lma\"".into(),
        ));
    };
    let plan = fit_coefficients(&prepared.lattice, kind, *l, &prepared.params, *fit_window)
        .map_err(run_error)?;
    let minimum = neighbor_union(&prepared.probes, &plan)
        .map_err(run_error)?
        .len();
    std::fs::create_dir_all(out_dir).map_err(io_error)?;
    let mut report = format!("minimum_multislice_calls {minimum}\n");
    println!("minimum multislice calls T_P = {minimum}");
    for &m in bounds {
        for (tag, strategy) in [
            ("row_by_row", PartitionStrategy::RowByRow),
            ("rectangles", PartitionStrategy::Rectangles),
            ("greedy", PartitionStrategy::Greedy),
        ] {
            let partition =
                partition_build(strategy, &prepared.probes, &plan, m, greedy_seed(prepared))
                    .map_err(run_error)?;
            let cost = partition_cost(&partition, &plan).map_err(run_error)?;
            let line = format!(
                "strategy {tag} memory_bound {m} sets {} cost {cost}",
                partition.sets.len()
            );
            println!("{line}");
            let _ = writeln!(report, "{line}");
            let counts = prepared.lattice.probe_counts();
            let map = partition_index_map(&partition, counts);
            let mut w = std::io::BufWriter::new(
                std::fs::File::create(out_dir.join(format!("partition_{tag}_m{m}.pgm")))
                    .map_err(io_error)?,
            );
            write_pgm16(&mut w, counts.0, counts.1, &map).map_err(run_error)?;
        }
    }
    std::fs::write(out_dir.join("partition_report.txt"), report).map_err(io_error)?;
    Ok(())
}

/// `recompute-demo`: apply the configured atom edit, plan the partial redo,
/// execute it and verify against a full fresh run.
pub fn recompute_demo(prepared: &Prepared, out_dir: &Path) -> Result<(), CliError> {
    let Solver::Lma {
        kind,
        l,
        store_window,
        fit_window,
        ..
    } = &prepared.solver
    else {
        return Err(CliError::Config(
            "recompute-demo needs solver.kind = \"lma\"".into(),
        ));
    };
    let edit = prepared
        .config
        .recompute
        .as_ref()
        .ok_or_else(|| CliError::Config("recompute-demo needs a [recompute] section".into()))?;
    if prepared.atoms.is_empty() {
        return Err(CliError::Config(
            "recompute-demo needs a synthetic specimen with atoms".into(),
        ));
    }
    if edit.atom_index >= prepared.atoms.len() {
        return Err(CliError::Config(format!(
            "recompute.atom_index {} out of {} atoms",
            edit.atom_index,
            prepared.atoms.len()
        )));
    }
    let mut edited = prepared.atoms.clone();
    let a = &mut edited[edit.atom_index];
    if let Some(v) = edit.amplitude {
        a.amplitude = v;
    }
    if let Some(v) = edit.width {
        a.width = v;
    }
    if let Some(v) = edit.x {
        a.x = v;
    }
    if let Some(v) = edit.y {
        a.y = v;
    }
    if let Some(v) = edit.z {
        a.z = v;
    }
    let new_spec = synth_specimen(
        &edited,
        &prepared.geom,
        prepared.specimen.eps(),
        prepared.specimen.n_slices(),
    )
    .map_err(run_error)?;

    let plan = fit_coefficients(&prepared.lattice, kind, *l, &prepared.params, *fit_window)
        .map_err(run_error)?;
    let store = Some(*store_window);
    let base_run = LmaRun {
        spec: &prepared.specimen,
        params: &prepared.params,
        plan: &plan,
        prop: PropagatorSpec::fourier(),
        store_window: store,
    };

    // Base simulation, keeping the propagated waves.
    let t_base = Instant::now();
    let base_counters = OpCounters::new();
    let needed = base_run
        .needed_inputs(&prepared.probes)
        .map_err(run_error)?;
    let mut cache = base_run
        .propagate_set(&needed, &base_counters)
        .map_err(run_error)?;
    let base_exits = base_run
        .combine_probes(&cache, &prepared.probes, &base_counters)
        .map_err(run_error)?;
    let base_time = t_base.elapsed();

    // Plan and apply the partial update.
    let rp = recompute_plan(
        &prepared.specimen,
        &new_spec,
        &plan,
        &prepared.probes,
        &prepared.params,
        store,
        edit.alpha_spread,
    )
    .map_err(run_error)?;
    let new_run = LmaRun {
        spec: &new_spec,
        ..base_run
    };
    let t_partial = Instant::now();
    let partial_counters = OpCounters::new();
    let redo: BTreeSet<(i64, i64)> = rp.inputs_to_redo.iter().copied().collect();
    cache.extend(
        new_run
            .propagate_set(&redo, &partial_counters)
            .map_err(run_error)?,
    );
    let redo_exits = new_run
        .combine_probes(&cache, &rp.probes_to_redo, &partial_counters)
        .map_err(run_error)?;
    let partial_time = t_partial.elapsed();

    // Full fresh oracle.
    let t_full = Instant::now();
    let full_counters = OpCounters::new();
    let full_exits = new_run
        .simulate(&prepared.probes, None, &full_counters)
        .map_err(run_error)?;
    let full_time = t_full.elapsed();

    // Merge per detector and verify.
    std::fs::create_dir_all(out_dir).map_err(io_error)?;
    let counts = prepared.lattice.probe_counts();
    let detectors: Vec<(String, DetectorConfig)> = if prepared.detectors.is_empty() {
        vec![(
            "bf".into(),
            DetectorConfig::TwoD {
                r1_mrad: 0.0,
                r2_mrad: 15.0,
            },
        )]
    } else {
        prepared.detectors.clone()
    };
    let mut worst = 0.0f64;
    for (name, cfg) in &detectors {
        let image_of = |probes: &[(usize, usize)],
                        exits: &[ComplexField],
                        prior: Option<&STEMImage>|
         -> Result<STEMImage, CliError> {
            let outputs: Vec<((usize, usize), Vec<f64>)> = probes
                .iter()
                .zip(exits)
                .map(|(&p, e)| detect(e, cfg, prepared.params.lambda).map(|d| (p, d.values)))
                .collect::<lma_core::Result<_>>()
                .map_err(run_error)?;
            assemble_image(&outputs, counts, cfg.channels(), prior).map_err(run_error)
        };
        let base_img = image_of(&prepared.probes, &base_exits, None)?;
        let merged = image_of(&rp.probes_to_redo, &redo_exits, Some(&base_img))?;
        let fresh = image_of(&prepared.probes, &full_exits, None)?;
        let err =
            rel_error_scalar(&merged.data, &fresh.data, Norm::Euclidean).map_err(run_error)?;
        worst = worst.max(err);
        save_image(out_dir.join(format!("{name}_recomputed.lmaimg")), &merged)
            .map_err(run_error)?;
        println!("detector {name}: partial vs full rel error {err:.3e}");
    }
    if worst > 1e-9 {
        return Err(CliError::Run(format!(
            "partial recompute deviates from the fresh run: {worst:.3e}"
        )));
    }
    println!(
        "recompute-demo: {} of {} inputs and {} of {} probes redone; multislice calls {} -> {}; \
         base {:?}, partial {:?}, full rerun {:?}",
        rp.inputs_to_redo.len(),
        plan.lattice.subsampled_len(),
        rp.probes_to_redo.len(),
        prepared.probes.len(),
        full_counters.snapshot().multislice_calls,
        partial_counters.snapshot().multislice_calls,
        base_time,
        partial_time,
        full_time
    );
    Ok(())
}

/// `crossover`: the closed-form interpolation factor from which the
/// real-space variant is modeled cheaper than the Fourier variant.
pub fn crossover(x: usize, y: usize, k1: usize, k2: usize) -> Result<(), CliError> {
    if x == 0 || y == 0 || k1 == 0 || k2 == 0 {
        return Err(CliError::Config(
            "crossover needs positive dimensions".into(),
        ));
    }
    let xy = (x * y) as f64;
    let k1k2 = (k1 * k2) as f64;
    let f = crossover_min_f(xy, k1k2);
    let threshold = (1.0 + k1k2) / (2.0 + 2.0 * xy.log2());
    println!("grid {x}x{y}, kernel {k1}x{k2}: f^2 >= {threshold:.4}, minimal integer f = {f}");
    // Per-slice propagation costs at the crossover, window reduced by f.
    let fu = f as usize;
    let per_slice_fourier = t_multislice_fourier(1, x, y);
    let per_slice_real = t_multislice_realspace(1, x / fu, y / fu, k1, k2);
    println!(
        "per-slice propagation at f = {f}: fourier (full grid) {per_slice_fourier:.3e} flops, \
         realspace ({}x{} window) {per_slice_real:.3e} flops",
        x / fu,
        y / fu
    );
    Ok(())
}

pub fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad {what} entry {t:?}")))
        })
        .collect()
}

pub fn resolve_out_dir(prepared: &Prepared, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| prepared.config.out_dir.clone())
}
