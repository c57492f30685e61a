//! Memory-bounded pixel ordering: partition strategies, cost accounting and
//! local-change recompute planning.
//!
//! A partition splits the requested probe pixels into ordered sets whose
//! input-wave needs each fit in `M` resident propagated waves. Executing the
//! sets in order with an adjacent-set cache costs
//! `sum_j |I_j| - sum_j |I_j \cap I_{j+1}|` Multislice runs, which the
//! scheduled simulate driver reproduces exactly.

use std::collections::BTreeSet;

use crate::grid::wrapped_offset;
use crate::lma::{ApproxPlan, LatticePair};
use crate::optics::MicroscopeParams;
use crate::specimen::Specimen;
use crate::{Error, Result};

/// Ordered probe-pixel sets under a shared memory bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Probe lattice indices, grouped in execution order.
    pub sets: Vec<Vec<(usize, usize)>>,
    /// Maximum number of propagated input waves resident at once.
    pub memory_bound: usize,
}

/// How [`partition_build`] forms the sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Scanline order, cutting whenever the needs of the growing set would
    /// exceed the bound.
    RowByRow,
    /// Equal rectangles as large as the bound allows, tiled row-major.
    Rectangles,
    /// Grow from a start pixel, always appending the 8-neighbor of the last
    /// added pixel that enlarges the needs set the least.
    Greedy,
}

/// The input positions needed by a set of probes: the union of the probes'
/// neighbor sets.
pub fn neighbor_union(
    probes: &[(usize, usize)],
    plan: &ApproxPlan,
) -> Result<BTreeSet<(i64, i64)>> {
    let mut union = BTreeSet::new();
    for &(a, b) in probes {
        let (_, positions) = plan.for_probe_index(a, b)?;
        union.extend(positions);
    }
    Ok(union)
}

/// Total Multislice executions of a scheduled run: each set's needs, minus
/// the solutions shared with the immediately following set.
pub fn partition_cost(partition: &Partition, plan: &ApproxPlan) -> Result<usize> {
    let needs: Vec<BTreeSet<(i64, i64)>> = partition
        .sets
        .iter()
        .map(|set| neighbor_union(set, plan))
        .collect::<Result<_>>()?;
    let total: usize = needs.iter().map(|n| n.len()).sum();
    let reused: usize = needs
        .windows(2)
        .map(|w| w[0].intersection(&w[1]).count())
        .sum();
    Ok(total - reused)
}

/// Build a partition of `pixels` whose per-set needs respect `memory_bound`.
/// `seed` picks the greedy strategy's starting pixel and is ignored by the
/// other strategies.
pub fn partition_build(
    strategy: PartitionStrategy,
    pixels: &[(usize, usize)],
    plan: &ApproxPlan,
    memory_bound: usize,
    seed: (usize, usize),
) -> Result<Partition> {
    if memory_bound < plan.l_neighbors {
        return Err(Error::InvalidParam(format!(
            "memory bound {memory_bound} is below the per-probe neighbor count {}",
            plan.l_neighbors
        )));
    }
    if pixels.is_empty() {
        return Err(Error::InvalidParam("no probe pixels requested".into()));
    }
    let sets = match strategy {
        PartitionStrategy::RowByRow => build_row_by_row(pixels, plan, memory_bound)?,
        PartitionStrategy::Rectangles => build_rectangles(pixels, plan, memory_bound)?,
        PartitionStrategy::Greedy => build_greedy(pixels, plan, memory_bound, seed)?,
    };
    let partition = Partition { sets, memory_bound };
    // Every set must respect the bound regardless of strategy bookkeeping.
    for set in &partition.sets {
        let needs = neighbor_union(set, plan)?.len();
        debug_assert!(needs <= memory_bound);
        if needs > memory_bound {
            return Err(Error::InvalidParam(format!(
                "partition set needs {needs} waves, bound is {memory_bound}"
            )));
        }
    }
    Ok(partition)
}

fn scanline_sorted(pixels: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = pixels.to_vec();
    v.sort_unstable_by_key(|&(a, b)| (b, a));
    v.dedup();
    v
}

fn build_row_by_row(
    pixels: &[(usize, usize)],
    plan: &ApproxPlan,
    m: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let ordered = scanline_sorted(pixels);
    let mut sets = Vec::new();
    let mut cur: Vec<(usize, usize)> = Vec::new();
    let mut needs: BTreeSet<(i64, i64)> = BTreeSet::new();
    for p in ordered {
        let (_, positions) = plan.for_probe_index(p.0, p.1)?;
        let grown: BTreeSet<(i64, i64)> = needs
            .union(&positions.iter().copied().collect())
            .copied()
            .collect();
        if grown.len() <= m || cur.is_empty() {
            cur.push(p);
            needs = grown;
        } else {
            sets.push(std::mem::take(&mut cur));
            cur.push(p);
            needs = positions.into_iter().collect();
        }
    }
    if !cur.is_empty() {
        sets.push(cur);
    }
    Ok(sets)
}

fn build_rectangles(
    pixels: &[(usize, usize)],
    plan: &ApproxPlan,
    m: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let requested: BTreeSet<(usize, usize)> = pixels.iter().copied().collect();
    let (a0, a1) = match requested
        .iter()
        .map(|p| p.0)
        .min()
        .zip(requested.iter().map(|p| p.0).max())
    {
        Some((lo, hi)) => (lo, hi),
        None => return Err(Error::InvalidParam("no probe pixels requested".into())),
    };
    let b0 = requested.iter().map(|p| p.1).min().unwrap();
    let b1 = requested.iter().map(|p| p.1).max().unwrap();
    let (width, height) = (a1 - a0 + 1, b1 - b0 + 1);

    // Largest equal rectangle whose needs fit the bound, probed at the
    // request origin.
    let mut best = (1usize, 1usize);
    let mut best_area = 0usize;
    for h in 1..=height {
        for w in 1..=width {
            if w * h <= best_area {
                continue;
            }
            let block: Vec<(usize, usize)> = (0..h)
                .flat_map(|db| (0..w).map(move |da| (a0 + da, b0 + db)))
                .filter(|p| p.0 <= a1 && p.1 <= b1)
                .collect();
            if neighbor_union(&block, plan)?.len() <= m {
                best = (w, h);
                best_area = w * h;
            }
        }
    }
    let (w, h) = best;

    let mut sets = Vec::new();
    let mut tb = b0;
    while tb <= b1 {
        let mut ta = a0;
        while ta <= a1 {
            let tile: Vec<(usize, usize)> = requested
                .iter()
                .filter(|p| p.0 >= ta && p.0 < ta + w && p.1 >= tb && p.1 < tb + h)
                .copied()
                .collect();
            if !tile.is_empty() {
                // Alignment off the probed anchor can inflate a tile's needs;
                // split such tiles in half until they fit.
                let mut stack = vec![tile];
                while let Some(t) = stack.pop() {
                    if neighbor_union(&t, plan)?.len() <= m || t.len() == 1 {
                        sets.push(t);
                    } else {
                        let mut sorted = scanline_sorted(&t);
                        let tail = sorted.split_off(sorted.len() / 2);
                        stack.push(tail);
                        stack.push(sorted);
                    }
                }
            }
            ta += w;
        }
        tb += h;
    }
    Ok(sets)
}

fn build_greedy(
    pixels: &[(usize, usize)],
    plan: &ApproxPlan,
    m: usize,
    seed: (usize, usize),
) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut unassigned: BTreeSet<(usize, usize)> = pixels.iter().copied().collect();
    let first = if unassigned.contains(&seed) {
        seed
    } else {
        *unassigned.iter().next().unwrap()
    };

    let mut sets: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut start = Some(first);

    while let Some(s) = start.take() {
        unassigned.remove(&s);
        let (_, positions) = plan.for_probe_index(s.0, s.1)?;
        let mut cur = vec![s];
        let mut needs: BTreeSet<(i64, i64)> = positions.into_iter().collect();
        let mut last = s;

        loop {
            // Unassigned 8-neighbors of the last added pixel, in
            // deterministic (db, da) order.
            let mut candidates: Vec<(usize, usize)> = Vec::new();
            for db in -1i64..=1 {
                for da in -1i64..=1 {
                    if da == 0 && db == 0 {
                        continue;
                    }
                    let a = last.0 as i64 + da;
                    let b = last.1 as i64 + db;
                    if a < 0 || b < 0 {
                        continue;
                    }
                    let p = (a as usize, b as usize);
                    if unassigned.contains(&p) {
                        candidates.push(p);
                    }
                }
            }
            if candidates.is_empty() {
                // Dead end: close the set and restart from the first
                // unassigned pixel in scanline order.
                sets.push(std::mem::take(&mut cur));
                needs.clear();
                start = unassigned.iter().min_by_key(|&&(a, b)| (b, a)).copied();
                break;
            }
            let mut best: Option<((usize, i64, i64), (usize, usize), BTreeSet<(i64, i64)>)> = None;
            for cand in candidates {
                let (_, positions) = plan.for_probe_index(cand.0, cand.1)?;
                let grown: BTreeSet<(i64, i64)> = needs
                    .union(&positions.into_iter().collect())
                    .copied()
                    .collect();
                let key = (
                    grown.len(),
                    cand.1 as i64 - last.1 as i64,
                    cand.0 as i64 - last.0 as i64,
                );
                if best.as_ref().map(|(k, _, _)| key < *k).unwrap_or(true) {
                    best = Some((key, cand, grown));
                }
            }
            let (key, cand, grown) = best.unwrap();
            if key.0 > m {
                // The cheapest neighbor no longer fits: close the set and
                // continue from exactly that pixel.
                sets.push(std::mem::take(&mut cur));
                needs.clear();
                start = Some(cand);
                break;
            }
            unassigned.remove(&cand);
            cur.push(cand);
            needs = grown;
            last = cand;
        }
    }
    Ok(sets)
}

/// Pixel map of a partition for visual inspection: requested pixels carry
/// their 1-based set index, everything else 0. Row-major over the probe
/// lattice.
pub fn partition_index_map(partition: &Partition, probe_counts: (usize, usize)) -> Vec<u16> {
    let mut map = vec![0u16; probe_counts.0 * probe_counts.1];
    for (j, set) in partition.sets.iter().enumerate() {
        for &(a, b) in set {
            if a < probe_counts.0 && b < probe_counts.1 {
                map[b * probe_counts.0 + a] = (j + 1).min(u16::MAX as usize) as u16;
            }
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Recomputing local changes
// ---------------------------------------------------------------------------

/// Work to redo after a local specimen edit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecomputePlan {
    /// Grid pixels where the specimens differ.
    pub changed_pixels: Vec<(usize, usize)>,
    /// Probe lattice indices whose exit waves must be recomputed.
    pub probes_to_redo: Vec<(usize, usize)>,
    /// Input positions whose propagations must be redone.
    pub inputs_to_redo: Vec<(i64, i64)>,
    /// Dilation of the changed region (pixels per axis) from the beam
    /// spreading model.
    pub dilation: (i64, i64),
}

/// Per-slice beam spreading radius in Ångström: `N eps tan(alpha_spread)`,
/// with `alpha_spread = 2 alpha_max` unless overridden.
pub fn spreading_radius(
    spec: &Specimen,
    params: &MicroscopeParams,
    alpha_spread: Option<f64>,
) -> f64 {
    let alpha = alpha_spread.unwrap_or(2.0 * params.alpha_max);
    spec.n_slices() as f64 * spec.eps() * alpha.tan()
}

/// Plan the minimal redo set after replacing `old` with `new`: a probe must
/// be redone iff any of its input windows, dilated by the spreading radius,
/// touches a changed pixel; of those probes' inputs, exactly the touching
/// ones are re-propagated. Probes outside the plan therefore use only
/// unchanged propagated waves.
pub fn recompute_plan(
    old: &Specimen,
    new: &Specimen,
    plan: &ApproxPlan,
    probes: &[(usize, usize)],
    params: &MicroscopeParams,
    store_window: Option<(usize, usize)>,
    alpha_spread: Option<f64>,
) -> Result<RecomputePlan> {
    let geom = old.geometry();
    if geom != plan.lattice.geometry() {
        return Err(Error::GeometryMismatch(
            "plan and specimen grids differ".into(),
        ));
    }
    let changed = old.changed_pixels(new, 1e-12)?;
    let radius = spreading_radius(old, params, alpha_spread);
    let dilation = (
        (radius / geom.px()).ceil() as i64,
        (radius / geom.py()).ceil() as i64,
    );
    let window = store_window.unwrap_or((geom.nx, geom.ny));

    if changed.is_empty() {
        return Ok(RecomputePlan {
            changed_pixels: changed,
            probes_to_redo: Vec::new(),
            inputs_to_redo: Vec::new(),
            dilation,
        });
    }

    // Dilated-window overlap per unique input position.
    let mut overlap: std::collections::BTreeMap<(i64, i64), bool> =
        std::collections::BTreeMap::new();
    let mut probes_to_redo = Vec::new();
    let mut inputs_to_redo: BTreeSet<(i64, i64)> = BTreeSet::new();
    for &(a, b) in probes {
        let (_, positions) = plan.for_probe_index(a, b)?;
        let mut redo = false;
        for pos in &positions {
            let hit = *overlap
                .entry(*pos)
                .or_insert_with(|| window_touches_changed(*pos, window, dilation, &changed, &geom));
            redo = redo || hit;
        }
        if redo {
            probes_to_redo.push((a, b));
            inputs_to_redo.extend(positions.into_iter().filter(|p| overlap[p]));
        }
    }
    Ok(RecomputePlan {
        changed_pixels: changed,
        probes_to_redo,
        inputs_to_redo: inputs_to_redo.into_iter().collect(),
        dilation,
    })
}

fn window_touches_changed(
    pos: (i64, i64),
    window: (usize, usize),
    dilation: (i64, i64),
    changed: &[(usize, usize)],
    geom: &crate::grid::GridGeometry,
) -> bool {
    let lo_x = -((window.0 / 2) as i64) - dilation.0;
    let hi_x = (window.0 - window.0 / 2) as i64 - 1 + dilation.0;
    let lo_y = -((window.1 / 2) as i64) - dilation.1;
    let hi_y = (window.1 - window.1 / 2) as i64 - 1 + dilation.1;
    if (hi_x - lo_x + 1) >= geom.nx as i64 || (hi_y - lo_y + 1) >= geom.ny as i64 {
        return true;
    }
    changed.iter().any(|&(cx, cy)| {
        let dx = wrapped_offset(cx as i64, pos.0, geom.nx);
        let dy = wrapped_offset(cy as i64, pos.1, geom.ny);
        (lo_x..=hi_x).contains(&dx) && (lo_y..=hi_y).contains(&dy)
    })
}

/// Convenience: all lattice indices of a rectangular probe request.
pub fn probe_rect(
    lattice: &LatticePair,
    origin: (usize, usize),
    size: (usize, usize),
) -> Vec<(usize, usize)> {
    let counts = lattice.probe_counts();
    let mut out = Vec::with_capacity(size.0 * size.1);
    for b in origin.1..(origin.1 + size.1).min(counts.1) {
        for a in origin.0..(origin.0 + size.0).min(counts.0) {
            out.push((a, b));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::OpCounters;
    use crate::grid::GridGeometry;
    use crate::inputwaves::InputWaveKind;
    use crate::lma::{build_lattices, fit_coefficients, LatticeMode, LmaRun};
    use crate::multislice::PropagatorSpec;
    use crate::specimen::{synth_specimen, AtomSpec};

    fn params() -> MicroscopeParams {
        MicroscopeParams::new(0.0250793, -2000.0, 100.0, 0.026, 0.05).unwrap()
    }

    fn small_plan() -> ApproxPlan {
        let geom = GridGeometry::new(64, 64, 25.6, 25.6).unwrap();
        let lat = build_lattices(&geom, (16, 16), (16, 16), LatticeMode::HalfShift, 2).unwrap();
        fit_coefficients(
            &lat,
            &InputWaveKind::Gaussian { sigma: 0.482 },
            4,
            &params(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn cost_of_trivial_partition_is_union_size() {
        let plan = small_plan();
        let pixels = probe_rect(&plan.lattice, (0, 0), (6, 6));
        let p = Partition {
            sets: vec![pixels.clone()],
            memory_bound: 1000,
        };
        let union = neighbor_union(&pixels, &plan).unwrap();
        assert_eq!(partition_cost(&p, &plan).unwrap(), union.len());
    }

    #[test]
    fn repeated_set_costs_nothing_extra() {
        let plan = small_plan();
        let pixels = probe_rect(&plan.lattice, (0, 0), (4, 4));
        let single = Partition {
            sets: vec![pixels.clone()],
            memory_bound: 1000,
        };
        let double = Partition {
            sets: vec![pixels.clone(), pixels.clone()],
            memory_bound: 1000,
        };
        assert_eq!(
            partition_cost(&single, &plan).unwrap(),
            partition_cost(&double, &plan).unwrap()
        );
    }

    #[test]
    fn all_strategies_respect_bound_and_minimum_cost() {
        let plan = small_plan();
        let pixels = probe_rect(&plan.lattice, (2, 2), (8, 8));
        let union = neighbor_union(&pixels, &plan).unwrap().len();
        for strategy in [
            PartitionStrategy::RowByRow,
            PartitionStrategy::Rectangles,
            PartitionStrategy::Greedy,
        ] {
            for m in [plan.l_neighbors, 2 * plan.l_neighbors, 8 * plan.l_neighbors] {
                let part = partition_build(strategy, &pixels, &plan, m, (2, 2)).unwrap();
                let covered: BTreeSet<(usize, usize)> =
                    part.sets.iter().flatten().copied().collect();
                assert_eq!(covered, pixels.iter().copied().collect());
                for set in &part.sets {
                    assert!(neighbor_union(set, &plan).unwrap().len() <= m);
                }
                let cost = partition_cost(&part, &plan).unwrap();
                assert!(
                    cost >= union,
                    "{strategy:?} m={m}: cost {cost} < minimum {union}"
                );
            }
        }
    }

    #[test]
    fn generous_bound_gives_single_set() {
        let plan = small_plan();
        let pixels = probe_rect(&plan.lattice, (0, 0), (5, 5));
        let union = neighbor_union(&pixels, &plan).unwrap().len();
        for strategy in [PartitionStrategy::RowByRow, PartitionStrategy::Rectangles] {
            let part = partition_build(strategy, &pixels, &plan, union, (0, 0)).unwrap();
            assert_eq!(part.sets.len(), 1, "{strategy:?}");
            let cost = partition_cost(&part, &plan).unwrap();
            assert_eq!(cost, union);
        }
        // Greedy may split at walk dead-ends even under a generous bound;
        // the cost floor still holds.
        let part =
            partition_build(PartitionStrategy::Greedy, &pixels, &plan, union, (0, 0)).unwrap();
        assert!(partition_cost(&part, &plan).unwrap() >= union);
    }

    #[test]
    fn row_by_row_follows_scanlines() {
        let plan = small_plan();
        let pixels: Vec<(usize, usize)> = (0..6).map(|a| (a, 0)).collect();
        let part = partition_build(
            PartitionStrategy::RowByRow,
            &pixels,
            &plan,
            plan.l_neighbors + 2,
            (0, 0),
        )
        .unwrap();
        // Sets are contiguous runs in scanline order.
        let flat: Vec<(usize, usize)> = part.sets.iter().flatten().copied().collect();
        assert_eq!(flat, pixels);
    }

    #[test]
    fn bound_below_l_rejected() {
        let plan = small_plan();
        let pixels = probe_rect(&plan.lattice, (0, 0), (2, 2));
        assert!(partition_build(
            PartitionStrategy::RowByRow,
            &pixels,
            &plan,
            plan.l_neighbors - 1,
            (0, 0)
        )
        .is_err());
    }

    #[test]
    fn scheduled_run_is_bit_identical_and_cost_exact() {
        let geom = GridGeometry::new(64, 64, 25.6, 25.6).unwrap();
        let p = params();
        let atoms = [
            AtomSpec {
                x: 8.0,
                y: 9.0,
                z: 1.0,
                amplitude: 30.0,
                width: 0.5,
            },
            AtomSpec {
                x: 17.0,
                y: 13.0,
                z: 3.0,
                amplitude: 22.0,
                width: 0.4,
            },
        ];
        let spec = synth_specimen(&atoms, &geom, 2.0, 2).unwrap();
        let lat = build_lattices(&geom, (16, 16), (16, 16), LatticeMode::HalfShift, 2).unwrap();
        let plan =
            fit_coefficients(&lat, &InputWaveKind::Gaussian { sigma: 0.482 }, 4, &p, None).unwrap();
        let pixels = probe_rect(&lat, (3, 3), (6, 6));
        let run = LmaRun {
            spec: &spec,
            params: &p,
            plan: &plan,
            prop: PropagatorSpec::fourier(),
            store_window: Some((32, 32)),
        };
        let free = run.simulate(&pixels, None, &OpCounters::new()).unwrap();
        for strategy in [
            PartitionStrategy::RowByRow,
            PartitionStrategy::Rectangles,
            PartitionStrategy::Greedy,
        ] {
            let part =
                partition_build(strategy, &pixels, &plan, 2 * plan.l_neighbors, (3, 3)).unwrap();
            let counters = OpCounters::new();
            let scheduled = run.simulate(&pixels, Some(&part), &counters).unwrap();
            for (a, b) in free.iter().zip(&scheduled) {
                assert_eq!(
                    a.data(),
                    b.data(),
                    "{strategy:?}: scheduling changed values"
                );
            }
            let cost = partition_cost(&part, &plan).unwrap();
            assert_eq!(
                counters.snapshot().multislice_calls,
                cost as u64,
                "{strategy:?}: measured calls differ from the cost formula"
            );
        }
    }

    #[test]
    fn identical_specimens_need_no_recompute() {
        let geom = GridGeometry::new(64, 64, 25.6, 25.6).unwrap();
        let atoms = [AtomSpec {
            x: 8.0,
            y: 9.0,
            z: 1.0,
            amplitude: 30.0,
            width: 0.5,
        }];
        let spec = synth_specimen(&atoms, &geom, 2.0, 2).unwrap();
        let plan = small_plan();
        let probes = probe_rect(&plan.lattice, (0, 0), (16, 16));
        let rp = recompute_plan(
            &spec,
            &spec,
            &plan,
            &probes,
            &params(),
            Some((16, 16)),
            None,
        )
        .unwrap();
        assert!(rp.changed_pixels.is_empty());
        assert!(rp.probes_to_redo.is_empty());
        assert!(rp.inputs_to_redo.is_empty());
    }

    #[test]
    fn single_atom_change_stays_local() {
        let geom = GridGeometry::new(64, 64, 25.6, 25.6).unwrap();
        let p = params();
        let base = vec![
            AtomSpec {
                x: 6.0,
                y: 6.0,
                z: 1.0,
                amplitude: 30.0,
                width: 0.3,
            },
            AtomSpec {
                x: 19.0,
                y: 18.0,
                z: 3.0,
                amplitude: 25.0,
                width: 0.3,
            },
        ];
        let mut edited = base.clone();
        edited[0].amplitude = 45.0;
        let old = synth_specimen(&base, &geom, 2.0, 2).unwrap();
        let new = synth_specimen(&edited, &geom, 2.0, 2).unwrap();
        let plan = small_plan();
        let probes = probe_rect(&plan.lattice, (0, 0), (16, 16));
        let rp = recompute_plan(&old, &new, &plan, &probes, &p, Some((16, 16)), None).unwrap();
        assert!(!rp.probes_to_redo.is_empty());
        let total_inputs = plan.lattice.subsampled_len();
        assert!(
            rp.inputs_to_redo.len() * 2 < total_inputs,
            "{} of {total_inputs} inputs redone",
            rp.inputs_to_redo.len()
        );
        assert!(
            rp.probes_to_redo.len() * 2 < probes.len(),
            "{} of {} probes redone",
            rp.probes_to_redo.len(),
            probes.len()
        );
        // Probes outside the plan must not use any redone input.
        let redone: BTreeSet<(i64, i64)> = rp.inputs_to_redo.iter().copied().collect();
        let flagged: BTreeSet<(usize, usize)> = rp.probes_to_redo.iter().copied().collect();
        for &(a, b) in &probes {
            if flagged.contains(&(a, b)) {
                continue;
            }
            let (_, positions) = plan.for_probe_index(a, b).unwrap();
            assert!(positions.iter().all(|pos| !redone.contains(pos)));
        }
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let geom_a = GridGeometry::new(64, 64, 25.6, 25.6).unwrap();
        let geom_b = GridGeometry::new(32, 32, 12.8, 12.8).unwrap();
        let a = synth_specimen(&[], &geom_a, 2.0, 2).unwrap();
        let b = synth_specimen(&[], &geom_b, 2.0, 2).unwrap();
        let plan = small_plan();
        assert!(recompute_plan(&a, &b, &plan, &[(0, 0)], &params(), None, None).is_err());
    }
}
