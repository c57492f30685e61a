//! Operation counters and the floating-point cost model for the three
//! solvers.
//!
//! Counters are incremented by the solvers as they run and can be compared
//! against the modeled operation counts; logarithms in the model are base 2
//! (one FFT of length n costs ~n log2 n butterflies).

use std::sync::atomic::{AtomicU64, Ordering};

/// Monotone operation counters, shared between concurrent workers.
#[derive(Debug, Default)]
pub struct OpCounters {
    multislice_calls: AtomicU64,
    fft_count: AtomicU64,
    pointwise_mul_count: AtomicU64,
    convolution_mac_count: AtomicU64,
    /// Multiply-accumulates spent forming the output linear combinations
    /// (PRISM reconstruction, LMA phase 2).
    combine_mac_count: AtomicU64,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_multislice_call(&self) {
        self.multislice_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_ffts(&self, n: u64) {
        self.fft_count.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_pointwise_muls(&self, n: u64) {
        self.pointwise_mul_count.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_convolution_macs(&self, n: u64) {
        self.convolution_mac_count.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_combine_macs(&self, n: u64) {
        self.combine_mac_count.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            multislice_calls: self.multislice_calls.load(Ordering::Relaxed),
            fft_count: self.fft_count.load(Ordering::Relaxed),
            pointwise_mul_count: self.pointwise_mul_count.load(Ordering::Relaxed),
            convolution_mac_count: self.convolution_mac_count.load(Ordering::Relaxed),
            combine_mac_count: self.combine_mac_count.load(Ordering::Relaxed),
        }
    }
}

/// A plain copy of the counter values at one point in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub multislice_calls: u64,
    pub fft_count: u64,
    pub pointwise_mul_count: u64,
    pub convolution_mac_count: u64,
    pub combine_mac_count: u64,
}

impl std::fmt::Display for CounterSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "multislice_calls      {}", self.multislice_calls)?;
        writeln!(f, "fft_count             {}", self.fft_count)?;
        writeln!(f, "pointwise_mul_count   {}", self.pointwise_mul_count)?;
        writeln!(f, "convolution_mac_count {}", self.convolution_mac_count)?;
        write!(f, "combine_mac_count     {}", self.combine_mac_count)
    }
}

/// Modeled cost of one Fourier-variant Multislice solve on an `x` by `y`
/// grid with `n_slices` slices: `N (2XY + 2XY log2(XY))`.
pub fn t_multislice_fourier(n_slices: usize, x: usize, y: usize) -> f64 {
    let xy = (x * y) as f64;
    n_slices as f64 * (2.0 * xy + 2.0 * xy * xy.log2())
}

/// Modeled cost of one real-space-convolution Multislice solve with a
/// `k1` by `k2` kernel: `N (XY + XY K1 K2)`.
pub fn t_multislice_realspace(n_slices: usize, x: usize, y: usize, k1: usize, k2: usize) -> f64 {
    let xy = (x * y) as f64;
    n_slices as f64 * (xy + xy * (k1 * k2) as f64)
}

/// Modeled cost of a PRISM run: propagation of the plane-wave set plus the
/// cropped reconstruction for every probe.
pub fn t_prism(
    n_plane_waves: usize,
    n_probes: usize,
    n_slices: usize,
    x: usize,
    y: usize,
    f: usize,
) -> f64 {
    n_plane_waves as f64 * t_multislice_fourier(n_slices, x, y)
        + n_probes as f64 * n_plane_waves as f64 * (x * y) as f64 / (f * f) as f64
}

/// Modeled cost of an LMA run with Fourier-variant propagation on the full
/// grid and combination over `x_store` by `y_store` stored windows.
#[allow(clippy::too_many_arguments)]
pub fn t_lma_fourier(
    n_input_waves: usize,
    n_probes: usize,
    l_neighbors: usize,
    n_slices: usize,
    x: usize,
    y: usize,
    x_store: usize,
    y_store: usize,
) -> f64 {
    n_input_waves as f64 * t_multislice_fourier(n_slices, x, y)
        + n_probes as f64 * l_neighbors as f64 * (x_store * y_store) as f64
}

/// Modeled cost of an LMA run with real-space propagation on the reduced
/// window.
#[allow(clippy::too_many_arguments)]
pub fn t_lma_realspace(
    n_input_waves: usize,
    n_probes: usize,
    l_neighbors: usize,
    n_slices: usize,
    x_window: usize,
    y_window: usize,
    k1: usize,
    k2: usize,
) -> f64 {
    n_input_waves as f64 * t_multislice_realspace(n_slices, x_window, y_window, k1, k2)
        + n_probes as f64 * l_neighbors as f64 * (x_window * y_window) as f64
}

/// Smallest interpolation factor for which the real-space LMA variant is
/// modeled cheaper than the Fourier variant (windows reduced by `f` in both
/// directions): `f^2 >= (1 + K1 K2) / (2 + 2 log2(XY))`.
pub fn crossover_min_f(xy_pixels: f64, k1k2: f64) -> u32 {
    let threshold = (1.0 + k1k2) / (2.0 + 2.0 * xy_pixels.log2());
    let mut f = 1u32;
    while (f as f64) * (f as f64) < threshold {
        f += 1;
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_accumulate() {
        let c = OpCounters::new();
        c.add_multislice_call();
        c.add_multislice_call();
        c.add_ffts(4);
        c.add_pointwise_muls(100);
        let s = c.snapshot();
        assert_eq!(s.multislice_calls, 2);
        assert_eq!(s.fft_count, 4);
        assert_eq!(s.pointwise_mul_count, 100);
        assert_eq!(s.convolution_mac_count, 0);
    }

    #[test]
    fn multislice_model_values() {
        // 2 slices on 4x4: N(2*16 + 2*16*4) = 2*(32+128) = 320.
        assert_eq!(t_multislice_fourier(2, 4, 4), 320.0);
        // N(XY + XY*K1K2) = 2*(16 + 16*9) = 320.
        assert_eq!(t_multislice_realspace(2, 4, 4, 3, 3), 320.0);
    }

    #[test]
    fn crossover_at_experiment_scale() {
        // 2048^2 pixels and a 25x25 kernel: the real-space variant wins from
        // f = 4 onward.
        let f = crossover_min_f(2048.0 * 2048.0, 625.0);
        assert_eq!(f, 4);
        // Sanity on both sides of the threshold.
        let threshold = (1.0 + 625.0) / (2.0 + 2.0 * (2048.0f64 * 2048.0).log2());
        assert!(3.0 * 3.0 < threshold);
        assert!(4.0 * 4.0 >= threshold);
    }

    #[test]
    fn crossover_trivial_cases() {
        assert_eq!(crossover_min_f(1024.0, 1.0), 1);
        assert!(crossover_min_f(256.0, 10_000.0) > 1);
    }
}
