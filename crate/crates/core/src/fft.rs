//! Local multidimensional FFTs with orthonormal scaling.
//!
//! Power-of-two lengths use an iterative radix-2 transform; every other
//! length goes through the Bluestein chirp-z construction over a
//! power-of-two core, so arbitrary sizes are supported. Both directions
//! scale by 1/sqrt(n) per transformed dimension, making the transform
//! unitary (the adjoint equals the inverse). Twiddle, bit-reversal, and
//! chirp tables are cached per (length, direction) in thread-local storage,
//! since the same line lengths recur for every row of a tensor.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{strides, volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn reverse(self) -> Direction {
        match self {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

struct Radix2Plan {
    n: usize,
    bitrev: Vec<u32>,
    /// Twiddles for every stage, concatenated: stage of length `len`
    /// contributes `len/2` factors exp(sign*2*pi*i*k/len).
    twiddles: Vec<Complex64>,
}

impl Radix2Plan {
    fn new(n: usize, direction: Direction) -> Radix2Plan {
        debug_assert!(n.is_power_of_two());
        let mut bitrev = vec![0u32; n];
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j ^= bit;
            bitrev[i] = j as u32;
        }
        let sign = direction.sign();
        let mut twiddles = Vec::with_capacity(n.saturating_sub(1));
        let mut len = 2;
        while len <= n {
            let ang = sign * 2.0 * PI / len as f64;
            for k in 0..len / 2 {
                let a = ang * k as f64;
                twiddles.push(Complex64::new(a.cos(), a.sin()));
            }
            len <<= 1;
        }
        Radix2Plan { n, bitrev, twiddles }
    }

    /// Unnormalized in-place transform.
    fn run(&self, data: &mut [Complex64]) {
        let n = self.n;
        debug_assert_eq!(data.len(), n);
        if n <= 1 {
            return;
        }
        for i in 1..n {
            let j = self.bitrev[i] as usize;
            if i < j {
                data.swap(i, j);
            }
        }
        let mut len = 2;
        let mut toff = 0;
        while len <= n {
            let half = len / 2;
            let tw = &self.twiddles[toff..toff + half];
            let mut i = 0;
            while i < n {
                for k in 0..half {
                    let u = data[i + k];
                    let v = data[i + k + half] * tw[k];
                    data[i + k] = u + v;
                    data[i + k + half] = u - v;
                }
                i += len;
            }
            toff += half;
            len <<= 1;
        }
    }

    /// Unnormalized transform of every column of an `n x row_len` row-major
    /// panel at once: the butterflies stream over whole rows, which keeps
    /// strided tensor dimensions cache-friendly.
    fn run_panel(&self, data: &mut [Complex64], row_len: usize) {
        let n = self.n;
        debug_assert_eq!(data.len(), n * row_len);
        if n <= 1 {
            return;
        }
        for i in 1..n {
            let j = self.bitrev[i] as usize;
            if i < j {
                let (a, b) = data.split_at_mut(j * row_len);
                a[i * row_len..i * row_len + row_len].swap_with_slice(&mut b[..row_len]);
            }
        }
        let mut len = 2;
        let mut toff = 0;
        while len <= n {
            let half = len / 2;
            let tw = &self.twiddles[toff..toff + half];
            let mut i = 0;
            while i < n {
                for k in 0..half {
                    let w = tw[k];
                    let (upper, lower) = data.split_at_mut((i + k + half) * row_len);
                    let u = &mut upper[(i + k) * row_len..(i + k) * row_len + row_len];
                    let v = &mut lower[..row_len];
                    for c in 0..row_len {
                        let t = v[c] * w;
                        v[c] = u[c] - t;
                        u[c] += t;
                    }
                }
                i += len;
            }
            toff += half;
            len <<= 1;
        }
    }
}

/// Chirp factor exp(sign * i * pi * k^2 / n), with k^2 reduced mod 2n to keep
/// the angle accurate for large k.
fn chirp(k: usize, n: usize, sign: f64) -> Complex64 {
    let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
    let ang = sign * PI * k2 / n as f64;
    Complex64::new(ang.cos(), ang.sin())
}

struct BluesteinPlan {
    n: usize,
    m: usize,
    /// chirp(k, n, sign) for k < n.
    chirps: Vec<Complex64>,
    /// Forward-transformed padded conjugate-chirp kernel, with the core's
    /// final 1/m folded in.
    kernel_hat: Vec<Complex64>,
    core_fwd: Rc<Radix2Plan>,
    core_inv: Rc<Radix2Plan>,
}

impl BluesteinPlan {
    fn new(n: usize, direction: Direction, core_fwd: Rc<Radix2Plan>, core_inv: Rc<Radix2Plan>) -> BluesteinPlan {
        let sign = direction.sign();
        let m = (2 * n - 1).next_power_of_two();
        let chirps: Vec<Complex64> = (0..n).map(|k| chirp(k, n, sign)).collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..n {
            let c = chirps[k].conj();
            kernel[k] = c;
            if k != 0 {
                kernel[m - k] = c;
            }
        }
        core_fwd.run(&mut kernel);
        let inv_m = 1.0 / m as f64;
        for v in kernel.iter_mut() {
            *v *= inv_m;
        }
        BluesteinPlan { n, m, chirps, kernel_hat: kernel, core_fwd, core_inv }
    }

    /// Unnormalized DFT via the chirp convolution:
    /// X_k = chirp(k) * sum_j x_j chirp(j) conj(chirp(k - j)).
    fn run(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        debug_assert_eq!(data.len(), self.n);
        scratch.clear();
        scratch.resize(self.m, Complex64::new(0.0, 0.0));
        for (k, &x) in data.iter().enumerate() {
            scratch[k] = x * self.chirps[k];
        }
        self.core_fwd.run(scratch);
        for (a, &b) in scratch.iter_mut().zip(&self.kernel_hat) {
            *a *= b;
        }
        // unnormalized inverse of the core: conj-transform with swapped
        // direction, scaling folded into kernel_hat
        self.core_inv.run(scratch);
        for (k, out) in data.iter_mut().enumerate() {
            *out = scratch[k] * self.chirps[k];
        }
    }

    /// Column-wise transform of an `n x row_len` panel.
    fn run_panel(&self, data: &mut [Complex64], row_len: usize, scratch: &mut Vec<Complex64>) {
        debug_assert_eq!(data.len(), self.n * row_len);
        scratch.clear();
        scratch.resize(self.m * row_len, Complex64::new(0.0, 0.0));
        for k in 0..self.n {
            let c = self.chirps[k];
            let src = &data[k * row_len..(k + 1) * row_len];
            let dst = &mut scratch[k * row_len..(k + 1) * row_len];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * c;
            }
        }
        self.core_fwd.run_panel(scratch, row_len);
        for k in 0..self.m {
            let b = self.kernel_hat[k];
            for v in &mut scratch[k * row_len..(k + 1) * row_len] {
                *v *= b;
            }
        }
        self.core_inv.run_panel(scratch, row_len);
        for k in 0..self.n {
            let c = self.chirps[k];
            let src = &scratch[k * row_len..(k + 1) * row_len];
            let dst = &mut data[k * row_len..(k + 1) * row_len];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * c;
            }
        }
    }
}

enum LinePlan {
    Pow2(Rc<Radix2Plan>),
    Bluestein(Box<BluesteinPlan>),
}

impl LinePlan {
    fn run(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        match self {
            LinePlan::Pow2(p) => p.run(data),
            LinePlan::Bluestein(p) => p.run(data, scratch),
        }
    }

    fn run_panel(&self, data: &mut [Complex64], row_len: usize, scratch: &mut Vec<Complex64>) {
        match self {
            LinePlan::Pow2(p) => p.run_panel(data, row_len),
            LinePlan::Bluestein(p) => p.run_panel(data, row_len, scratch),
        }
    }
}

thread_local! {
    static LINE_PLANS: RefCell<HashMap<(usize, Direction), Rc<LinePlan>>> = RefCell::new(HashMap::new());
    static CORE_PLANS: RefCell<HashMap<(usize, Direction), Rc<Radix2Plan>>> = RefCell::new(HashMap::new());
}

fn core_plan(n: usize, direction: Direction) -> Rc<Radix2Plan> {
    CORE_PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((n, direction))
            .or_insert_with(|| Rc::new(Radix2Plan::new(n, direction)))
            .clone()
    })
}

fn line_plan(n: usize, direction: Direction) -> Rc<LinePlan> {
    LINE_PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((n, direction))
            .or_insert_with(|| {
                if n.is_power_of_two() {
                    Rc::new(LinePlan::Pow2(core_plan(n, direction)))
                } else {
                    let m = (2 * n - 1).next_power_of_two();
                    Rc::new(LinePlan::Bluestein(Box::new(BluesteinPlan::new(
                        n,
                        direction,
                        core_plan(m, direction),
                        core_plan(m, direction.reverse()),
                    ))))
                }
            })
            .clone()
    })
}

/// Orthonormal 1-d DFT, in place.
pub fn dft_1d(data: &mut [Complex64], direction: Direction) {
    let n = data.len();
    if n <= 1 {
        return;
    }
    let plan = line_plan(n, direction);
    let mut scratch = Vec::new();
    plan.run(data, &mut scratch);
    let scale = 1.0 / (n as f64).sqrt();
    for x in data.iter_mut() {
        *x *= scale;
    }
}

/// Orthonormal multidimensional DFT over the listed dimensions of a
/// row-major block.
pub fn local_fft(data: &mut [Complex64], shape: &[usize], dims: &[usize], direction: Direction) -> Result<()> {
    if data.len() != volume(shape) {
        return Err(Error::invalid(format!(
            "local_fft: buffer holds {} scalars but shape {:?} has volume {}",
            data.len(),
            shape,
            volume(shape)
        )));
    }
    for &d in dims {
        if d >= shape.len() {
            return Err(Error::invalid(format!(
                "local_fft: dimension {d} out of range for shape {shape:?}"
            )));
        }
    }
    if data.is_empty() {
        return Ok(());
    }
    let st = strides(shape);
    let mut scratch = Vec::new();
    for &d in dims {
        let n = shape[d];
        if n <= 1 {
            continue;
        }
        let plan = line_plan(n, direction);
        let scale = 1.0 / (n as f64).sqrt();
        let stride = st[d];
        let outer: usize = shape[..d].iter().product();
        let inner: usize = shape[d + 1..].iter().product();
        for o in 0..outer {
            let block = &mut data[o * n * inner..(o + 1) * n * inner];
            if stride == 1 {
                // contiguous lines (last dimension)
                for line in block.chunks_exact_mut(n) {
                    plan.run(line, &mut scratch);
                }
            } else {
                // all lines of this hyperplane at once, streaming over rows
                plan.run_panel(block, inner, &mut scratch);
            }
            for x in block.iter_mut() {
                *x *= scale;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force O(n^2) DFT with orthonormal scaling, the independent
    /// oracle for all transform lengths.
    fn naive_dft(input: &[Complex64], direction: Direction) -> Vec<Complex64> {
        let n = input.len();
        let sign = direction.sign();
        let scale = 1.0 / (n as f64).sqrt();
        (0..n)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, &x) in input.iter().enumerate() {
                    let ang = sign * 2.0 * PI * (k * j) as f64 / n as f64;
                    acc += x * Complex64::new(ang.cos(), ang.sin());
                }
                acc * scale
            })
            .collect()
    }

    fn hashed_signal(n: usize, seed: u64) -> Vec<Complex64> {
        (0..n)
            .map(|i| {
                Complex64::new(
                    crate::tensor::hashed_unit_f64(seed, 2 * i as u64),
                    crate::tensor::hashed_unit_f64(seed, 2 * i as u64 + 1),
                )
            })
            .collect()
    }

    fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_signal_concentrates_at_zero_frequency() {
        let mut data = vec![Complex64::new(1.0, 0.0); 4];
        dft_1d(&mut data, Direction::Forward);
        assert!((data[0] - Complex64::new(2.0, 0.0)).norm() < 1e-14);
        for &x in &data[1..] {
            assert!(x.norm() < 1e-14);
        }
    }

    #[test]
    fn delta_becomes_constant() {
        let mut data = vec![Complex64::new(0.0, 0.0); 8];
        data[0] = Complex64::new(1.0, 0.0);
        dft_1d(&mut data, Direction::Forward);
        let expect = 1.0 / 8f64.sqrt();
        for &x in &data {
            assert!((x - Complex64::new(expect, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn matches_naive_dft_for_all_lengths() {
        for n in [1usize, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 15, 16, 30, 60, 64] {
            let signal = hashed_signal(n, 7 + n as u64);
            for dir in [Direction::Forward, Direction::Inverse] {
                let mut got = signal.clone();
                dft_1d(&mut got, dir);
                let want = naive_dft(&signal, dir);
                assert!(
                    max_err(&got, &want) < 1e-11,
                    "length {n}, direction {dir:?}: err {}",
                    max_err(&got, &want)
                );
            }
        }
    }

    #[test]
    fn round_trip_length_60() {
        let signal = hashed_signal(60, 42);
        let mut data = signal.clone();
        dft_1d(&mut data, Direction::Forward);
        dft_1d(&mut data, Direction::Inverse);
        assert!(max_err(&data, &signal) < 1e-12);
    }

    #[test]
    fn unitarity_preserves_energy() {
        for n in [15usize, 16, 60] {
            let signal = hashed_signal(n, n as u64);
            let before: f64 = signal.iter().map(|x| x.norm_sqr()).sum();
            let mut data = signal;
            dft_1d(&mut data, Direction::Forward);
            let after: f64 = data.iter().map(|x| x.norm_sqr()).sum();
            assert!((before - after).abs() < 1e-12 * before.max(1.0));
        }
    }

    #[test]
    fn multidimensional_transform_is_separable() {
        // transforming dims {0} then {1} equals transforming {0,1} at once
        let shape = [6usize, 15];
        let n = volume(&shape);
        let signal: Vec<Complex64> = hashed_signal(n, 3);
        let mut joint = signal.clone();
        local_fft(&mut joint, &shape, &[0, 1], Direction::Forward).unwrap();
        let mut staged = signal;
        local_fft(&mut staged, &shape, &[0], Direction::Forward).unwrap();
        local_fft(&mut staged, &shape, &[1], Direction::Forward).unwrap();
        assert!(max_err(&joint, &staged) < 1e-12);
    }

    #[test]
    fn multidimensional_round_trip() {
        let shape = [4usize, 5, 6];
        let signal = hashed_signal(volume(&shape), 11);
        let mut data = signal.clone();
        local_fft(&mut data, &shape, &[0, 2], Direction::Forward).unwrap();
        local_fft(&mut data, &shape, &[0, 2], Direction::Inverse).unwrap();
        assert!(max_err(&data, &signal) < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_dimension() {
        let mut data = vec![Complex64::new(0.0, 0.0); 6];
        assert!(local_fft(&mut data, &[2, 3], &[2], Direction::Forward).is_err());
        assert!(local_fft(&mut data, &[2, 2], &[0], Direction::Forward).is_err());
    }
}
