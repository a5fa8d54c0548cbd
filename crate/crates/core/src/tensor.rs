//! Distributed tensors: a global shape plus a partition and the worker-local
//! row-major buffer, for real64 or complex128 scalars.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::partition::{Partition, RegionBox};

/// Scalar kind stored in files and payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real64,
    Complex128,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::Real64 => 0,
            Dtype::Complex128 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Real64),
            1 => Ok(Dtype::Complex128),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::Real64 => 8,
            Dtype::Complex128 => 16,
        }
    }
}

/// Contiguous block of scalars exchanged between workers.
#[derive(Debug, Clone)]
pub enum Payload {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Real(v) => v.len(),
            Payload::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random value in [-0.5, 0.5) addressed by (seed, index).
pub fn hashed_unit_f64(seed: u64, index: u64) -> f64 {
    let bits = splitmix64(seed ^ splitmix64(index));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64) - 0.5
}

/// Element type of distributed tensors: `f64` or `Complex64`.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const DTYPE: Dtype;

    fn zero() -> Self;
    fn one() -> Self;
    fn conj(self) -> Self;
    fn abs_sq(self) -> f64;
    fn scale(self, f: f64) -> Self;
    /// conj(a) * b, promoted to complex so both scalar kinds share one
    /// inner-product code path.
    fn inner_term(a: Self, b: Self) -> Complex64;
    fn into_payload(v: Vec<Self>) -> Payload;
    fn from_payload(p: Payload) -> Result<Vec<Self>>;
    fn append_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_bytes(bytes: &[u8]) -> Self;
    /// Deterministic pseudo-random value addressed by (seed, index).
    fn hashed_unit(seed: u64, index: u64) -> Self;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::Real64;

    fn zero() -> Self {
        0.0
    }

    fn one() -> Self {
        1.0
    }

    fn conj(self) -> Self {
        self
    }

    fn abs_sq(self) -> f64 {
        self * self
    }

    fn scale(self, f: f64) -> Self {
        self * f
    }

    fn inner_term(a: Self, b: Self) -> Complex64 {
        Complex64::new(a * b, 0.0)
    }

    fn into_payload(v: Vec<Self>) -> Payload {
        Payload::Real(v)
    }

    fn from_payload(p: Payload) -> Result<Vec<Self>> {
        match p {
            Payload::Real(v) => Ok(v),
            Payload::Complex(_) => Err(Error::protocol("expected real payload, got complex")),
        }
    }

    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn hashed_unit(seed: u64, index: u64) -> Self {
        hashed_unit_f64(seed, index)
    }
}

impl Scalar for Complex64 {
    const DTYPE: Dtype = Dtype::Complex128;

    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }

    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }

    fn conj(self) -> Self {
        Complex64::conj(&self)
    }

    fn abs_sq(self) -> f64 {
        self.norm_sqr()
    }

    fn scale(self, f: f64) -> Self {
        self * f
    }

    fn inner_term(a: Self, b: Self) -> Complex64 {
        Complex64::conj(&a) * b
    }

    fn into_payload(v: Vec<Self>) -> Payload {
        Payload::Complex(v)
    }

    fn from_payload(p: Payload) -> Result<Vec<Self>> {
        match p {
            Payload::Complex(v) => Ok(v),
            Payload::Real(_) => Err(Error::protocol("expected complex payload, got real")),
        }
    }

    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.re.to_le_bytes());
        out.extend_from_slice(&self.im.to_le_bytes());
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        Complex64::new(
            f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            f64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        )
    }

    fn hashed_unit(seed: u64, index: u64) -> Self {
        Complex64::new(
            hashed_unit_f64(seed, 2 * index),
            hashed_unit_f64(seed, 2 * index + 1),
        )
    }
}

pub fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Copy `region` (global coordinates) from a row-major buffer covering
/// `src_box` into one covering `dst_box`. The region must lie inside both.
pub fn copy_region<T: Copy>(
    src: &[T],
    src_box: &RegionBox,
    dst: &mut [T],
    dst_box: &RegionBox,
    region: &RegionBox,
) {
    debug_assert!(region.contained_in(src_box) && region.contained_in(dst_box));
    if region.is_empty() {
        return;
    }
    let ndim = region.ndim();
    let src_strides = strides(&src_box.shape());
    let dst_strides = strides(&dst_box.shape());
    let rshape = region.shape();
    let run = rshape[ndim - 1];

    // odometer over every dimension but the last; the last is a contiguous run
    let mut idx = vec![0usize; ndim - 1];
    loop {
        let mut soff = 0;
        let mut doff = 0;
        for d in 0..ndim - 1 {
            let g = region.range(d).start + idx[d];
            soff += (g - src_box.range(d).start) * src_strides[d];
            doff += (g - dst_box.range(d).start) * dst_strides[d];
        }
        soff += (region.range(ndim - 1).start - src_box.range(ndim - 1).start) * src_strides[ndim - 1];
        doff += (region.range(ndim - 1).start - dst_box.range(ndim - 1).start) * dst_strides[ndim - 1];
        dst[doff..doff + run].copy_from_slice(&src[soff..soff + run]);

        let mut d = ndim - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < rshape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Copy `region` out of a buffer covering `src_box` into a tight buffer.
pub fn extract_region<T: Scalar>(src: &[T], src_box: &RegionBox, region: &RegionBox) -> Vec<T> {
    let mut out = vec![T::zero(); region.volume()];
    copy_region(src, src_box, &mut out, region, region);
    out
}

/// A tensor with a global shape, distributed over a partition; this worker
/// holds the row-major scalars of `local_box`. For partition-consistent
/// tensors the box equals the worker's `local_region`; broadcast results
/// instead carry replicated boxes that span copied dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistTensor<T: Scalar> {
    global_shape: Vec<usize>,
    partition: Partition,
    local_box: RegionBox,
    local: Vec<T>,
}

impl<T: Scalar> DistTensor<T> {
    /// Wrap a worker-local buffer for the block this rank owns under the
    /// partition. Ranks beyond the partition hold empty tensors.
    pub fn from_local(partition: &Partition, global_shape: &[usize], rank: usize, local: Vec<T>) -> Result<Self> {
        let local_box = partition.region_or_empty(rank, global_shape)?;
        if local.len() != local_box.volume() {
            return Err(Error::invalid(format!(
                "local buffer holds {} scalars but region has volume {}",
                local.len(),
                local_box.volume()
            )));
        }
        Ok(DistTensor {
            global_shape: global_shape.to_vec(),
            partition: partition.clone(),
            local_box,
            local,
        })
    }

    pub fn zeros(partition: &Partition, global_shape: &[usize], rank: usize) -> Result<Self> {
        let local_box = partition.region_or_empty(rank, global_shape)?;
        Ok(DistTensor {
            global_shape: global_shape.to_vec(),
            partition: partition.clone(),
            local: vec![T::zero(); local_box.volume()],
            local_box,
        })
    }

    /// Build the worker's block by evaluating `f` at each global multi-index.
    pub fn from_fn(
        partition: &Partition,
        global_shape: &[usize],
        rank: usize,
        f: impl Fn(&[usize]) -> T,
    ) -> Result<Self> {
        let local_box = partition.region_or_empty(rank, global_shape)?;
        let mut local = Vec::with_capacity(local_box.volume());
        let mut idx: Vec<usize> = local_box.starts();
        if !local_box.is_empty() {
            let ndim = local_box.ndim();
            'fill: loop {
                local.push(f(&idx));
                let mut d = ndim;
                loop {
                    if d == 0 {
                        break 'fill;
                    }
                    d -= 1;
                    idx[d] += 1;
                    if idx[d] < local_box.range(d).stop {
                        break;
                    }
                    idx[d] = local_box.range(d).start;
                }
            }
        }
        Ok(DistTensor {
            global_shape: global_shape.to_vec(),
            partition: partition.clone(),
            local_box,
            local,
        })
    }

    /// Slice the worker's block out of a full global buffer (test helper and
    /// single-worker ingestion path).
    pub fn from_global(partition: &Partition, global_shape: &[usize], rank: usize, full: &[T]) -> Result<Self> {
        if full.len() != volume(global_shape) {
            return Err(Error::invalid("global buffer does not match global shape"));
        }
        let local_box = partition.region_or_empty(rank, global_shape)?;
        let local = extract_region(full, &RegionBox::full(global_shape), &local_box);
        Ok(DistTensor {
            global_shape: global_shape.to_vec(),
            partition: partition.clone(),
            local_box,
            local,
        })
    }

    /// Wrap an explicitly-boxed block (used by broadcast, whose outputs span
    /// copied dimensions rather than the partition's blocks).
    pub fn from_parts(
        partition: &Partition,
        global_shape: &[usize],
        local_box: RegionBox,
        local: Vec<T>,
    ) -> Result<Self> {
        if local.len() != local_box.volume() {
            return Err(Error::invalid("local buffer does not match its box"));
        }
        Ok(DistTensor {
            global_shape: global_shape.to_vec(),
            partition: partition.clone(),
            local_box,
            local,
        })
    }

    pub fn global_shape(&self) -> &[usize] {
        &self.global_shape
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn local_box(&self) -> &RegionBox {
        &self.local_box
    }

    pub fn local(&self) -> &[T] {
        &self.local
    }

    pub fn local_mut(&mut self) -> &mut [T] {
        &mut self.local
    }

    pub fn into_local(self) -> Vec<T> {
        self.local
    }

    /// Whether this worker's box is exactly its partition block.
    pub fn is_partition_consistent(&self, rank: usize) -> Result<bool> {
        Ok(self.local_box == self.partition.region_or_empty(rank, &self.global_shape)?)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> DistTensor<U> {
        DistTensor {
            global_shape: self.global_shape.clone(),
            partition: self.partition.clone(),
            local_box: self.local_box.clone(),
            local: self.local.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise sum; both tensors must share layout.
    pub fn add_elementwise(&self, other: &DistTensor<T>) -> Result<DistTensor<T>> {
        if self.global_shape != other.global_shape || self.local_box != other.local_box {
            return Err(Error::invalid("add_elementwise: layout mismatch"));
        }
        let mut out = self.clone();
        for (o, &x) in out.local.iter_mut().zip(&other.local) {
            *o += x;
        }
        Ok(out)
    }

    pub fn scale_in_place(&mut self, f: f64) {
        for x in self.local.iter_mut() {
            *x = x.scale(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn copy_region_moves_sub_blocks() {
        // 4x4 source, copy the center 2x2 into a 2x2 destination buffer
        let src: Vec<i32> = (0..16).collect();
        let src_box = RegionBox::full(&[4, 4]);
        let region = RegionBox::new(vec![
            crate::partition::IndexRange { start: 1, stop: 3 },
            crate::partition::IndexRange { start: 1, stop: 3 },
        ]);
        let mut dst = vec![0i32; 4];
        copy_region(&src, &src_box, &mut dst, &region, &region);
        assert_eq!(dst, vec![5, 6, 9, 10]);
    }

    #[test]
    fn from_fn_fills_global_indices() {
        let p = Partition::new(&[2, 1]).unwrap();
        let t = DistTensor::<f64>::from_fn(&p, &[4, 3], 1, |idx| (idx[0] * 3 + idx[1]) as f64).unwrap();
        assert_eq!(t.local(), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let t0 = DistTensor::<f64>::from_fn(&p, &[4, 3], 0, |idx| (idx[0] * 3 + idx[1]) as f64).unwrap();
        assert_eq!(t0.local(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn from_global_matches_from_fn() {
        let p = Partition::new(&[3]).unwrap();
        let full: Vec<f64> = (0..7).map(|i| i as f64).collect();
        for rank in 0..3 {
            let a = DistTensor::from_global(&p, &[7], rank, &full).unwrap();
            let b = DistTensor::<f64>::from_fn(&p, &[7], rank, |idx| idx[0] as f64).unwrap();
            assert_eq!(a.local(), b.local());
        }
    }

    #[test]
    fn hashed_unit_is_deterministic_and_bounded() {
        for i in 0..1000u64 {
            let v = hashed_unit_f64(42, i);
            assert!((-0.5..0.5).contains(&v));
            assert_eq!(v, hashed_unit_f64(42, i));
        }
        assert_ne!(hashed_unit_f64(1, 0), hashed_unit_f64(2, 0));
    }
}
