//! Genome-attached annotations: fixed-width pseudorandom differentiae stored
//! either in a growable chronological column or a fixed-size surface buffer.
//!
//! Counter convention: `counter` is the number of `deposit` calls. A column
//! performs an implicit rank-0 deposit at creation, so a column at counter
//! `c` holds the retained subset of ranks `0..=c` (its most recent rank is
//! `c`); a surface at counter `c` has deposited ranks `0..c` over its
//! pre-randomized buffer.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::retention::{
    enumerate_retained, pick_deposition_site, surface_retained, ColumnUpdatePlan, RetentionError,
    RetentionPolicy, SurfaceSchedule,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("unsupported differentia width {0} (expected 1, 8, 32, or 64 bits)")]
    BadWidth(u8),
    #[error(transparent)]
    Retention(#[from] RetentionError),
    #[error("differentia width mismatch: {0} vs {1} bits")]
    WidthMismatch(u8, u8),
}

/// Differentia width in bits; one of 1, 8, 32, 64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DifferentiaWidth(u8);

impl DifferentiaWidth {
    pub fn new(bits: u8) -> Result<Self, AnnotationError> {
        match bits {
            1 | 8 | 32 | 64 => Ok(DifferentiaWidth(bits)),
            other => Err(AnnotationError::BadWidth(other)),
        }
    }

    pub fn bits(&self) -> u8 {
        self.0
    }

    pub fn mask(&self, value: u64) -> u64 {
        if self.0 == 64 {
            value
        } else {
            value & ((1u64 << self.0) - 1)
        }
    }

    /// Probability that two independent draws collide: `2^-bits`.
    pub fn collision_probability(&self) -> f64 {
        (-(self.0 as f64)).exp2()
    }

    /// Draws one differentia value from `rng`, masked to width.
    pub fn draw(&self, rng: &mut impl RngCore) -> u64 {
        self.mask(rng.next_u64())
    }
}

/// Fixed-width differentia values, bit-packed for width 1 (8 per byte,
/// earlier sites in more-significant bits) and big-endian byte lanes for
/// widths 8/32/64 — site 0 always serializes first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DifferentiaStore {
    width: DifferentiaWidth,
    len: usize,
    bytes: Vec<u8>,
}

impl DifferentiaStore {
    pub fn new(width: DifferentiaWidth, len: usize) -> Self {
        let bits = len * width.bits() as usize;
        DifferentiaStore {
            width,
            len,
            bytes: vec![0u8; (bits + 7) / 8],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> DifferentiaWidth {
        self.width
    }

    pub fn get(&self, i: usize) -> u64 {
        assert!(i < self.len);
        match self.width.bits() {
            1 => ((self.bytes[i / 8] >> (7 - i % 8)) & 1) as u64,
            w => {
                let nbytes = w as usize / 8;
                let mut v = 0u64;
                for b in 0..nbytes {
                    v = (v << 8) | self.bytes[i * nbytes + b] as u64;
                }
                v
            }
        }
    }

    pub fn set(&mut self, i: usize, value: u64) {
        assert!(i < self.len);
        let value = self.width.mask(value);
        match self.width.bits() {
            1 => {
                let bit = 7 - i % 8;
                if value == 1 {
                    self.bytes[i / 8] |= 1 << bit;
                } else {
                    self.bytes[i / 8] &= !(1 << bit);
                }
            }
            w => {
                let nbytes = w as usize / 8;
                for b in 0..nbytes {
                    self.bytes[i * nbytes + b] = (value >> (8 * (nbytes - 1 - b))) as u8;
                }
            }
        }
    }

    pub fn push(&mut self, value: u64) {
        let i = self.len;
        self.len += 1;
        let bits = self.len * self.width.bits() as usize;
        self.bytes.resize((bits + 7) / 8, 0);
        self.set(i, value);
    }

    /// Packed bytes, padded with zero bits in the final byte if width 1 and
    /// the length is not a multiple of 8.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn from_values(width: DifferentiaWidth, values: &[u64]) -> Self {
        let mut s = DifferentiaStore::new(width, values.len());
        for (i, &v) in values.iter().enumerate() {
            s.set(i, v);
        }
        s
    }

    pub fn from_bytes(
        width: DifferentiaWidth,
        len: usize,
        bytes: Vec<u8>,
    ) -> Result<Self, AnnotationError> {
        let bits = len * width.bits() as usize;
        if bytes.len() != (bits + 7) / 8 {
            return Err(AnnotationError::BadWidth(width.bits()));
        }
        Ok(DifferentiaStore { width, len, bytes })
    }

    pub fn values(&self) -> Vec<u64> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StorageKind {
    Column,
    Surface,
}

/// A hereditary-stratigraphy annotation: policy, width, storage, counter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Annotation {
    Column(ColumnAnnotation),
    Surface(SurfaceAnnotation),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnAnnotation {
    policy: RetentionPolicy,
    width: DifferentiaWidth,
    counter: u64,
    entries: DifferentiaStore,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SurfaceAnnotation {
    policy: RetentionPolicy,
    width: DifferentiaWidth,
    counter: u64,
    buffer: DifferentiaStore,
}

impl Annotation {
    /// Creates a fresh annotation. Columns perform the implicit rank-0
    /// deposit; surfaces pre-fill every site with seeded pseudorandom
    /// differentiae (pre-fill values are valid differentiae but are not
    /// mapped to any rank until overwritten).
    pub fn create(
        policy: RetentionPolicy,
        width: DifferentiaWidth,
        storage: StorageKind,
        capacity: u64,
        seed: u64,
    ) -> Result<Annotation, AnnotationError> {
        policy.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match storage {
            StorageKind::Column => {
                let mut entries = DifferentiaStore::new(width, 0);
                entries.push(width.draw(&mut rng));
                Ok(Annotation::Column(ColumnAnnotation {
                    policy,
                    width,
                    counter: 0,
                    entries,
                }))
            }
            StorageKind::Surface => {
                // Surface validity (power of two >= 8, capacity == size).
                surface_retained(policy, capacity, 0)?;
                let mut buffer = DifferentiaStore::new(width, capacity as usize);
                for i in 0..capacity as usize {
                    buffer.set(i, width.draw(&mut rng));
                }
                Ok(Annotation::Surface(SurfaceAnnotation {
                    policy,
                    width,
                    counter: 0,
                    buffer,
                }))
            }
        }
    }

    pub fn policy(&self) -> RetentionPolicy {
        match self {
            Annotation::Column(c) => c.policy,
            Annotation::Surface(s) => s.policy,
        }
    }

    pub fn width(&self) -> DifferentiaWidth {
        match self {
            Annotation::Column(c) => c.width,
            Annotation::Surface(s) => s.width,
        }
    }

    pub fn counter(&self) -> u64 {
        match self {
            Annotation::Column(c) => c.counter,
            Annotation::Surface(s) => s.counter,
        }
    }

    pub fn storage(&self) -> StorageKind {
        match self {
            Annotation::Column(_) => StorageKind::Column,
            Annotation::Surface(_) => StorageKind::Surface,
        }
    }

    /// Surface site count, if surface-stored.
    pub fn surface_size(&self) -> Option<u64> {
        match self {
            Annotation::Column(_) => None,
            Annotation::Surface(s) => Some(s.buffer.len() as u64),
        }
    }

    /// Rank of the next deposit.
    pub fn next_rank(&self) -> u64 {
        match self {
            Annotation::Column(c) => c.counter + 1,
            Annotation::Surface(s) => s.counter,
        }
    }

    /// Deposits one differentia, advancing the counter. Columns discard the
    /// entries their schedule drops (shift-down); surfaces overwrite exactly
    /// the site returned by site selection for the old counter value.
    pub fn deposit(&mut self, value: u64) {
        match self {
            Annotation::Column(c) => {
                let plan = ColumnUpdatePlan::for_counter(c.policy, c.counter);
                c.deposit_planned(value, &plan);
            }
            Annotation::Surface(s) => {
                let site = pick_deposition_site(s.policy, s.counter, s.buffer.len() as u64)
                    .expect("surface annotation was validated at creation");
                s.deposit_at(value, site);
            }
        }
    }

    /// Entries as `(rank, value)` pairs, ascending by rank — computed purely
    /// from `(policy, counter, capacity)`. For surfaces this replays the
    /// deterministic site schedule; hot paths should share a
    /// [`SurfaceSchedule`] and use [`Annotation::retained_ranks_with`].
    pub fn retained_ranks(&self) -> Vec<(u64, u64)> {
        match self {
            Annotation::Column(c) => c.retained_ranks(),
            Annotation::Surface(s) => {
                let schedule =
                    SurfaceSchedule::new(s.policy, s.buffer.len() as u64, s.counter)
                        .expect("surface annotation was validated at creation");
                s.retained_ranks_with(&schedule)
            }
        }
    }

    /// As [`Annotation::retained_ranks`], reusing a precomputed schedule
    /// (surfaces only; columns ignore it).
    pub fn retained_ranks_with(&self, schedule: &SurfaceSchedule) -> Vec<(u64, u64)> {
        match self {
            Annotation::Column(c) => c.retained_ranks(),
            Annotation::Surface(s) => s.retained_ranks_with(schedule),
        }
    }

    /// Raw store (column entries in chronological order, or the full surface
    /// buffer including pre-fill).
    pub fn store(&self) -> &DifferentiaStore {
        match self {
            Annotation::Column(c) => &c.entries,
            Annotation::Surface(s) => &s.buffer,
        }
    }

    /// Rebuilds an annotation from serialized parts. `counter` and the store
    /// length must be mutually consistent for columns.
    pub fn from_parts(
        policy: RetentionPolicy,
        storage: StorageKind,
        counter: u64,
        store: DifferentiaStore,
    ) -> Result<Annotation, AnnotationError> {
        policy.validate()?;
        match storage {
            StorageKind::Column => {
                let expect = enumerate_retained(policy, counter + 1).len();
                if store.len() != expect {
                    return Err(AnnotationError::Retention(RetentionError::InvalidPolicy(
                        format!(
                            "column {policy} at counter {counter} must hold {expect} entries, got {}",
                            store.len()
                        ),
                    )));
                }
                Ok(Annotation::Column(ColumnAnnotation {
                    policy,
                    width: store.width(),
                    counter,
                    entries: store,
                }))
            }
            StorageKind::Surface => {
                surface_retained(policy, store.len() as u64, 0)?;
                Ok(Annotation::Surface(SurfaceAnnotation {
                    policy,
                    width: store.width(),
                    counter,
                    buffer: store,
                }))
            }
        }
    }
}

impl ColumnAnnotation {
    /// Deposit using a per-generation shared plan (all members of a
    /// synchronized population at the same counter share one plan).
    pub fn deposit_planned(&mut self, value: u64, plan: &ColumnUpdatePlan) {
        let value = self.width.mask(value);
        if plan.removed_indices.is_empty() {
            self.entries.push(value);
        } else {
            let old = self.entries.values();
            let mut kept = Vec::with_capacity(plan.new_len);
            let mut skip = plan.removed_indices.iter().peekable();
            for (i, v) in old.into_iter().enumerate() {
                if skip.peek() == Some(&&i) {
                    skip.next();
                } else {
                    kept.push(v);
                }
            }
            kept.push(value);
            debug_assert_eq!(kept.len(), plan.new_len);
            self.entries = DifferentiaStore::from_values(self.width, &kept);
        }
        self.counter += 1;
    }

    pub fn retained_ranks(&self) -> Vec<(u64, u64)> {
        enumerate_retained(self.policy, self.counter + 1)
            .into_iter()
            .enumerate()
            .map(|(i, r)| (r, self.entries.get(i)))
            .collect()
    }
}

impl SurfaceAnnotation {
    /// Deposit to a precomputed site (always `pick_deposition_site` for the
    /// old counter value).
    pub fn deposit_at(&mut self, value: u64, site: u64) {
        self.buffer.set(site as usize, self.width.mask(value));
        self.counter += 1;
    }

    pub fn retained_ranks_with(&self, schedule: &SurfaceSchedule) -> Vec<(u64, u64)> {
        schedule
            .live_entries(self.counter)
            .into_iter()
            .map(|(rank, site)| (rank, self.buffer.get(site as usize)))
            .collect()
    }
}

/// Checks two annotations for comparable configuration (same width).
pub fn check_comparable(a: &Annotation, b: &Annotation) -> Result<(), AnnotationError> {
    if a.width() != b.width() {
        return Err(AnnotationError::WidthMismatch(
            a.width().bits(),
            b.width().bits(),
        ));
    }
    Ok(())
}

/// Convenience for tests and tools: deposit `count` times with differentiae
/// drawn from a seeded stream.
pub fn deposit_many(annotation: &mut Annotation, count: u64, seed: u64) {
    let width = annotation.width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        annotation.deposit(width.draw(&mut rng));
    }
}
