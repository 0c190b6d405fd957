//! Retention policies: which deposition ranks a bounded (or unbounded)
//! annotation keeps as it grows, plus surface site selection.
//!
//! A schedule is a pure function of `(policy, generation_count)`. For capped
//! policies the schedule additionally satisfies *monotone refinement*: moving
//! from `G` to `G+1` inserts exactly rank `G` and removes at most one retained
//! rank (two for the hybrid union), so a column can follow the schedule by
//! discarding only, and a surface by overwriting exactly one site.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Smallest supported surface buffer.
pub const MIN_SURFACE_SIZE: u64 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetentionError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policy `{0}` is unbounded and cannot drive a surface")]
    UnboundedSurface(String),
    #[error("surface size {size} incompatible with policy `{policy}`: {reason}")]
    SurfaceSize {
        policy: String,
        size: u64,
        reason: String,
    },
}

/// A retention policy together with its resolution/capacity parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RetentionPolicy {
    /// Retain every rank.
    KeepAll,
    /// Retain multiples of `r` (plus the newest rank); bounded absolute gap.
    FixedResolution(u64),
    /// Gap at a retained rank bounded by a fraction of its time-ago.
    RecencyProportional(u64),
    /// At most `n` ranks, evenly spread over all history.
    SteadyCapped(u64),
    /// At most `n` ranks, density proportional to recency.
    TiltedCapped(u64),
    /// At most `n` ranks, half steady and half tilted.
    HybridCapped(u64),
}

impl RetentionPolicy {
    /// Capacity for capped policies, `None` for unbounded ones.
    pub fn capacity(&self) -> Option<u64> {
        match *self {
            RetentionPolicy::SteadyCapped(n)
            | RetentionPolicy::TiltedCapped(n)
            | RetentionPolicy::HybridCapped(n) => Some(n),
            _ => None,
        }
    }

    pub fn is_capped(&self) -> bool {
        self.capacity().is_some()
    }

    /// Validates the parameter range for this policy.
    pub fn validate(&self) -> Result<(), RetentionError> {
        let bad = |msg: &str| Err(RetentionError::InvalidPolicy(format!("{self}: {msg}")));
        match *self {
            RetentionPolicy::KeepAll => Ok(()),
            RetentionPolicy::FixedResolution(r) | RetentionPolicy::RecencyProportional(r) => {
                if r == 0 {
                    bad("resolution must be >= 1")
                } else {
                    Ok(())
                }
            }
            RetentionPolicy::SteadyCapped(n) | RetentionPolicy::TiltedCapped(n) => {
                if n < 2 {
                    bad("capacity must be >= 2")
                } else {
                    Ok(())
                }
            }
            RetentionPolicy::HybridCapped(n) => {
                if n < 4 || n % 2 != 0 {
                    bad("capacity must be even and >= 4")
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for RetentionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RetentionPolicy::KeepAll => write!(f, "keep-all"),
            RetentionPolicy::FixedResolution(r) => write!(f, "fixed:{r}"),
            RetentionPolicy::RecencyProportional(r) => write!(f, "recprop:{r}"),
            RetentionPolicy::SteadyCapped(n) => write!(f, "steady:{n}"),
            RetentionPolicy::TiltedCapped(n) => write!(f, "tilted:{n}"),
            RetentionPolicy::HybridCapped(n) => write!(f, "hybrid:{n}"),
        }
    }
}

impl FromStr for RetentionPolicy {
    type Err = RetentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || RetentionError::InvalidPolicy(s.to_string());
        let policy = if s == "keep-all" {
            RetentionPolicy::KeepAll
        } else {
            let (name, arg) = s.split_once(':').ok_or_else(invalid)?;
            let value: u64 = arg.parse().map_err(|_| invalid())?;
            match name {
                "fixed" => RetentionPolicy::FixedResolution(value),
                "recprop" => RetentionPolicy::RecencyProportional(value),
                "steady" => RetentionPolicy::SteadyCapped(value),
                "tilted" => RetentionPolicy::TiltedCapped(value),
                "hybrid" => RetentionPolicy::HybridCapped(value),
                _ => return Err(invalid()),
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Trailing zeros with `ctz(0) = 64` so rank 0 sorts above every lattice level.
fn ctz(r: u64) -> u32 {
    if r == 0 {
        64
    } else {
        r.trailing_zeros()
    }
}

fn div_ceil(a: u64, b: u64) -> u64 {
    (a + b - 1) / b
}

/// Ranks retained by `policy` once `g` total ranks (`0..g`) have been
/// deposited, in strictly increasing order. Always contains rank 0 and rank
/// `g - 1` for `g > 0`. Column semantics; see [`surface_retained`] for the
/// hybrid surface layout.
pub fn enumerate_retained(policy: RetentionPolicy, g: u64) -> Vec<u64> {
    if g == 0 {
        return Vec::new();
    }
    match policy {
        RetentionPolicy::KeepAll => (0..g).collect(),
        RetentionPolicy::FixedResolution(r) => {
            let mut out: Vec<u64> = (0..g).step_by(r.max(1) as usize).collect();
            if *out.last().unwrap() != g - 1 {
                out.push(g - 1);
            }
            out
        }
        RetentionPolicy::RecencyProportional(r) => enumerate_recency_proportional(r, g),
        RetentionPolicy::SteadyCapped(n) => enumerate_steady(n, g),
        RetentionPolicy::TiltedCapped(n) => enumerate_tilted(n, g),
        RetentionPolicy::HybridCapped(n) => {
            let steady = enumerate_steady(n / 2, g);
            let tilted = enumerate_tilted(n / 2, g);
            let mut set: BTreeSet<u64> = steady.into_iter().collect();
            set.extend(tilted);
            set.into_iter().collect()
        }
    }
}

/// Retain rank `x` iff it is a multiple of the largest power of two not
/// exceeding `max(1, (g-1-x)/r)`; this makes every gap at a retained rank at
/// most `max(1, time_ago/r)` while keeping only `O(r log g)` ranks.
fn enumerate_recency_proportional(r: u64, g: u64) -> Vec<u64> {
    let stride_at = |x: u64| -> u64 {
        let depth = (g - 1 - x) / r;
        if depth <= 1 {
            1
        } else {
            1u64 << (63 - depth.leading_zeros())
        }
    };
    let mut out: Vec<u64> = (0..g).filter(|&x| x % stride_at(x) == 0).collect();
    if *out.last().unwrap() != g - 1 {
        out.push(g - 1);
    }
    out
}

/// Steady schedule: a power-of-two lattice (stride chosen minimally so the
/// lattice fits the capacity) refined by the most recent half-stride
/// midpoints, with one slot always reserved for the newest rank. In the
/// zero-slack zone at the end of an epoch the last lattice point is
/// "sacrificed" to make room for the newest rank; the sacrificed rank is
/// excluded from the following epoch's midpoint candidates so that a rank,
/// once dropped, never reappears.
fn enumerate_steady(n: u64, g: u64) -> Vec<u64> {
    debug_assert!(n >= 2);
    if g <= n {
        return (0..g).collect();
    }
    let mut e = 1u32;
    while div_ceil(g, 1u64 << e) > n {
        e += 1;
    }
    let stride = 1u64 << e;
    let half = stride >> 1;
    let newest = g - 1;
    let mut set: BTreeSet<u64> = (0..g).step_by(stride as usize).collect();
    set.insert(newest);

    // Multiples of `stride` strictly below the newest rank.
    let lattice_below_newest = (newest - 1) / stride + 1;
    if lattice_below_newest >= n {
        // Zero-slack: the lattice alone fills capacity; sacrifice its last
        // point (gap stays within bound because the newest rank is nearby).
        set.remove(&((n - 1) * stride));
    } else {
        let mut budget = n - 1 - lattice_below_newest;
        let prev_sacrificed = (n - 1) * half;
        // Odd multiples of `half`, newest first.
        let mut m = (g - 1) / half;
        if m % 2 == 0 && m > 0 {
            m -= 1;
        }
        let mut c = m * half;
        while budget > 0 && c > 0 {
            if c != prev_sacrificed && !set.contains(&c) {
                set.insert(c);
                budget -= 1;
            }
            c = c.saturating_sub(2 * half);
        }
    }
    debug_assert!(set.len() as u64 <= n);
    set.into_iter().collect()
}

/// Priority scale for the tilted schedule; larger capacities spend more slots
/// per recency band, shrinking the documented gap/time-ago ratio.
fn tilted_scale(n: u64) -> u128 {
    (n / 8).max(1) as u128
}

/// Static priority `r + K * 2^ctz(r+1)` (rank 0 is infinite). The top-n set of
/// a static priority changes by exactly one insertion and at most one removal
/// per deposit, and the `2^ctz` term makes survival time proportional to the
/// band a rank occupies, yielding recency-proportional gaps.
fn tilted_priority(r: u64, scale: u128) -> u128 {
    if r == 0 {
        u128::MAX
    } else {
        r as u128 + scale * (1u128 << ctz(r + 1).min(63))
    }
}

fn enumerate_tilted(n: u64, g: u64) -> Vec<u64> {
    debug_assert!(n >= 2);
    if g <= n {
        return (0..g).collect();
    }
    let scale = tilted_scale(n);
    // Keep the n largest (priority, rank) pairs with a bounded min-heap.
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut heap: BinaryHeap<Reverse<(u128, u64)>> = BinaryHeap::with_capacity(n as usize + 1);
    for r in 0..g {
        heap.push(Reverse((tilted_priority(r, scale), r)));
        if heap.len() as u64 > n {
            heap.pop();
        }
    }
    let mut set: BTreeSet<u64> = heap.into_iter().map(|Reverse((_, r))| r).collect();
    if !set.contains(&(g - 1)) {
        let min = *set
            .iter()
            .min_by_key(|&&r| (tilted_priority(r, scale), r))
            .unwrap();
        set.remove(&min);
        set.insert(g - 1);
    }
    set.into_iter().collect()
}

/// Live ranks of a surface of `size` sites after `g` deposits. Steady and
/// tilted surfaces follow the column schedule at capacity `size` exactly;
/// hybrid surfaces alternate deposits by rank parity between an independent
/// steady half (even ranks) and tilted half (odd ranks).
pub fn surface_retained(
    policy: RetentionPolicy,
    size: u64,
    g: u64,
) -> Result<Vec<u64>, RetentionError> {
    check_surface(policy, size)?;
    Ok(match policy {
        RetentionPolicy::SteadyCapped(_) => enumerate_steady(size, g),
        RetentionPolicy::TiltedCapped(_) => enumerate_tilted(size, g),
        RetentionPolicy::HybridCapped(_) => {
            let half = size / 2;
            let even = enumerate_steady(half, div_ceil(g, 2));
            let odd = enumerate_tilted(half, g / 2);
            let mut set: BTreeSet<u64> = even.into_iter().map(|k| 2 * k).collect();
            set.extend(odd.into_iter().map(|k| 2 * k + 1));
            set.into_iter().collect()
        }
        _ => unreachable!("check_surface rejects unbounded policies"),
    })
}

fn check_surface(policy: RetentionPolicy, size: u64) -> Result<(), RetentionError> {
    if !policy.is_capped() {
        return Err(RetentionError::UnboundedSurface(policy.to_string()));
    }
    let err = |reason: &str| {
        Err(RetentionError::SurfaceSize {
            policy: policy.to_string(),
            size,
            reason: reason.to_string(),
        })
    };
    if size < MIN_SURFACE_SIZE || !size.is_power_of_two() {
        return err("size must be a power of two >= 8");
    }
    if policy.capacity() != Some(size) {
        return err("policy capacity must equal the surface size");
    }
    Ok(())
}

/// The rank evicted by the deposit of rank `t` under a capped column
/// schedule, if any.
fn victim(policy: RetentionPolicy, t: u64) -> Option<u64> {
    let before: BTreeSet<u64> = enumerate_retained(policy, t).into_iter().collect();
    let after: BTreeSet<u64> = enumerate_retained(policy, t + 1).into_iter().collect();
    let mut gone = before.difference(&after);
    let v = gone.next().copied();
    debug_assert!(gone.next().is_none(), "steady/tilted remove at most one");
    v
}

/// Incrementally maintained top-n of the static tilted priorities. A fresh
/// `enumerate_tilted` scans all elapsed ranks, so per-generation callers
/// would go quadratic; because priorities are static, the top-n set over
/// `0..g+1` is the top-n of (top-n over `0..g`) ∪ {g}, an O(log n) update.
struct TiltedTopN {
    n: u64,
    scale: u128,
    top: BTreeSet<(u128, u64)>,
}

impl TiltedTopN {
    fn new(n: u64) -> TiltedTopN {
        TiltedTopN {
            n,
            scale: tilted_scale(n),
            top: BTreeSet::new(),
        }
    }

    /// Accounts for rank `r`; returns `enumerate_tilted(n, r + 1)`.
    fn advance(&mut self, r: u64) -> Vec<u64> {
        self.top.insert((tilted_priority(r, self.scale), r));
        if self.top.len() as u64 > self.n {
            let min = *self.top.iter().next().expect("nonempty");
            self.top.remove(&min);
        }
        let mut set: BTreeSet<u64> = self.top.iter().map(|&(_, rank)| rank).collect();
        if !set.contains(&r) {
            // Mirror the newest-rank swap of the one-shot enumeration; the
            // pure top-n state itself is left untouched.
            let &(_, victim_rank) = self.top.iter().next().expect("nonempty");
            set.remove(&victim_rank);
            set.insert(r);
        }
        set.into_iter().collect()
    }
}

/// Streams `enumerate_retained(policy, g)` for g = 1, 2, …; the k-th call to
/// [`ScheduleStream::advance`] returns the retained set at generation count
/// k. Per-step cost is bounded by the capacity for the capped policies, so
/// generation-by-generation consumers stay linear overall.
pub struct ScheduleStream {
    policy: RetentionPolicy,
    g: u64,
    tilted: Option<TiltedTopN>,
}

impl ScheduleStream {
    pub fn new(policy: RetentionPolicy) -> ScheduleStream {
        let tilted = match policy {
            RetentionPolicy::TiltedCapped(n) => Some(TiltedTopN::new(n)),
            RetentionPolicy::HybridCapped(n) => Some(TiltedTopN::new(n / 2)),
            _ => None,
        };
        ScheduleStream { policy, g: 0, tilted }
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    /// Generation count of the set the next `advance` call will return,
    /// minus one; starts at 0.
    pub fn generation(&self) -> u64 {
        self.g
    }

    pub fn advance(&mut self) -> Vec<u64> {
        let r = self.g;
        self.g += 1;
        match (&mut self.tilted, self.policy) {
            (Some(t), RetentionPolicy::TiltedCapped(_)) => t.advance(r),
            (Some(t), RetentionPolicy::HybridCapped(n)) => {
                let tilted = t.advance(r);
                let mut set: BTreeSet<u64> = enumerate_steady(n / 2, self.g).into_iter().collect();
                set.extend(tilted);
                set.into_iter().collect()
            }
            _ => enumerate_retained(self.policy, self.g),
        }
    }
}

/// Deterministic site written by the deposit of rank `r` on a surface of
/// `size` sites. The first `size` deposits fill distinct sites in order;
/// afterwards each deposit reuses the site of the rank its schedule evicts.
pub fn pick_deposition_site(
    policy: RetentionPolicy,
    r: u64,
    size: u64,
) -> Result<u64, RetentionError> {
    check_surface(policy, size)?;
    match policy {
        RetentionPolicy::HybridCapped(_) => {
            let half = size / 2;
            if r % 2 == 0 {
                site_by_chain(RetentionPolicy::SteadyCapped(half), r / 2, half)
            } else {
                site_by_chain(RetentionPolicy::TiltedCapped(half), (r - 1) / 2, half)
                    .map(|s| half + s)
            }
        }
        _ => site_by_chain(policy, r, size),
    }
}

fn site_by_chain(policy: RetentionPolicy, r: u64, size: u64) -> Result<u64, RetentionError> {
    let mut x = r;
    while x >= size {
        x = victim(policy, x).expect("capped schedule at capacity must evict");
    }
    Ok(x)
}

/// Precomputed site assignments for every deposit rank below a horizon,
/// shared across a population so site selection is O(1) per deposit.
#[derive(Debug, Clone)]
pub struct SurfaceSchedule {
    policy: RetentionPolicy,
    size: u64,
    sites: Vec<u32>,
}

impl SurfaceSchedule {
    pub fn new(policy: RetentionPolicy, size: u64, horizon: u64) -> Result<Self, RetentionError> {
        check_surface(policy, size)?;
        let mut sites = Vec::with_capacity(horizon as usize);
        match policy {
            RetentionPolicy::HybridCapped(_) => {
                let half = size / 2;
                let steady = Self::chain_sites(RetentionPolicy::SteadyCapped(half), half, div_ceil(horizon, 2));
                let tilted = Self::chain_sites(RetentionPolicy::TiltedCapped(half), half, horizon / 2);
                for r in 0..horizon {
                    if r % 2 == 0 {
                        sites.push(steady[(r / 2) as usize]);
                    } else {
                        sites.push(half as u32 + tilted[((r - 1) / 2) as usize]);
                    }
                }
            }
            _ => sites = Self::chain_sites(policy, size, horizon),
        }
        Ok(SurfaceSchedule { policy, size, sites })
    }

    fn chain_sites(policy: RetentionPolicy, size: u64, horizon: u64) -> Vec<u32> {
        let mut sites = Vec::with_capacity(horizon as usize);
        let mut site_of: std::collections::HashMap<u64, u32> = std::collections::HashMap::new();
        let mut stream = ScheduleStream::new(policy);
        let mut prev: Vec<u64> = Vec::new();
        for t in 0..horizon {
            let next = stream.advance();
            let s = if t < size {
                t as u32
            } else {
                // The single rank retained at t but not t+1 is the victim
                // whose site this deposit reuses.
                let v = *prev
                    .iter()
                    .find(|r| next.binary_search(r).is_err())
                    .expect("capped schedule at capacity must evict");
                site_of.remove(&v).expect("victim must be live")
            };
            site_of.insert(t, s);
            sites.push(s);
            prev = next;
        }
        sites
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn horizon(&self) -> u64 {
        self.sites.len() as u64
    }

    /// Site written by the deposit of rank `r`.
    pub fn site(&self, r: u64) -> u64 {
        self.sites[r as usize] as u64
    }

    /// `(rank, site)` pairs live after `g` deposits, ascending by rank.
    pub fn live_entries(&self, g: u64) -> Vec<(u64, u64)> {
        assert!(g <= self.horizon());
        surface_retained(self.policy, self.size, g)
            .expect("schedule was validated at construction")
            .into_iter()
            .map(|r| (r, self.site(r)))
            .collect()
    }
}

/// Gap measurements over the retained set at generation count `g`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GapBound {
    pub max_absolute_gap: u64,
    /// max over adjacent retained pairs (r1, r2) of gap / (g - r2 + 1),
    /// i.e. gap over time-ago-plus-one of the newer endpoint, counting
    /// time-ago from the next deposition.
    pub max_recency_ratio: f64,
}

/// Measures the worst absolute gap and worst recency-relative gap of the
/// column schedule at generation count `g`.
pub fn gap_bound_check(policy: RetentionPolicy, g: u64) -> GapBound {
    gap_bound_of(&enumerate_retained(policy, g), g)
}

/// Gap measurements for an explicit retained set (e.g. a surface's live set).
pub fn gap_bound_of(retained: &[u64], g: u64) -> GapBound {
    let mut max_gap = 0u64;
    let mut max_ratio = 0.0f64;
    for w in retained.windows(2) {
        let gap = w[1] - w[0];
        max_gap = max_gap.max(gap);
        let ratio = gap as f64 / (g - w[1] + 1) as f64;
        max_ratio = max_ratio.max(ratio);
    }
    GapBound {
        max_absolute_gap: max_gap,
        max_recency_ratio: max_ratio,
    }
}

/// Per-generation column update shared across a synchronized population:
/// which current entry indices are discarded when rank `counter + 1` is
/// deposited on a column currently at `counter`.
#[derive(Debug, Clone)]
pub struct ColumnUpdatePlan {
    /// Indices into the *current* entry vector, ascending.
    pub removed_indices: Vec<usize>,
    pub new_len: usize,
}

impl ColumnUpdatePlan {
    /// Plan for depositing on a column whose most recent rank is `counter`
    /// (so it currently holds `enumerate_retained(policy, counter + 1)`).
    pub fn for_counter(policy: RetentionPolicy, counter: u64) -> ColumnUpdatePlan {
        let old = enumerate_retained(policy, counter + 1);
        let new = enumerate_retained(policy, counter + 2);
        Self::from_transition(&old, &new)
    }

    /// Plan from explicit consecutive retained sets (both ascending), as
    /// produced by a [`ScheduleStream`]; avoids re-enumerating per column.
    pub fn from_transition(old: &[u64], new: &[u64]) -> ColumnUpdatePlan {
        let removed_indices: Vec<usize> = old
            .iter()
            .enumerate()
            .filter(|(_, r)| new.binary_search(r).is_err())
            .map(|(i, _)| i)
            .collect();
        // Every newly retained rank other than the fresh deposit must already
        // have been present: a column cannot resurrect discarded data.
        debug_assert!(
            new.iter()
                .all(|r| old.last().is_none_or(|l| *r > *l) || old.binary_search(r).is_ok()),
            "schedule resurrected a dropped rank"
        );
        ColumnUpdatePlan {
            removed_indices,
            new_len: new.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAPS: [u64; 4] = [8, 16, 32, 64];

    fn capped_policies(n: u64) -> Vec<RetentionPolicy> {
        vec![
            RetentionPolicy::SteadyCapped(n),
            RetentionPolicy::TiltedCapped(n),
            RetentionPolicy::HybridCapped(n),
        ]
    }

    #[test]
    fn policy_ids_round_trip() {
        for id in ["keep-all", "fixed:10", "recprop:4", "steady:64", "tilted:256", "hybrid:8"] {
            let p: RetentionPolicy = id.parse().unwrap();
            assert_eq!(p.to_string(), id);
        }
        assert!("steady".parse::<RetentionPolicy>().is_err());
        assert!("fixed:0".parse::<RetentionPolicy>().is_err());
        assert!("hybrid:7".parse::<RetentionPolicy>().is_err());
        assert!("bogus:3".parse::<RetentionPolicy>().is_err());
    }

    #[test]
    fn endpoints_always_retained() {
        let mut policies = vec![
            RetentionPolicy::KeepAll,
            RetentionPolicy::FixedResolution(7),
            RetentionPolicy::RecencyProportional(3),
        ];
        for n in CAPS {
            policies.extend(capped_policies(n));
        }
        for p in policies {
            for g in 1..600u64 {
                let r = enumerate_retained(p, g);
                assert_eq!(r.first(), Some(&0), "{p} g={g}");
                assert_eq!(r.last(), Some(&(g - 1)), "{p} g={g}");
                assert!(r.windows(2).all(|w| w[0] < w[1]), "{p} g={g} not sorted");
            }
        }
    }

    #[test]
    fn capped_policies_respect_capacity_and_monotone_refinement() {
        for n in CAPS {
            for p in capped_policies(n) {
                let removals_allowed = match p {
                    RetentionPolicy::HybridCapped(_) => 2,
                    _ => 1,
                };
                let mut prev: BTreeSet<u64> = BTreeSet::new();
                for g in 0..4000u64 {
                    let cur: BTreeSet<u64> = enumerate_retained(p, g).into_iter().collect();
                    assert!(cur.len() as u64 <= n, "{p} g={g} over capacity");
                    if g > 0 {
                        let inserted: Vec<_> = cur.difference(&prev).copied().collect();
                        assert_eq!(inserted, vec![g - 1], "{p} g={g} bad insertion");
                        let removed = prev.difference(&cur).count();
                        assert!(
                            removed <= removals_allowed,
                            "{p} g={g} removed {removed}"
                        );
                    }
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn steady_gap_bound_holds() {
        for n in CAPS {
            for g in 1..=10_000u64 {
                let b = gap_bound_check(RetentionPolicy::SteadyCapped(n), g);
                assert!(
                    b.max_absolute_gap <= 2 * div_ceil(g, n),
                    "steady:{n} g={g} gap {} > {}",
                    b.max_absolute_gap,
                    2 * div_ceil(g, n)
                );
            }
        }
    }

    #[test]
    fn fixed_resolution_gap() {
        for g in 1..2000u64 {
            let b = gap_bound_check(RetentionPolicy::FixedResolution(10), g);
            assert!(b.max_absolute_gap <= 10);
        }
        assert_eq!(
            gap_bound_check(RetentionPolicy::KeepAll, 1000).max_absolute_gap,
            1
        );
    }

    #[test]
    fn recency_proportional_gap() {
        let r = 4u64;
        for g in 2..3000u64 {
            let ranks = enumerate_retained(RetentionPolicy::RecencyProportional(r), g);
            for w in ranks.windows(2) {
                let gap = w[1] - w[0];
                let bound = ((g - 1 - w[0]) / r).max(1);
                assert!(gap <= bound, "recprop:{r} g={g} gap {gap} at {} > {bound}", w[0]);
            }
            // O(r log g) growth: generous explicit ceiling.
            assert!(ranks.len() as u64 <= 4 * r * (64 - g.leading_zeros() as u64) + 4);
        }
    }

    #[test]
    fn unbounded_policies_never_resurrect() {
        // A column can only discard; once a rank leaves the schedule it must
        // stay gone under every later generation count.
        for p in [
            RetentionPolicy::FixedResolution(6),
            RetentionPolicy::RecencyProportional(1),
            RetentionPolicy::RecencyProportional(4),
        ] {
            let mut prev: BTreeSet<u64> = BTreeSet::new();
            for g in 0..2000u64 {
                let cur: BTreeSet<u64> = enumerate_retained(p, g).into_iter().collect();
                if g > 0 {
                    let inserted: Vec<_> = cur.difference(&prev).copied().collect();
                    assert_eq!(inserted, vec![g - 1], "{p} g={g} resurrected a rank");
                }
                prev = cur;
            }
        }
    }

    #[test]
    fn tilted_matches_brute_force_priority_oracle() {
        // Independent oracle: sort all ranks by priority, take top n, force
        // the newest rank by minimum eviction.
        for n in [8u64, 16] {
            let scale = tilted_scale(n);
            for g in 1..1500u64 {
                let mut by_prio: Vec<u64> = (0..g).collect();
                by_prio.sort_by_key(|&r| std::cmp::Reverse((tilted_priority(r, scale), r)));
                let mut expect: BTreeSet<u64> = by_prio.into_iter().take(n as usize).collect();
                if !expect.contains(&(g - 1)) {
                    let min = *expect
                        .iter()
                        .min_by_key(|&&r| (tilted_priority(r, scale), r))
                        .unwrap();
                    expect.remove(&min);
                    expect.insert(g - 1);
                }
                let expect: Vec<u64> = expect.into_iter().collect();
                assert_eq!(enumerate_tilted(n, g), expect, "tilted:{n} g={g}");
            }
        }
    }

    #[test]
    fn surface_fill_hits_distinct_sites() {
        for s in [8u64, 16, 32, 64] {
            for p in capped_policies(s) {
                let mut seen = BTreeSet::new();
                for r in 0..s {
                    let site = pick_deposition_site(p, r, s).unwrap();
                    assert!(site < s);
                    assert!(seen.insert(site), "{p} rank {r} reused site {site}");
                }
            }
        }
    }

    #[test]
    fn hybrid_surface_halves_never_cross_write() {
        let s = 64u64;
        let p = RetentionPolicy::HybridCapped(s);
        let sched = SurfaceSchedule::new(p, s, 2048).unwrap();
        for r in 0..2048u64 {
            let site = sched.site(r);
            if r % 2 == 0 {
                assert!(site < s / 2, "even rank {r} wrote tilted half");
            } else {
                assert!(site >= s / 2, "odd rank {r} wrote steady half");
            }
            assert_eq!(site, pick_deposition_site(p, r, s).unwrap());
        }
    }

    #[test]
    fn surface_rejects_bad_configuration() {
        assert!(matches!(
            pick_deposition_site(RetentionPolicy::KeepAll, 0, 64),
            Err(RetentionError::UnboundedSurface(_))
        ));
        assert!(matches!(
            pick_deposition_site(RetentionPolicy::TiltedCapped(48), 0, 48),
            Err(RetentionError::SurfaceSize { .. })
        ));
        assert!(matches!(
            pick_deposition_site(RetentionPolicy::TiltedCapped(64), 0, 32),
            Err(RetentionError::SurfaceSize { .. })
        ));
        assert!(matches!(
            pick_deposition_site(RetentionPolicy::TiltedCapped(4), 0, 4),
            Err(RetentionError::SurfaceSize { .. })
        ));
    }

    #[test]
    fn column_update_plan_is_consistent() {
        for p in [
            RetentionPolicy::KeepAll,
            RetentionPolicy::FixedResolution(5),
            RetentionPolicy::RecencyProportional(2),
            RetentionPolicy::SteadyCapped(16),
            RetentionPolicy::TiltedCapped(16),
            RetentionPolicy::HybridCapped(16),
        ] {
            let mut ranks = enumerate_retained(p, 1);
            for counter in 0..800u64 {
                let plan = ColumnUpdatePlan::for_counter(p, counter);
                for &i in plan.removed_indices.iter().rev() {
                    ranks.remove(i);
                }
                ranks.push(counter + 1);
                assert_eq!(ranks.len(), plan.new_len, "{p} counter {counter}");
                assert_eq!(ranks, enumerate_retained(p, counter + 2), "{p} counter {counter}");
            }
        }
    }

    #[test]
    fn schedule_stream_matches_one_shot_enumeration() {
        let mut policies = vec![
            RetentionPolicy::KeepAll,
            RetentionPolicy::FixedResolution(16),
            RetentionPolicy::RecencyProportional(4),
        ];
        for n in [8, 64] {
            policies.extend(capped_policies(n));
        }
        for p in policies {
            let mut stream = ScheduleStream::new(p);
            for g in 1..=2500u64 {
                assert_eq!(stream.advance(), enumerate_retained(p, g), "{p} at {g}");
            }
        }
    }
}
