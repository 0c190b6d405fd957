//! Toy evolution model with exact lineage tracking: tournament selection on
//! a single-float genome over synchronous generations, with niches, an
//! island ring, and per-offspring annotation inheritance. Produces the
//! ground-truth reference phylogenies and annotation sets that
//! annotate-and-reconstruct experiments score against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Annotation, AnnotationError, DifferentiaWidth, StorageKind};
use crate::reconstruct::{NodeId, Phylogeny};
use crate::retention::{ColumnUpdatePlan, RetentionPolicy, ScheduleStream, SurfaceSchedule};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RefModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("downsample size {0} exceeds population {1}")]
    DownsampleTooLarge(usize, usize),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

/// Per-generation migration rate between ring-adjacent islands.
pub const MIGRATION_FRACTION: f64 = 0.01;
/// Per-individual per-generation probability of swapping into another niche
/// (2⁻²⁵; about one expected swap per 500 generations at population 65,536).
pub const NICHE_SWAP_PROB: f64 = 3.051_757_812_5e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub generations: u64,
    pub tournament_size: usize,
    pub niche_count: usize,
    pub island_count: usize,
    pub migration_fraction: f64,
    pub niche_swap_prob: f64,
    pub seed: u64,
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), RefModelError> {
        let err = |m: String| Err(RefModelError::InvalidConfig(m));
        if self.population_size == 0 {
            return err("population_size must be positive".into());
        }
        if self.tournament_size == 0 {
            return err("tournament_size must be positive".into());
        }
        if self.niche_count == 0 || self.island_count == 0 {
            return err("niche and island counts must be positive".into());
        }
        if self.population_size % (self.niche_count * self.island_count) != 0 {
            return err(format!(
                "population {} not divisible by niches x islands = {}",
                self.population_size,
                self.niche_count * self.island_count
            ));
        }
        if !(0.0..=1.0).contains(&self.migration_fraction) {
            return err("migration_fraction must lie in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.niche_swap_prob) {
            return err("niche_swap_prob must lie in [0,1]".into());
        }
        Ok(())
    }
}

/// Named selection regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// tournament size 2, no niching, no islands
    Plain,
    /// tournament size 2, 2 niches, 4 islands
    Mild,
    /// tournament size 2, 8 niches, 64 islands
    Rich,
    /// tournament size 1 (pure drift), no niching, no islands
    Drift,
}

impl Regime {
    pub fn config(self, population_size: usize, generations: u64, seed: u64) -> EvolutionConfig {
        let (tournament_size, niche_count, island_count) = match self {
            Regime::Plain => (2, 1, 1),
            Regime::Mild => (2, 2, 4),
            Regime::Rich => (2, 8, 64),
            Regime::Drift => (1, 1, 1),
        };
        EvolutionConfig {
            population_size,
            generations,
            tournament_size,
            niche_count,
            island_count,
            migration_fraction: MIGRATION_FRACTION,
            niche_swap_prob: NICHE_SWAP_PROB,
            seed,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Plain => "plain",
            Regime::Mild => "mild",
            Regime::Rich => "rich",
            Regime::Drift => "drift",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = RefModelError;
    fn from_str(s: &str) -> Result<Regime, RefModelError> {
        match s {
            "plain" => Ok(Regime::Plain),
            "mild" => Ok(Regime::Mild),
            "rich" => Ok(Regime::Rich),
            "drift" => Ok(Regime::Drift),
            other => Err(RefModelError::InvalidConfig(format!(
                "unknown regime `{other}` (expected plain|mild|rich|drift)"
            ))),
        }
    }
}

/// How each individual's annotation is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotationConfig {
    pub policy: RetentionPolicy,
    pub width: DifferentiaWidth,
    pub storage: StorageKind,
}

impl AnnotationConfig {
    fn create(&self, seed: u64) -> Result<Annotation, AnnotationError> {
        let capacity = self.policy.capacity().unwrap_or(0);
        Annotation::create(self.policy, self.width, self.storage, capacity, seed)
    }
}

/// End state of a run: one entry per population slot, plus the exactly
/// tracked reference phylogeny whose leaf labels match `taxa`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub taxa: Vec<String>,
    pub genomes: Vec<f64>,
    pub annotations: Vec<Annotation>,
    pub reference: Phylogeny,
}

/// Pruned lineage tracker: an arena of alive-or-ancestral nodes with free
/// slot reuse, so memory stays proportional to the surviving genealogy
/// rather than to everything that ever lived.
struct Tracker {
    parent: Vec<usize>,
    origin: Vec<u64>,
    child_count: Vec<u32>,
    free: Vec<usize>,
    /// When set, nothing is ever released (test oracle mode).
    keep_all: bool,
}

const NO_PARENT: usize = usize::MAX;

impl Tracker {
    fn new(keep_all: bool) -> Tracker {
        // node 0 is the synthetic root at time 0
        Tracker {
            parent: vec![NO_PARENT],
            origin: vec![0],
            child_count: vec![0],
            free: Vec::new(),
            keep_all,
        }
    }

    fn birth(&mut self, parent: usize, origin: u64) -> usize {
        self.child_count[parent] += 1;
        match self.free.pop() {
            Some(id) => {
                self.parent[id] = parent;
                self.origin[id] = origin;
                self.child_count[id] = 0;
                id
            }
            None => {
                self.parent.push(parent);
                self.origin.push(origin);
                self.child_count.push(0);
                self.parent.len() - 1
            }
        }
    }

    /// Releases a node that left the living population; cascades up through
    /// ancestors that lost their last descendant.
    fn release_if_extinct(&mut self, mut id: usize) {
        if self.keep_all {
            return;
        }
        while id != 0 && self.child_count[id] == 0 {
            let parent = self.parent[id];
            self.parent[id] = NO_PARENT;
            self.free.push(id);
            self.child_count[parent] -= 1;
            id = parent;
        }
    }

    /// The ancestor closure of `handles` as a `Phylogeny`, leaves labeled by
    /// the paired strings.
    fn extract(&self, handles: &[usize], labels: &[String]) -> Phylogeny {
        use std::collections::HashMap;
        let mut want: Vec<usize> = Vec::new();
        let mut seen: HashMap<usize, ()> = HashMap::new();
        for &h in handles {
            let mut cur = h;
            loop {
                if seen.insert(cur, ()).is_some() {
                    break;
                }
                want.push(cur);
                if cur == 0 {
                    break;
                }
                cur = self.parent[cur];
            }
        }
        // Parents precede children in id order only for never-freed arenas,
        // so sort topologically by (origin, id) — origins grow along edges
        // and ties cannot relate ancestor to descendant within a generation.
        want.sort_unstable_by_key(|&id| (self.origin[id], id));
        let mut remap: HashMap<usize, NodeId> = HashMap::with_capacity(want.len());
        let mut tree = Phylogeny::with_root(0);
        debug_assert_eq!(want[0], 0);
        remap.insert(0, tree.root);
        for &id in &want[1..] {
            let p = remap[&self.parent[id]];
            let node = tree.add_child(p, self.origin[id], None);
            remap.insert(id, node);
        }
        for (&h, label) in handles.iter().zip(labels) {
            tree.nodes[remap[&h]].label = Some(label.clone());
        }
        debug_assert!(tree.validate().is_ok());
        tree
    }
}

struct Slots {
    per_island: usize,
    per_niche: usize,
}

impl Slots {
    fn new(config: &EvolutionConfig) -> Slots {
        let per_island = config.population_size / config.island_count;
        Slots {
            per_island,
            per_niche: per_island / config.niche_count,
        }
    }
    fn island(&self, slot: usize) -> usize {
        slot / self.per_island
    }
    fn pool_start(&self, slot: usize) -> usize {
        // first slot of the same island x niche block
        slot - (slot % self.per_niche)
    }
    fn slot_in(&self, island: usize, niche: usize, k: usize) -> usize {
        island * self.per_island + niche * self.per_niche + k
    }
}

struct Population {
    genomes: Vec<f64>,
    annotations: Vec<Annotation>,
    handles: Vec<usize>,
}

/// Runs the model; see module docs. Deterministic in `config.seed`.
pub fn run_evolution(
    config: &EvolutionConfig,
    annotation: &AnnotationConfig,
) -> Result<RunOutput, RefModelError> {
    run_impl(config, annotation, false).map(|(out, _)| out)
}

/// Like [`run_evolution`] but additionally returns the complete unpruned
/// genealogy (every individual that ever lived); used as a pruning oracle.
fn run_impl(
    config: &EvolutionConfig,
    annotation: &AnnotationConfig,
    keep_all: bool,
) -> Result<(RunOutput, Option<Phylogeny>), RefModelError> {
    config.validate()?;
    let n = config.population_size;
    let slots = Slots::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tracker = Tracker::new(keep_all);

    let mut pop = Population {
        genomes: vec![0.0; n],
        annotations: {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(annotation.create(rng.gen())?);
            }
            v
        },
        handles: (0..n).map(|_| tracker.birth(0, 0)).collect(),
    };
    let mut full_log: Vec<usize> = if keep_all {
        pop.handles.clone()
    } else {
        Vec::new()
    };

    // Shared per-generation schedule state: the surface site table is
    // precomputed for the whole run and column plans come from a stream of
    // consecutive retained sets, so schedule work is linear in generations
    // rather than re-derived from scratch each one.
    let surface_sites = match annotation.storage {
        StorageKind::Surface => Some(
            SurfaceSchedule::new(
                annotation.policy,
                annotation.policy.capacity().expect("surface is capped"),
                config.generations,
            )
            .expect("validated at creation"),
        ),
        StorageKind::Column => None,
    };
    let mut plan_stream = match annotation.storage {
        StorageKind::Column => {
            let mut s = ScheduleStream::new(annotation.policy);
            let prev = s.advance(); // retained set at the initial counter 0
            Some((s, prev))
        }
        StorageKind::Surface => None,
    };

    for generation in 0..config.generations {
        // Selection + reproduction: the entire population is replaced.
        let plan = plan_stream.as_mut().map(|(stream, prev)| {
            let next = stream.advance();
            let plan = ColumnUpdatePlan::from_transition(prev, &next);
            *prev = next;
            plan
        });
        let site = surface_sites.as_ref().map(|s| s.site(generation));
        let mut next = Population {
            genomes: Vec::with_capacity(n),
            annotations: Vec::with_capacity(n),
            handles: Vec::with_capacity(n),
        };
        for slot in 0..n {
            let start = slots.pool_start(slot);
            // tournament with replacement within the island x niche block
            let mut winner = start + rng.gen_range(0..slots.per_niche);
            for _ in 1..config.tournament_size {
                let challenger = start + rng.gen_range(0..slots.per_niche);
                if pop.genomes[challenger].abs() > pop.genomes[winner].abs()
                    || (pop.genomes[challenger].abs() == pop.genomes[winner].abs()
                        && challenger < winner)
                {
                    winner = challenger;
                }
            }
            let mutation: f64 = rng.sample(StandardNormal);
            next.genomes.push(pop.genomes[winner] + mutation);
            let mut child = pop.annotations[winner].clone();
            let value = annotation.width.draw(&mut rng);
            match (&mut child, &plan, site) {
                (Annotation::Column(c), Some(plan), _) => c.deposit_planned(value, plan),
                (Annotation::Surface(s), _, Some(site)) => s.deposit_at(value, site),
                _ => unreachable!("storage kind is uniform across the run"),
            }
            next.annotations.push(child);
            next.handles
                .push(tracker.birth(pop.handles[winner], generation + 1));
        }
        // The parent generation dies; prune lineages with no descendants.
        for &h in &pop.handles {
            tracker.release_if_extinct(h);
        }
        pop = next;
        if keep_all {
            full_log.extend_from_slice(&pop.handles);
        }

        // Migration: floor(fraction x island population) occupant swaps per
        // island with its ring neighbor; direction alternates per the RNG.
        if config.island_count > 1 {
            let moves = (config.migration_fraction * slots.per_island as f64).floor() as usize;
            if moves > 0 {
                let dir: isize = if rng.gen_bool(0.5) { 1 } else { -1 };
                for island in 0..config.island_count {
                    let neighbor = (island as isize + dir)
                        .rem_euclid(config.island_count as isize)
                        as usize;
                    for _ in 0..moves {
                        let niche = rng.gen_range(0..config.niche_count);
                        let a = slots.slot_in(island, niche, rng.gen_range(0..slots.per_niche));
                        let b = slots.slot_in(neighbor, niche, rng.gen_range(0..slots.per_niche));
                        pop.genomes.swap(a, b);
                        pop.annotations.swap(a, b);
                        pop.handles.swap(a, b);
                    }
                }
            }
        }

        // Niche swap: rare per-individual exchange with a random occupant of
        // another niche on the same island.
        if config.niche_count > 1 && config.niche_swap_prob > 0.0 {
            for slot in 0..n {
                if rng.gen_bool(config.niche_swap_prob) {
                    let island = slots.island(slot);
                    let niche = (slot % slots.per_island) / slots.per_niche;
                    let mut other = rng.gen_range(0..config.niche_count - 1);
                    if other >= niche {
                        other += 1;
                    }
                    let b = slots.slot_in(island, other, rng.gen_range(0..slots.per_niche));
                    pop.genomes.swap(slot, b);
                    pop.annotations.swap(slot, b);
                    pop.handles.swap(slot, b);
                }
            }
        }
    }

    let taxa: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    let reference = tracker.extract(&pop.handles, &taxa);
    let full = if keep_all {
        let labels: Vec<String> = (0..full_log.len()).map(|i| format!("log{i}")).collect();
        Some(tracker.extract(&full_log, &labels))
    } else {
        None
    };
    Ok((
        RunOutput {
            taxa,
            genomes: pop.genomes,
            annotations: pop.annotations,
            reference,
        },
        full,
    ))
}

/// Uniformly samples `k` taxa without replacement and re-prunes the
/// reference to the sampled leaves. Labels are preserved from the parent
/// output. Deterministic in `seed`.
pub fn downsample(output: &RunOutput, k: usize, seed: u64) -> Result<RunOutput, RefModelError> {
    let n = output.taxa.len();
    if k > n {
        return Err(RefModelError::DownsampleTooLarge(k, n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: first k entries are the sample
    for i in 0..k {
        let j = rng.gen_range(i..n);
        picks.swap(i, j);
    }
    let mut picks: Vec<usize> = picks[..k].to_vec();
    picks.sort_unstable();
    let keep: std::collections::HashSet<&str> =
        picks.iter().map(|&i| output.taxa[i].as_str()).collect();
    let leaf_ids: Vec<NodeId> = output
        .reference
        .leaves()
        .into_iter()
        .filter(|&l| {
            output.reference.nodes[l]
                .label
                .as_deref()
                .is_some_and(|x| keep.contains(x))
        })
        .collect();
    let reference = crate::reconstruct::prune_to_leaves(&output.reference, &leaf_ids);
    Ok(RunOutput {
        taxa: picks.iter().map(|&i| output.taxa[i].clone()).collect(),
        genomes: picks.iter().map(|&i| output.genomes[i]).collect(),
        annotations: picks.iter().map(|&i| output.annotations[i].clone()).collect(),
        reference,
    })
}
