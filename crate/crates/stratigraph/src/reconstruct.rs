//! Agglomerative trie reconstruction of phylogenies from annotations, plus
//! the rooted-tree representation shared across the crate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::annotation::{check_comparable, Annotation, AnnotationError};
use crate::retention::SurfaceSchedule;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReconstructError {
    #[error("no annotations to reconstruct from")]
    Empty,
    #[error("annotation count {0} does not match label count {1}")]
    LabelMismatch(usize, usize),
    #[error("duplicate taxon label `{0}`")]
    DuplicateLabel(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhyloNode {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub origin_time: u64,
    /// Taxon label; present exactly on leaves in trees this crate builds.
    pub label: Option<String>,
}

/// A rooted tree with integer origin times, stored in an arena with stable,
/// deterministic node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phylogeny {
    pub nodes: Vec<PhyloNode>,
    pub root: NodeId,
}

impl Phylogeny {
    pub fn with_root(origin_time: u64) -> Phylogeny {
        Phylogeny {
            nodes: vec![PhyloNode {
                parent: None,
                children: Vec::new(),
                origin_time,
                label: None,
            }],
            root: 0,
        }
    }

    pub fn add_child(&mut self, parent: NodeId, origin_time: u64, label: Option<String>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(PhyloNode {
            parent: Some(parent),
            children: Vec::new(),
            origin_time,
            label,
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty())
            .collect()
    }

    /// Count of internal (non-leaf) nodes.
    pub fn inner_node_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !n.children.is_empty())
            .count()
    }

    pub fn leaf_labels(&self) -> Vec<String> {
        self.leaves()
            .into_iter()
            .filter_map(|i| self.nodes[i].label.clone())
            .collect()
    }

    /// Final generation: the maximum leaf origin time.
    pub fn final_time(&self) -> u64 {
        self.leaves()
            .into_iter()
            .map(|i| self.nodes[i].origin_time)
            .max()
            .unwrap_or(0)
    }

    /// Rebuilds the arena keeping only `keep` (which must be closed under
    /// parents and contain the root), preserving relative order.
    fn compact(&self, keep: &[bool]) -> Phylogeny {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if keep[i] {
                remap[i] = nodes.len();
                nodes.push(PhyloNode {
                    parent: node.parent.map(|p| remap[p]),
                    children: Vec::new(),
                    origin_time: node.origin_time,
                    label: node.label.clone(),
                });
            }
        }
        let mut tree = Phylogeny {
            nodes,
            root: remap[self.root],
        };
        for i in 0..tree.nodes.len() {
            if let Some(p) = tree.nodes[i].parent {
                tree.nodes[p].children.push(i);
            }
        }
        tree
    }

    /// Structural sanity: single root, acyclic parent links, children
    /// consistent with parents, origin times non-decreasing along edges.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen_root = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            match n.parent {
                None => {
                    seen_root += 1;
                    if i != self.root {
                        return Err(format!("node {i} has no parent but is not the root"));
                    }
                }
                Some(p) => {
                    if !self.nodes[p].children.contains(&i) {
                        return Err(format!("node {i} missing from parent {p} child list"));
                    }
                    if self.nodes[p].origin_time > n.origin_time {
                        return Err(format!("node {i} older than its parent"));
                    }
                }
            }
        }
        if seen_root != 1 {
            return Err(format!("{seen_root} roots"));
        }
        Ok(())
    }
}

/// MRCA rank interval between two annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrcaResult {
    /// Common ancestor confined to `lower <= rank < upper`: `lower` is the
    /// last common retained rank with matching differentiae, `upper` the
    /// first mismatching common rank (or one past the shallower lineage's
    /// most recent rank when no mismatch exists).
    Bounds { lower: u64, upper: u64 },
    /// Differentiae differ already at the first common rank: no shared
    /// ancestry within the recorded history.
    Disjoint,
}

/// Estimates the most recent common ancestor of two annotated lineages by
/// comparing differentiae at their common retained ranks.
pub fn mrca_bounds(a: &Annotation, b: &Annotation) -> Result<MrcaResult, ReconstructError> {
    check_comparable(a, b)?;
    let ra: BTreeMap<u64, u64> = a.retained_ranks().into_iter().collect();
    let rb: BTreeMap<u64, u64> = b.retained_ranks().into_iter().collect();
    let mut lower: Option<u64> = None;
    let mut upper: Option<u64> = None;
    for (rank, va) in &ra {
        if let Some(vb) = rb.get(rank) {
            if va == vb {
                lower = Some(*rank);
            } else {
                upper = Some(*rank);
                break;
            }
        }
    }
    match (lower, upper) {
        (Some(lower), Some(upper)) => Ok(MrcaResult::Bounds { lower, upper }),
        (Some(lower), None) => Ok(MrcaResult::Bounds {
            lower,
            upper: a.next_rank().min(b.next_rank()),
        }),
        (None, _) => Ok(MrcaResult::Disjoint),
    }
}

fn checkpoint_lists(
    annotations: &[Annotation],
    labels: &[String],
) -> Result<Vec<Vec<(u64, u64)>>, ReconstructError> {
    if annotations.is_empty() {
        return Err(ReconstructError::Empty);
    }
    if annotations.len() != labels.len() {
        return Err(ReconstructError::LabelMismatch(
            annotations.len(),
            labels.len(),
        ));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for l in labels {
            if !seen.insert(l) {
                return Err(ReconstructError::DuplicateLabel(l.clone()));
            }
        }
    }
    for other in &annotations[1..] {
        check_comparable(&annotations[0], other)?;
    }
    // Share one site schedule per distinct surface configuration.
    let mut schedules: BTreeMap<(String, u64, u64), SurfaceSchedule> = BTreeMap::new();
    let mut lists = Vec::with_capacity(annotations.len());
    for a in annotations {
        let list = match a.surface_size() {
            Some(size) => {
                let key = (a.policy().to_string(), size, a.counter());
                let schedule = schedules.entry(key).or_insert_with(|| {
                    SurfaceSchedule::new(a.policy(), size, a.counter())
                        .expect("surface annotation was validated at creation")
                });
                a.retained_ranks_with(schedule)
            }
            None => a.retained_ranks(),
        };
        lists.push(list);
    }
    Ok(lists)
}

/// Builds a rooted tree by trie agglomeration: each taxon descends from the
/// root through internal nodes keyed by `(rank, differentia)` along its own
/// retained checkpoints, creating nodes where its prefix diverges. Internal
/// nodes take the rank of their defining differentia as origin time; leaves
/// sit at their annotation's generation count. Taxa with identical records
/// end up as leaf children of a single node.
pub fn build_tree(
    annotations: &[Annotation],
    labels: &[String],
) -> Result<Phylogeny, ReconstructError> {
    let lists = checkpoint_lists(annotations, labels)?;
    let mut tree = Phylogeny::with_root(0);
    // children of each trie node, keyed by (rank, differentia value)
    let mut trie: Vec<BTreeMap<(u64, u64), NodeId>> = vec![BTreeMap::new()];
    for (list, label) in lists.iter().zip(labels) {
        let mut cur = tree.root;
        for &(rank, value) in list {
            cur = match trie[cur].get(&(rank, value)) {
                Some(&next) => next,
                None => {
                    let id = tree.add_child(cur, rank, None);
                    trie.resize(tree.len(), BTreeMap::new());
                    trie[cur].insert((rank, value), id);
                    id
                }
            };
        }
        let generation = annotations[labels.iter().position(|l| l == label).unwrap()].counter();
        tree.add_child(cur, generation, Some(label.clone()));
        trie.resize(tree.len(), BTreeMap::new());
    }
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

/// Re-times the join node of every group of leaves with byte-identical
/// annotation records to the second-to-last retained checkpoint, so that
/// identical records (which imply divergence too recent to record) never
/// claim common ancestry at the final generation. All other structure is
/// unchanged.
pub fn peel_back_conjoined_leaves(
    mut tree: Phylogeny,
    annotations: &[Annotation],
    labels: &[String],
) -> Result<Phylogeny, ReconstructError> {
    let lists = checkpoint_lists(annotations, labels)?;
    // Group annotation indices by identical record content.
    let mut groups: BTreeMap<(u64, Vec<(u64, u64)>), Vec<usize>> = BTreeMap::new();
    for (i, list) in lists.iter().enumerate() {
        groups
            .entry((annotations[i].counter(), list.clone()))
            .or_default()
            .push(i);
    }
    let leaf_by_label: BTreeMap<String, NodeId> = (0..tree.nodes.len())
        .filter_map(|i| tree.nodes[i].label.clone().map(|l| (l, i)))
        .collect();
    for ((_, list), members) in groups {
        if members.len() < 2 || list.len() < 2 {
            continue;
        }
        let retime = list[list.len() - 2].0;
        let leaf = leaf_by_label[labels[members[0]].as_str()];
        let join = tree.nodes[leaf].parent.expect("leaves hang off the trie");
        tree.nodes[join].origin_time = retime;
    }
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

/// Splices out every internal node with exactly one child, preserving the
/// leaf set and all ancestor relations.
pub fn collapse_unifurcations(tree: &Phylogeny) -> Phylogeny {
    let mut keep = vec![true; tree.nodes.len()];
    // Repeatedly splice; a chain collapses to its deepest member. The root is
    // spliced too when unary (its child becomes the new root).
    let mut work = tree.clone();
    loop {
        let mut changed = false;
        for i in 0..work.nodes.len() {
            if !keep[i] || work.nodes[i].children.len() != 1 {
                continue;
            }
            let child = work.nodes[i].children[0];
            match work.nodes[i].parent {
                Some(p) => {
                    let slot = work.nodes[p].children.iter().position(|&c| c == i).unwrap();
                    work.nodes[p].children[slot] = child;
                    work.nodes[child].parent = Some(p);
                }
                None => {
                    work.nodes[child].parent = None;
                    work.root = child;
                }
            }
            work.nodes[i].children.clear();
            keep[i] = false;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    let tree = work.compact(&keep);
    debug_assert!(tree.validate().is_ok());
    tree
}

/// Restricts a tree to the ancestor closure of the given leaves (used to
/// prune extinct lineages and to downsample). Unifurcations left by pruning
/// are kept; collapse separately if needed.
pub fn prune_to_leaves(tree: &Phylogeny, leaves: &[NodeId]) -> Phylogeny {
    let mut keep = vec![false; tree.nodes.len()];
    for &leaf in leaves {
        let mut cur = Some(leaf);
        while let Some(i) = cur {
            if keep[i] {
                break;
            }
            keep[i] = true;
            cur = tree.nodes[i].parent;
        }
    }
    keep[tree.root] = true;
    let pruned = tree.compact(&keep);
    debug_assert!(pruned.validate().is_ok());
    pruned
}
