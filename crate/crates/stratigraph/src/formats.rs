//! Bit-exact serialization of annotations and interchange formats for
//! phylogenies: JSON/CSV annotation records, alife-standard phylogeny CSV,
//! and Newick.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Annotation, AnnotationError, DifferentiaStore, DifferentiaWidth, StorageKind};
use crate::reconstruct::{NodeId, PhyloNode, Phylogeny};
use crate::retention::{enumerate_retained, RetentionPolicy};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("invalid hex string: {0}")]
    BadHex(String),
    #[error("invalid record: {0}")]
    BadRecord(String),
    #[error("malformed {kind} input at line {line}: {reason}")]
    BadLine {
        kind: &'static str,
        line: usize,
        reason: String,
    },
    #[error("multi-parent ancestor_list `{0}` is not supported")]
    MultiParent(String),
    #[error("newick parse error at byte {0}: {1}")]
    Newick(usize, String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02X}"));
    }
    s
}

fn from_hex(s: &str) -> Result<Vec<u8>, FormatError> {
    if s.len() % 2 != 0 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(FormatError::BadHex(s.to_string()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| FormatError::BadHex(s.to_string())))
        .collect()
}

/// One serialized annotation. `differentia_hex` packs site 0 first; within a
/// byte, earlier sites occupy more-significant bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub policy: String,
    pub differentia_width_bits: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub surface_size: Option<u64>,
    pub generation: u64,
    pub differentia_hex: String,
}

pub fn serialize_annotation(annotation: &Annotation) -> AnnotationRecord {
    AnnotationRecord {
        policy: annotation.policy().to_string(),
        differentia_width_bits: annotation.width().bits(),
        surface_size: annotation.surface_size(),
        generation: annotation.counter(),
        differentia_hex: to_hex(annotation.store().as_bytes()),
    }
}

pub fn deserialize_annotation(record: &AnnotationRecord) -> Result<Annotation, FormatError> {
    let policy: RetentionPolicy = record
        .policy
        .parse()
        .map_err(|e| FormatError::BadRecord(format!("{e}")))?;
    let width = DifferentiaWidth::new(record.differentia_width_bits)?;
    let bytes = from_hex(&record.differentia_hex)?;
    // Column length is implied by (policy, generation), not the byte count:
    // width-1 stores pad the final byte.
    let (storage, len) = match record.surface_size {
        Some(size) => (StorageKind::Surface, size as usize),
        None => (
            StorageKind::Column,
            enumerate_retained(policy, record.generation + 1).len(),
        ),
    };
    let store = DifferentiaStore::from_bytes(width, len, bytes).map_err(|e| {
        FormatError::BadRecord(format!("differentia_hex length inconsistent: {e}"))
    })?;
    Ok(Annotation::from_parts(policy, storage, record.generation, store)?)
}

/// A set of annotations for named taxa; the unit written to `.ann.json` and
/// `.ann.csv` files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSetFile {
    pub taxa: Vec<String>,
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationSetFile {
    pub fn new(taxa: Vec<String>, annotations: &[Annotation]) -> AnnotationSetFile {
        AnnotationSetFile {
            taxa,
            records: annotations.iter().map(serialize_annotation).collect(),
        }
    }

    pub fn annotations(&self) -> Result<Vec<Annotation>, FormatError> {
        if self.taxa.len() != self.records.len() {
            return Err(FormatError::BadRecord(format!(
                "{} taxa but {} records",
                self.taxa.len(),
                self.records.len()
            )));
        }
        self.records.iter().map(deserialize_annotation).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<AnnotationSetFile, FormatError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> Result<String, FormatError> {
        let mut out =
            String::from("taxon,policy,differentia_width_bits,surface_size,generation,differentia_hex\n");
        for (taxon, r) in self.taxa.iter().zip(&self.records) {
            check_csv_field(taxon)?;
            let surface = r.surface_size.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{taxon},{},{},{surface},{},{}\n",
                r.policy, r.differentia_width_bits, r.generation, r.differentia_hex
            ));
        }
        Ok(out)
    }

    pub fn from_csv(s: &str) -> Result<AnnotationSetFile, FormatError> {
        let mut lines = s.lines().enumerate();
        match lines.next() {
            Some((_, h))
                if h == "taxon,policy,differentia_width_bits,surface_size,generation,differentia_hex" => {}
            _ => {
                return Err(FormatError::BadLine {
                    kind: "annotation csv",
                    line: 1,
                    reason: "missing or wrong header".into(),
                })
            }
        }
        let mut taxa = Vec::new();
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| FormatError::BadLine {
                kind: "annotation csv",
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            taxa.push(fields[0].to_string());
            records.push(AnnotationRecord {
                policy: fields[1].to_string(),
                differentia_width_bits: fields[2].parse().map_err(|_| bad("bad width"))?,
                surface_size: if fields[3].is_empty() {
                    None
                } else {
                    Some(fields[3].parse().map_err(|_| bad("bad surface_size"))?)
                },
                generation: fields[4].parse().map_err(|_| bad("bad generation"))?,
                differentia_hex: fields[5].to_string(),
            });
        }
        Ok(AnnotationSetFile { taxa, records })
    }
}

fn check_csv_field(s: &str) -> Result<(), FormatError> {
    if s.contains([',', '"', '\n', '\r']) {
        return Err(FormatError::BadRecord(format!(
            "field `{s}` contains characters not representable in this CSV dialect"
        )));
    }
    Ok(())
}

/// Renders a phylogeny as alife-standard CSV: one row per node with columns
/// `id,ancestor_list,origin_time,label`; the root's ancestor list is
/// `[none]`.
pub fn export_alife_csv(tree: &Phylogeny) -> Result<String, FormatError> {
    let mut out = String::from("id,ancestor_list,origin_time,label\n");
    for (i, node) in tree.nodes.iter().enumerate() {
        let ancestors = match node.parent {
            Some(p) => format!("[{p}]"),
            None => "[none]".to_string(),
        };
        let label = node.label.as_deref().unwrap_or("");
        check_csv_field(label)?;
        out.push_str(&format!("{i},\"{ancestors}\",{},{label}\n", node.origin_time));
    }
    Ok(out)
}

pub fn import_alife_csv(s: &str) -> Result<Phylogeny, FormatError> {
    let mut lines = s.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == "id,ancestor_list,origin_time,label" => {}
        _ => {
            return Err(FormatError::BadLine {
                kind: "phylogeny csv",
                line: 1,
                reason: "missing or wrong header".into(),
            })
        }
    }
    struct Row {
        id: u64,
        parent: Option<u64>,
        origin_time: u64,
        label: Option<String>,
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| FormatError::BadLine {
            kind: "phylogeny csv",
            line: i + 1,
            reason,
        };
        // ancestor_list is the only quoted field and contains no commas for
        // the single-parent lists we accept, so plain splitting suffices
        // after stripping quotes.
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            let joined = fields.get(1..fields.len() - 2).map(|f| f.join(","));
            if let Some(inner) = joined {
                let inner = inner.trim_matches('"').trim_matches(['[', ']']);
                return Err(FormatError::MultiParent(inner.to_string()));
            }
            return Err(bad("expected 4 fields".into()));
        }
        let ancestors = fields[1].trim_matches('"');
        let inner = ancestors
            .strip_prefix('[')
            .and_then(|a| a.strip_suffix(']'))
            .ok_or_else(|| bad(format!("bad ancestor_list `{ancestors}`")))?;
        let parent = match inner {
            "none" | "NONE" => None,
            other if other.contains(',') => {
                return Err(FormatError::MultiParent(other.to_string()))
            }
            other => Some(
                other
                    .parse::<u64>()
                    .map_err(|_| bad(format!("bad ancestor id `{other}`")))?,
            ),
        };
        rows.push(Row {
            id: fields[0]
                .parse()
                .map_err(|_| bad(format!("bad id `{}`", fields[0])))?,
            parent,
            origin_time: fields[2]
                .parse()
                .map_err(|_| bad(format!("bad origin_time `{}`", fields[2])))?,
            label: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].to_string())
            },
        });
    }
    if rows.is_empty() {
        return Err(FormatError::BadRecord("empty phylogeny csv".into()));
    }
    let index_of: std::collections::HashMap<u64, NodeId> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id, i))
        .collect();
    if index_of.len() != rows.len() {
        return Err(FormatError::BadRecord("duplicate node ids".into()));
    }
    let mut nodes: Vec<PhyloNode> = Vec::with_capacity(rows.len());
    let mut root = None;
    for row in &rows {
        let parent = match row.parent {
            Some(p) => Some(*index_of.get(&p).ok_or_else(|| {
                FormatError::BadRecord(format!("unknown ancestor id {p}"))
            })?),
            None => None,
        };
        if parent.is_none() {
            if root.is_some() {
                return Err(FormatError::BadRecord("multiple roots".into()));
            }
            root = Some(nodes.len());
        }
        nodes.push(PhyloNode {
            parent,
            children: Vec::new(),
            origin_time: row.origin_time,
            label: row.label.clone(),
        });
    }
    let root = root.ok_or_else(|| FormatError::BadRecord("no root row".into()))?;
    for i in 0..nodes.len() {
        if let Some(p) = nodes[i].parent {
            nodes[p].children.push(i);
        }
    }
    let tree = Phylogeny { nodes, root };
    tree.validate().map_err(FormatError::BadRecord)?;
    Ok(tree)
}

fn newick_label(label: &str) -> String {
    const RESERVED: &[char] = &['(', ')', '[', ']', '{', '}', ',', ';', ':', '\'', ' ', '\t', '\n'];
    if label.is_empty() || label.contains(RESERVED) {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_string()
    }
}

/// Renders Newick with integer branch lengths equal to the origin-time
/// difference along each edge; the root carries its own origin time as its
/// length. `inner_labels` additionally writes each internal node's origin
/// time as its label.
pub fn export_newick(tree: &Phylogeny, inner_labels: bool) -> String {
    // Iterative two-phase traversal: trees can be deep chains.
    enum Step {
        Enter(NodeId),
        Exit(NodeId),
    }
    let mut out = String::new();
    let mut stack = vec![Step::Enter(tree.root)];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(i) => {
                let node = &tree.nodes[i];
                if !node.children.is_empty() {
                    out.push('(');
                }
                stack.push(Step::Exit(i));
                // Children in order; separating commas are emitted when each
                // non-last sibling exits.
                for &c in node.children.iter().rev() {
                    stack.push(Step::Enter(c));
                }
            }
            Step::Exit(i) => {
                let node = &tree.nodes[i];
                if !node.children.is_empty() {
                    out.push(')');
                    if inner_labels {
                        out.push_str(&node.origin_time.to_string());
                    }
                }
                if let Some(label) = &node.label {
                    out.push_str(&newick_label(label));
                }
                let parent_time = node.parent.map_or(0, |p| tree.nodes[p].origin_time);
                out.push(':');
                out.push_str(&(node.origin_time - parent_time).to_string());
                // After finishing a non-last sibling, emit the separating comma.
                if let Some(p) = node.parent {
                    let siblings = &tree.nodes[p].children;
                    if siblings.last() != Some(&i) {
                        out.push(',');
                    }
                }
            }
        }
    }
    out.push(';');
    out
}

/// Parses the Newick dialect emitted by [`export_newick`] (labels, integer
/// branch lengths, single-quoted escapes). Origin times are recovered by
/// accumulating branch lengths from the root.
pub fn parse_newick(s: &str) -> Result<Phylogeny, FormatError> {
    #[derive(Default)]
    struct Raw {
        children: Vec<usize>,
        label: Option<String>,
        length: u64,
    }
    let bytes = s.as_bytes();
    let mut pos = 0usize;
    let mut raws: Vec<Raw> = Vec::new();
    // Stack of open internal nodes; each frame collects finished children.
    let mut open: Vec<Vec<usize>> = Vec::new();
    let mut finished: Option<usize> = None; // most recently completed node

    fn parse_label_and_length(
        bytes: &[u8],
        pos: &mut usize,
    ) -> Result<(Option<String>, u64), FormatError> {
        let mut label = None;
        if bytes.get(*pos) == Some(&b'\'') {
            let mut out = String::new();
            *pos += 1;
            loop {
                match bytes.get(*pos) {
                    Some(b'\'') if bytes.get(*pos + 1) == Some(&b'\'') => {
                        out.push('\'');
                        *pos += 2;
                    }
                    Some(b'\'') => {
                        *pos += 1;
                        break;
                    }
                    Some(&b) => {
                        out.push(b as char);
                        *pos += 1;
                    }
                    None => return Err(FormatError::Newick(*pos, "unterminated quote".into())),
                }
            }
            label = Some(out);
        } else {
            let start = *pos;
            while let Some(&b) = bytes.get(*pos) {
                if b"(),;:".contains(&b) {
                    break;
                }
                *pos += 1;
            }
            if *pos > start {
                label = Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned());
            }
        }
        let mut length = 0;
        if bytes.get(*pos) == Some(&b':') {
            *pos += 1;
            let start = *pos;
            while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
                *pos += 1;
            }
            length = std::str::from_utf8(&bytes[start..*pos])
                .unwrap()
                .parse()
                .map_err(|_| FormatError::Newick(start, "expected integer branch length".into()))?;
        }
        Ok((label, length))
    }

    loop {
        match bytes.get(pos) {
            Some(b'(') => {
                open.push(Vec::new());
                pos += 1;
            }
            Some(b',') => {
                let child = finished
                    .take()
                    .ok_or_else(|| FormatError::Newick(pos, "empty sibling".into()))?;
                open.last_mut()
                    .ok_or_else(|| FormatError::Newick(pos, "comma outside group".into()))?
                    .push(child);
                pos += 1;
            }
            Some(b')') => {
                let child = finished
                    .take()
                    .ok_or_else(|| FormatError::Newick(pos, "empty child".into()))?;
                let mut children = open
                    .pop()
                    .ok_or_else(|| FormatError::Newick(pos, "unmatched )".into()))?;
                children.push(child);
                pos += 1;
                let (label, length) = parse_label_and_length(bytes, &mut pos)?;
                // Ignore inner labels (they carry origin times when emitted).
                let _ = label;
                raws.push(Raw {
                    children,
                    label: None,
                    length,
                });
                finished = Some(raws.len() - 1);
            }
            Some(b';') | None => break,
            _ => {
                if finished.is_some() {
                    return Err(FormatError::Newick(pos, "unexpected token".into()));
                }
                let (label, length) = parse_label_and_length(bytes, &mut pos)?;
                if label.is_none() && bytes.get(pos).is_none() {
                    return Err(FormatError::Newick(pos, "truncated input".into()));
                }
                raws.push(Raw {
                    children: Vec::new(),
                    label,
                    length,
                });
                finished = Some(raws.len() - 1);
            }
        }
    }
    if !open.is_empty() {
        return Err(FormatError::Newick(pos, "unmatched (".into()));
    }
    let root_raw = finished.ok_or_else(|| FormatError::Newick(pos, "empty input".into()))?;

    // Convert bottom-up raw nodes into a rooted arena, accumulating origin
    // times from the root down (iteratively: reconstructions can be deep).
    let mut tree = Phylogeny::with_root(raws[root_raw].length);
    tree.nodes[tree.root].label = raws[root_raw].label.clone();
    let mut stack: Vec<(usize, NodeId)> = vec![(root_raw, tree.root)];
    while let Some((raw_id, node_id)) = stack.pop() {
        let base = tree.nodes[node_id].origin_time;
        for &c in &raws[raw_id].children {
            let id = tree.add_child(node_id, base + raws[c].length, raws[c].label.clone());
            stack.push((c, id));
        }
    }
    tree.validate().map_err(FormatError::BadRecord)?;
    Ok(tree)
}
