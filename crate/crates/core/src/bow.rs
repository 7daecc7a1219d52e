//! Hierarchical bag-of-words vocabulary over binary descriptors and a
//! keyframe database with an inverted index.

use crate::features::{hamming, DescriptorBits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use thiserror::Error;

pub type KeyframeId = u32;
pub type WordId = u32;

pub const VOCAB_MAGIC: &[u8; 8] = b"LDSOVOC1";
const NO_PARENT: u32 = u32::MAX;
const MAX_KMEDIANS_ITERATIONS: usize = 25;

#[derive(Debug, Error)]
pub enum BowError {
    #[error("need at least {needed} descriptors, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid vocabulary parameters: {0}")]
    InvalidParameters(String),
    #[error("cannot build a bag-of-words vector from zero descriptors")]
    EmptyInput,
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabNode {
    pub parent: Option<u32>,
    pub center: DescriptorBits,
    /// IDF weight; zero on interior nodes.
    pub weight: f64,
    pub is_leaf: bool,
    pub children: Vec<u32>,
}

/// Vocabulary tree. Node 0 is the root; word ids are leaf node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BowVocabulary {
    branching: u32,
    depth: u32,
    nodes: Vec<VocabNode>,
}

/// Bitwise majority vote; ties resolve to 0.
fn majority(descs: &[DescriptorBits], members: &[usize]) -> DescriptorBits {
    let mut counts = [0u32; 256];
    for &m in members {
        let d = &descs[m];
        for (k, c) in counts.iter_mut().enumerate() {
            *c += ((d[k / 8] >> (k % 8)) & 1) as u32;
        }
    }
    let mut out = [0u8; 32];
    let half = members.len() as u32;
    for (k, &c) in counts.iter().enumerate() {
        if 2 * c > half {
            out[k / 8] |= 1 << (k % 8);
        }
    }
    out
}

/// Index of the closest centre; ties keep the lowest index.
fn nearest(d: &DescriptorBits, centers: &[DescriptorBits]) -> usize {
    let mut best = (0, u32::MAX);
    for (i, c) in centers.iter().enumerate() {
        let dist = hamming(d, c);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best.0
}

/// k-medians with k-means++ seeding. Returns centres and final assignment.
fn k_medians(
    descs: &[DescriptorBits],
    members: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<DescriptorBits>, Vec<usize>) {
    let mut centers: Vec<DescriptorBits> = Vec::with_capacity(k);
    centers.push(descs[members[rng.random_range(0..members.len())]]);
    let mut dist2: Vec<f64> = members
        .iter()
        .map(|&m| (hamming(&descs[m], &centers[0]) as f64).powi(2))
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..members.len())
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut idx = members.len() - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        let c = descs[members[pick]];
        centers.push(c);
        for (i, &m) in members.iter().enumerate() {
            dist2[i] = dist2[i].min((hamming(&descs[m], &c) as f64).powi(2));
        }
    }

    let mut assign = vec![usize::MAX; members.len()];
    for _ in 0..MAX_KMEDIANS_ITERATIONS {
        let new_assign: Vec<usize> = members.iter().map(|&m| nearest(&descs[m], &centers)).collect();
        if new_assign == assign {
            break;
        }
        assign = new_assign;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &a) in assign.iter().enumerate() {
            groups[a].push(members[i]);
        }
        for c in 0..k {
            if groups[c].is_empty() {
                // reseed from the descriptor farthest from its centre
                let (far, _) = members
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| (i, hamming(&descs[m], &centers[assign[i]])))
                    .fold((0, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
                centers[c] = descs[members[far]];
            } else {
                centers[c] = majority(descs, &groups[c]);
            }
        }
    }
    let assign = members.iter().map(|&m| nearest(&descs[m], &centers)).collect();
    (centers, assign)
}

impl BowVocabulary {
    /// Builds a tree with branching `k` and depth `depth` from descriptors
    /// grouped per training image. IDF weights are `ln(N / n_i)` where `n_i`
    /// counts training images with a descriptor in word `i`.
    pub fn build(training: &[Vec<DescriptorBits>], k: u32, depth: u32, seed: u64) -> Result<Self, BowError> {
        Self::build_with_assignment(training, k, depth, seed).map(|(v, _)| v)
    }

    fn build_with_assignment(
        training: &[Vec<DescriptorBits>],
        k: u32,
        depth: u32,
        seed: u64,
    ) -> Result<(Self, Vec<u32>), BowError> {
        if k < 2 || depth < 1 {
            return Err(BowError::InvalidParameters(format!(
                "need k >= 2 and depth >= 1 (k={k}, depth={depth})"
            )));
        }
        let descs: Vec<DescriptorBits> = training.iter().flatten().copied().collect();
        if descs.len() < k as usize {
            return Err(BowError::InsufficientData {
                needed: k as usize,
                got: descs.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = vec![VocabNode {
            parent: None,
            center: [0u8; 32],
            weight: 0.0,
            is_leaf: false,
            children: Vec::new(),
        }];
        let mut leaf_of = vec![0u32; descs.len()];
        // breadth-first so node ids are ordered by level
        let mut queue = std::collections::VecDeque::new();
        queue.push_back((0u32, (0..descs.len()).collect::<Vec<_>>(), 0u32));
        while let Some((node, members, level)) = queue.pop_front() {
            let distinct: BTreeSet<DescriptorBits> = members.iter().map(|&m| descs[m]).collect();
            if level == depth || distinct.len() <= 1 {
                nodes[node as usize].is_leaf = true;
                for &m in &members {
                    leaf_of[m] = node;
                }
                continue;
            }
            let (centers, assign) = if distinct.len() <= k as usize {
                let centers: Vec<DescriptorBits> = distinct.into_iter().collect();
                let assign = members.iter().map(|&m| nearest(&descs[m], &centers)).collect();
                (centers, assign)
            } else {
                k_medians(&descs, &members, k as usize, &mut rng)
            };
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
            for (i, &a) in assign.iter().enumerate() {
                groups[a].push(members[i]);
            }
            for (c, group) in groups.into_iter().enumerate() {
                if group.is_empty() {
                    continue;
                }
                let id = nodes.len() as u32;
                nodes.push(VocabNode {
                    parent: Some(node),
                    center: centers[c],
                    weight: 0.0,
                    is_leaf: false,
                    children: Vec::new(),
                });
                nodes[node as usize].children.push(id);
                queue.push_back((id, group, level + 1));
            }
        }

        let n_images = training.len() as f64;
        let mut images_per_word: BTreeMap<u32, usize> = BTreeMap::new();
        let mut offset = 0;
        for img in training {
            let words: BTreeSet<u32> = leaf_of[offset..offset + img.len()].iter().copied().collect();
            for w in words {
                *images_per_word.entry(w).or_default() += 1;
            }
            offset += img.len();
        }
        for (w, n) in images_per_word {
            nodes[w as usize].weight = (n_images / n as f64).ln().max(0.0);
        }
        Ok((
            Self {
                branching: k,
                depth,
                nodes,
            },
            leaf_of,
        ))
    }

    pub fn branching(&self) -> u32 {
        self.branching
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn nodes(&self) -> &[VocabNode] {
        &self.nodes
    }

    pub fn num_words(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf).count()
    }

    pub fn word_weight(&self, word: WordId) -> f64 {
        self.nodes[word as usize].weight
    }

    /// Greedy descent to a leaf.
    pub fn quantize(&self, d: &DescriptorBits) -> WordId {
        let mut node = 0usize;
        while !self.nodes[node].is_leaf {
            let children = &self.nodes[node].children;
            let centers: Vec<DescriptorBits> = children.iter().map(|&c| self.nodes[c as usize].center).collect();
            node = children[nearest(d, &centers)] as usize;
        }
        node as WordId
    }

    /// TF-IDF histogram, L1-normalised. Words with zero weight are dropped.
    pub fn transform(&self, descriptors: &[DescriptorBits]) -> Result<BowVector, BowError> {
        if descriptors.is_empty() {
            return Err(BowError::EmptyInput);
        }
        let tf = 1.0 / descriptors.len() as f64;
        let mut words: BTreeMap<WordId, f64> = BTreeMap::new();
        for d in descriptors {
            let w = self.quantize(d);
            let weight = self.word_weight(w);
            if weight > 0.0 {
                *words.entry(w).or_default() += tf * weight;
            }
        }
        let total: f64 = words.values().sum();
        if total > 0.0 {
            for v in words.values_mut() {
                *v /= total;
            }
        }
        Ok(BowVector { words })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), BowError> {
        w.write_all(VOCAB_MAGIC)?;
        w.write_all(&self.branching.to_le_bytes())?;
        w.write_all(&self.depth.to_le_bytes())?;
        w.write_all(&(self.nodes.len() as u32).to_le_bytes())?;
        for n in &self.nodes {
            w.write_all(&n.parent.unwrap_or(NO_PARENT).to_le_bytes())?;
            w.write_all(&n.center)?;
            w.write_all(&n.weight.to_le_bytes())?;
            w.write_all(&[n.is_leaf as u8])?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, BowError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != VOCAB_MAGIC {
            return Err(BowError::Format("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32, BowError> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let branching = read_u32(&mut r)?;
        let depth = read_u32(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut nodes: Vec<VocabNode> = Vec::with_capacity(count);
        for id in 0..count {
            let parent = read_u32(&mut r)?;
            let mut center = [0u8; 32];
            r.read_exact(&mut center)?;
            let mut wb = [0u8; 8];
            r.read_exact(&mut wb)?;
            let mut leaf = [0u8; 1];
            r.read_exact(&mut leaf)?;
            let parent = if parent == NO_PARENT {
                if id != 0 {
                    return Err(BowError::Format(format!("node {id} has no parent")));
                }
                None
            } else {
                if parent as usize >= id {
                    return Err(BowError::Format(format!("node {id} precedes its parent {parent}")));
                }
                nodes[parent as usize].children.push(id as u32);
                Some(parent)
            };
            nodes.push(VocabNode {
                parent,
                center,
                weight: f64::from_le_bytes(wb),
                is_leaf: leaf[0] != 0,
                children: Vec::new(),
            });
        }
        if nodes.is_empty() {
            return Err(BowError::Format("no nodes".into()));
        }
        for (id, n) in nodes.iter().enumerate() {
            if n.is_leaf == !n.children.is_empty() {
                return Err(BowError::Format(format!("node {id} leaf flag disagrees with its children")));
            }
        }
        Ok(Self {
            branching,
            depth,
            nodes,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), BowError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, BowError> {
        Self::read(&std::fs::read(path)?[..])
    }
}

/// Sparse word histogram.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BowVector {
    pub words: BTreeMap<WordId, f64>,
}

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// `1 - 0.5 * |a - b|_1`; zero if either vector is empty.
pub fn score(a: &BowVector, b: &BowVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut ia = a.words.iter().peekable();
    let mut ib = b.words.iter().peekable();
    let mut l1 = 0.0;
    loop {
        match (ia.peek(), ib.peek()) {
            (Some((ka, va)), Some((kb, vb))) => {
                if ka == kb {
                    l1 += (*va - *vb).abs();
                    ia.next();
                    ib.next();
                } else if ka < kb {
                    l1 += va.abs();
                    ia.next();
                } else {
                    l1 += vb.abs();
                    ib.next();
                }
            }
            (Some((_, va)), None) => {
                l1 += va.abs();
                ia.next();
            }
            (None, Some((_, vb))) => {
                l1 += vb.abs();
                ib.next();
            }
            (None, None) => break,
        }
    }
    (1.0 - 0.5 * l1).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryResult {
    pub id: KeyframeId,
    pub score: f64,
}

fn rank(results: &mut Vec<QueryResult>, max_results: usize) {
    results.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    results.truncate(max_results);
}

/// Stored keyframe vectors plus an inverted index. Only keyframes marked as
/// marginalized are ever returned by queries.
///
/// The database is a plain value; share it between an inserting thread and
/// querying threads behind an `RwLock`.
#[derive(Debug, Clone, Default)]
pub struct KeyframeDatabase {
    vectors: BTreeMap<KeyframeId, BowVector>,
    inverted: BTreeMap<WordId, Vec<KeyframeId>>,
    marginalized: BTreeSet<KeyframeId>,
}

impl KeyframeDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: KeyframeId) -> bool {
        self.vectors.contains_key(&id)
    }

    /// Inserts (or replaces) a keyframe. New keyframes start inside the window.
    pub fn insert(&mut self, id: KeyframeId, v: BowVector) {
        if let Some(old) = self.vectors.remove(&id) {
            for w in old.words.keys() {
                if let Some(list) = self.inverted.get_mut(w) {
                    list.retain(|&k| k != id);
                }
            }
        }
        for w in v.words.keys() {
            self.inverted.entry(*w).or_default().push(id);
        }
        self.vectors.insert(id, v);
    }

    pub fn set_marginalized(&mut self, id: KeyframeId) -> bool {
        if self.vectors.contains_key(&id) {
            self.marginalized.insert(id);
            true
        } else {
            false
        }
    }

    pub fn is_marginalized(&self, id: KeyframeId) -> bool {
        self.marginalized.contains(&id)
    }

    pub fn vector(&self, id: KeyframeId) -> Option<&BowVector> {
        self.vectors.get(&id)
    }

    /// Ranked candidates sharing at least one word with `v`.
    pub fn query(
        &self,
        v: &BowVector,
        max_results: usize,
        exclude: &BTreeSet<KeyframeId>,
        min_score: f64,
    ) -> Vec<QueryResult> {
        let mut candidates = BTreeSet::new();
        for w in v.words.keys() {
            if let Some(list) = self.inverted.get(w) {
                for &id in list {
                    if self.marginalized.contains(&id) && !exclude.contains(&id) {
                        candidates.insert(id);
                    }
                }
            }
        }
        let mut results: Vec<QueryResult> = candidates
            .into_iter()
            .map(|id| QueryResult {
                id,
                score: score(v, &self.vectors[&id]),
            })
            .filter(|r| r.score >= min_score)
            .collect();
        rank(&mut results, max_results);
        results
    }

    /// Exhaustive scoring against every eligible keyframe.
    pub fn query_brute_force(
        &self,
        v: &BowVector,
        max_results: usize,
        exclude: &BTreeSet<KeyframeId>,
        min_score: f64,
    ) -> Vec<QueryResult> {
        let mut results: Vec<QueryResult> = self
            .vectors
            .iter()
            .filter(|(id, _)| self.marginalized.contains(id) && !exclude.contains(id))
            .map(|(&id, stored)| QueryResult {
                id,
                score: score(v, stored),
            })
            .filter(|r| r.score >= min_score && r.score > 0.0)
            .collect();
        rank(&mut results, max_results);
        results
    }
}
