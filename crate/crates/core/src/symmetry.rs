//! Selection of the most symmetric set of initial states from measured
//! trajectory samples: for a state `x_A` the peer `x_A'` minimizes
//! `||x_A + x_A'||` subject to both norms exceeding `r_threshold`. A
//! KD-tree over the candidate samples answers the mirrored
//! nearest-neighbor queries exactly.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::simgen::MeasurementSet;

const LEAF_SIZE: usize = 16;

/// Identity of one sample inside a measurement set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub scenario: usize,
    pub sample: usize,
}

/// Distance metric for the symmetry search.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormSpec {
    #[default]
    Euclidean,
    /// Coordinates are scaled by the weights before the Euclidean norm;
    /// `weights: None` derives them as inverse per-state RMS of the
    /// dataset.
    Weighted { weights: Option<Vec<f64>> },
}

/// Configuration of the symmetric-pair search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryConfig {
    /// Minimum distance from the origin; `None` resolves to 0.1 times the
    /// RMS state norm of the dataset.
    pub r_threshold: Option<f64>,
    pub norm: NormSpec,
    /// Pairs with `||x_A + x_A'||` above this bound are discarded.
    pub max_pair_residual: f64,
    /// Candidate samples are taken every this many steps along each
    /// trajectory.
    pub candidate_stride: usize,
}

impl Default for SymmetryConfig {
    fn default() -> Self {
        Self {
            r_threshold: None,
            norm: NormSpec::Euclidean,
            max_pair_residual: f64::INFINITY,
            candidate_stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedSymmetry {
    pub r_threshold: f64,
    pub weights: Option<Vec<f64>>,
    pub max_pair_residual: f64,
    pub candidate_stride: usize,
}

impl SymmetryConfig {
    pub(crate) fn resolve(&self, ms: &MeasurementSet) -> Result<ResolvedSymmetry> {
        let r_threshold = match self.r_threshold {
            Some(r) if r > 0.0 => r,
            Some(r) => {
                return Err(Error::Parse {
                    path: "<symmetry config>".into(),
                    detail: format!("r_threshold must be positive, got {r}"),
                })
            }
            None => 0.1 * ms.rms_state_norm(),
        };
        let weights = match &self.norm {
            NormSpec::Euclidean => None,
            NormSpec::Weighted { weights: Some(w) } => {
                if w.len() != ms.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: ms.dim(),
                        got: w.len(),
                        context: "norm weights".into(),
                    });
                }
                if w.iter().any(|v| *v <= 0.0) {
                    return Err(Error::Parse {
                        path: "<symmetry config>".into(),
                        detail: "norm weights must be strictly positive".into(),
                    });
                }
                Some(w.clone())
            }
            NormSpec::Weighted { weights: None } => {
                let rms = ms.state_rms();
                Some(rms.iter().map(|r| 1.0 / r.max(1e-12)).collect())
            }
        };
        if self.candidate_stride == 0 {
            return Err(Error::Parse {
                path: "<symmetry config>".into(),
                detail: "candidate_stride must be at least 1".into(),
            });
        }
        Ok(ResolvedSymmetry {
            r_threshold,
            weights,
            max_pair_residual: self.max_pair_residual,
            candidate_stride: self.candidate_stride,
        })
    }
}

/// A mirrored pair of measured states with its symmetry residual
/// `||x_A + x_A'||` under the configured norm. Endpoints are stored in
/// (sample index, scenario index) order.
#[derive(Debug, Clone)]
pub struct SymmetricPair {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub residual: f64,
    pub a_id: SampleId,
    pub b_id: SampleId,
}

/// Accepted pairs, ranked by ascending residual, endpoint-disjoint.
#[derive(Debug, Clone)]
pub struct SymmetricPairSet {
    pub pairs: Vec<SymmetricPair>,
    pub dim: usize,
}

// ── KD-tree ─────────────────────────────────────────────────────────────────

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Point record inside the index: metric-scaled coordinates plus identity.
#[derive(Debug, Clone)]
pub struct IndexedPoint {
    scaled: Vec<f64>,
    pub id: SampleId,
    /// Metric norm of the original point (distance from the origin).
    pub norm: f64,
    /// Position of this point in the build input.
    pub ordinal: usize,
}

/// Exact nearest-neighbor index with axis-median splits.
#[derive(Debug)]
pub struct SpatialIndex {
    points: Vec<IndexedPoint>,
    nodes: Vec<Node>,
    weights: Option<Vec<f64>>,
    dim: usize,
}

impl SpatialIndex {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn scale(&self, x: ArrayView1<'_, f64>) -> Vec<f64> {
        match &self.weights {
            None => x.to_vec(),
            Some(w) => x.iter().zip(w).map(|(v, wk)| v * wk).collect(),
        }
    }

    /// Metric norm of an arbitrary vector under this index's weights.
    pub fn metric_norm(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.scale(x).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Original-coordinate vector of an indexed point.
    pub fn coordinates(&self, p: &IndexedPoint) -> Array1<f64> {
        match &self.weights {
            None => Array1::from_vec(p.scaled.clone()),
            Some(w) => Array1::from_shape_fn(p.scaled.len(), |k| p.scaled[k] / w[k]),
        }
    }

    fn build_nodes(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        // Split on the axis with the widest spread, at the median.
        let mut axis = 0;
        let mut best_spread = -1.0;
        for d in 0..self.dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in &self.points[start..end] {
                lo = lo.min(p.scaled[d]);
                hi = hi.max(p.scaled[d]);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                axis = d;
            }
        }
        let mid = (start + end) / 2;
        self.points[start..end].sort_unstable_by(|a, b| {
            a.scaled[axis]
                .partial_cmp(&b.scaled[axis])
                .unwrap_or(Ordering::Equal)
                .then(a.ordinal.cmp(&b.ordinal))
        });
        let value = self.points[mid].scaled[axis];
        let placeholder = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_nodes(start, mid);
        let right = self.build_nodes(mid, end);
        self.nodes[placeholder] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        placeholder
    }

    /// Exact nearest neighbor of `query` (original coordinates) among
    /// points accepted by `filter`. Distance ties break on (sample index,
    /// scenario index).
    pub fn nearest_filtered<F: Fn(&IndexedPoint) -> bool>(
        &self,
        query: ArrayView1<'_, f64>,
        filter: F,
    ) -> Option<(&IndexedPoint, f64)> {
        let q = self.scale(query);
        let mut best: Option<(usize, f64)> = None;
        self.search(0, &q, &filter, &mut best);
        best.map(|(idx, d2)| (&self.points[idx], d2.sqrt()))
    }

    fn search<F: Fn(&IndexedPoint) -> bool>(
        &self,
        node: usize,
        q: &[f64],
        filter: &F,
        best: &mut Option<(usize, f64)>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for idx in *start..*end {
                    let p = &self.points[idx];
                    if !filter(p) {
                        continue;
                    }
                    let mut d2 = 0.0;
                    for (a, b) in p.scaled.iter().zip(q) {
                        d2 += (a - b) * (a - b);
                    }
                    let better = match best {
                        None => true,
                        Some((bidx, bd2)) => {
                            d2 < *bd2
                                || (d2 == *bd2
                                    && (p.id.sample, p.id.scenario)
                                        < (
                                            self.points[*bidx].id.sample,
                                            self.points[*bidx].id.scenario,
                                        ))
                        }
                    };
                    if better {
                        *best = Some((idx, d2));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, q, filter, best);
                // The far side can still hold an equal-distance point that
                // wins the deterministic tie-break, so prune non-strictly.
                let must_visit = match best {
                    None => true,
                    Some((_, bd2)) => delta * delta <= *bd2,
                };
                if must_visit {
                    self.search(far, q, filter, best);
                }
            }
        }
    }
}

/// Build a KD-tree over candidate states. `weights` of `None` means plain
/// Euclidean distance.
pub fn build_state_index(
    points: Vec<(Array1<f64>, SampleId)>,
    weights: Option<Vec<f64>>,
) -> Result<SpatialIndex> {
    let Some((first, _)) = points.first() else {
        return Err(Error::EmptyInput);
    };
    let dim = first.len();
    let mut index = SpatialIndex {
        points: Vec::with_capacity(points.len()),
        nodes: Vec::new(),
        weights,
        dim,
    };
    for (ordinal, (x, id)) in points.into_iter().enumerate() {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
                context: "index point".into(),
            });
        }
        let scaled = index.scale(x.view());
        let norm = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
        index.points.push(IndexedPoint {
            scaled,
            id,
            norm,
            ordinal,
        });
    }
    let len = index.points.len();
    index.build_nodes(0, len);
    Ok(index)
}

/// The indexed point minimizing `||x_A + x||` among feasible points: norm
/// above the threshold and identity different from `exclude_self`.
pub fn find_symmetric_peer(
    x_a: ArrayView1<'_, f64>,
    exclude_self: Option<SampleId>,
    index: &SpatialIndex,
    r_threshold: f64,
) -> Result<(Array1<f64>, f64, SampleId)> {
    let norm_a = index.metric_norm(x_a);
    if norm_a <= r_threshold {
        return Err(Error::BelowThreshold {
            norm: norm_a,
            threshold: r_threshold,
        });
    }
    let mirrored = x_a.map(|v| -v);
    let hit = index.nearest_filtered(mirrored.view(), |p| {
        p.norm > r_threshold && Some(p.id) != exclude_self
    });
    match hit {
        Some((p, residual)) => Ok((index.coordinates(p), residual, p.id)),
        None => Err(Error::NoFeasiblePeer {
            reason: format!("no indexed point has norm above {r_threshold}"),
        }),
    }
}

// Candidate entry in the greedy pair queue; ordered so the BinaryHeap pops
// the smallest residual first with fully deterministic ties.
struct QueuedPair {
    residual: f64,
    first: SampleId,
    second: SampleId,
    owner_ordinal: usize,
    peer_ordinal: usize,
}

impl QueuedPair {
    fn key(&self) -> (f64, usize, usize, usize, usize) {
        (
            self.residual,
            self.first.sample,
            self.first.scenario,
            self.second.sample,
            self.second.scenario,
        )
    }
}

impl PartialEq for QueuedPair {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for QueuedPair {}
impl PartialOrd for QueuedPair {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedPair {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want ascending residual.
        other
            .key()
            .partial_cmp(&self.key())
            .unwrap_or(Ordering::Equal)
    }
}

/// Harvest candidate samples from every trajectory, find each candidate's
/// best symmetric peer, and greedily accept endpoint-disjoint pairs in
/// ascending-residual order until `target_pairs` pairs are collected.
///
/// Fails with `InsufficientPairs` when fewer than `dim + 1` acceptable
/// pairs exist.
pub fn select_pair_set(
    ms: &MeasurementSet,
    cfg: &SymmetryConfig,
    target_pairs: usize,
) -> Result<SymmetricPairSet> {
    let resolved = cfg.resolve(ms)?;
    let n = ms.dim();
    let needed = n + 1;
    let target = target_pairs.max(needed);

    let mut candidates: Vec<(Array1<f64>, SampleId)> = Vec::new();
    for (scenario, traj) in ms.trajectories().iter().enumerate() {
        let mut sample = 0;
        while sample < traj.len() {
            candidates.push((
                traj.states().row(sample).to_owned(),
                SampleId { scenario, sample },
            ));
            sample += resolved.candidate_stride;
        }
    }
    let index = build_state_index(candidates.clone(), resolved.weights.clone())?;

    // Endpoint ordering inside a pair: by (sample index, scenario index).
    let ordered_ids = |a: SampleId, b: SampleId| -> (SampleId, SampleId) {
        if (a.sample, a.scenario) <= (b.sample, b.scenario) {
            (a, b)
        } else {
            (b, a)
        }
    };

    // All bookkeeping below is in input-ordinal space; IndexedPoint.ordinal
    // maps query hits back to it.
    let mut used = vec![false; candidates.len()];
    let mut heap: BinaryHeap<QueuedPair> = BinaryHeap::new();
    let feasible: Vec<bool> = candidates
        .iter()
        .map(|(x, _)| index.metric_norm(x.view()) > resolved.r_threshold)
        .collect();

    // Seed the queue with each feasible candidate's current best peer.
    for (ord, (x, id)) in candidates.iter().enumerate() {
        if !feasible[ord] {
            continue;
        }
        let mirrored = x.map(|v| -v);
        if let Some((peer, residual)) = index.nearest_filtered(mirrored.view(), |c| {
            c.norm > resolved.r_threshold && c.id != *id
        }) {
            let (first, second) = ordered_ids(*id, peer.id);
            heap.push(QueuedPair {
                residual,
                first,
                second,
                owner_ordinal: ord,
                peer_ordinal: peer.ordinal,
            });
        }
    }

    let mut accepted: Vec<SymmetricPair> = Vec::new();
    while let Some(cand) = heap.pop() {
        if accepted.len() >= target {
            break;
        }
        if cand.residual > resolved.max_pair_residual {
            break;
        }
        let owner = cand.owner_ordinal;
        let peer = cand.peer_ordinal;
        if used[owner] {
            continue;
        }
        if used[peer] {
            // Peer consumed by an earlier pair: re-query for this owner.
            let (x, owner_id) = &candidates[owner];
            let mirrored = x.map(|v| -v);
            if let Some((new_peer, residual)) = index.nearest_filtered(mirrored.view(), |c| {
                c.norm > resolved.r_threshold && c.id != *owner_id && !used[c.ordinal]
            }) {
                let (first, second) = ordered_ids(*owner_id, new_peer.id);
                heap.push(QueuedPair {
                    residual,
                    first,
                    second,
                    owner_ordinal: owner,
                    peer_ordinal: new_peer.ordinal,
                });
            }
            continue;
        }
        used[owner] = true;
        used[peer] = true;
        let (owner_x, owner_id) = &candidates[owner];
        let (peer_x, peer_id) = &candidates[peer];
        let (first, _) = ordered_ids(*owner_id, *peer_id);
        let (ax, a_id, bx, b_id) = if first == *owner_id {
            (owner_x.clone(), *owner_id, peer_x.clone(), *peer_id)
        } else {
            (peer_x.clone(), *peer_id, owner_x.clone(), *owner_id)
        };
        accepted.push(SymmetricPair {
            a: ax,
            b: bx,
            residual: cand.residual,
            a_id,
            b_id,
        });
    }

    if accepted.len() < needed {
        return Err(Error::InsufficientPairs {
            found: accepted.len(),
            needed,
        });
    }
    Ok(SymmetricPairSet {
        pairs: accepted,
        dim: n,
    })
}
