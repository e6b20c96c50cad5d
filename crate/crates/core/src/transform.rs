//! Construction of the linear map `H` that sends the parallelotope spanned
//! by selected symmetric pairs to a hyperrectangle.
//!
//! With a base vertex `x_0` and edge vertices `x_1 .. x_N`, the edge matrix
//! is `E = [x_1 - x_0, ..., x_N - x_0]` and `H = E^-1`: every edge maps to
//! a unit basis vector, so the vertex set maps to (a translate of) the unit
//! hypercube. `H` depends only on vertex differences and is therefore
//! invariant under translating all vertices by a common shift.

use ndarray::{Array1, Array2};
use ndarray_linalg::Inverse;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cond2, smallest_singular_value};
use crate::simgen::{MeasurementSet, Trajectory};
use crate::symmetry::{SampleId, SymmetricPairSet};

/// Normalized-singular-value floor below which a candidate edge is treated
/// as linearly dependent on the ones already chosen.
const RANK_GUARD: f64 = 1e-9;

/// One selected vertex with its mirrored partner.
#[derive(Debug, Clone)]
pub struct VertexPair {
    pub vertex: Array1<f64>,
    pub mirror: Array1<f64>,
    pub vertex_id: SampleId,
    pub mirror_id: SampleId,
}

/// Base vertex plus N edge vertices (with mirrors) and the edge matrix.
#[derive(Debug, Clone)]
pub struct VertexSet {
    pub base: VertexPair,
    pub edges: Vec<VertexPair>,
    /// Columns are `x_j - x_0` in selection order.
    pub edge_matrix: Array2<f64>,
}

impl VertexSet {
    pub fn dim(&self) -> usize {
        self.base.vertex.len()
    }

    /// Build directly from a base vertex and edge vertices, mirrors taken
    /// as exact negations. Mainly for synthetic geometry.
    pub fn from_vertices(base: Array1<f64>, edge_vertices: Vec<Array1<f64>>) -> Result<Self> {
        let n = base.len();
        if edge_vertices.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: edge_vertices.len(),
                context: "edge vertices".into(),
            });
        }
        let mut edge_matrix = Array2::<f64>::zeros((n, n));
        for (j, v) in edge_vertices.iter().enumerate() {
            for k in 0..n {
                edge_matrix[(k, j)] = v[k] - base[k];
            }
        }
        let mk_pair = |v: &Array1<f64>, s: usize| VertexPair {
            vertex: v.clone(),
            mirror: v.map(|x| -x),
            vertex_id: SampleId {
                scenario: s,
                sample: 0,
            },
            mirror_id: SampleId {
                scenario: s,
                sample: 1,
            },
        };
        Ok(VertexSet {
            base: mk_pair(&base, 0),
            edges: edge_vertices
                .iter()
                .enumerate()
                .map(|(j, v)| mk_pair(v, j + 1))
                .collect(),
            edge_matrix,
        })
    }
}

/// The assembled transformation: `h` maps x-space to z-space, `h_inv` is
/// the generating edge matrix.
#[derive(Debug, Clone)]
pub struct Transformation {
    h: Array2<f64>,
    h_inv: Array2<f64>,
    condition_number: f64,
    quality: f64,
}

#[derive(Serialize)]
struct TransformationDoc<'a> {
    h: &'a Vec<Vec<f64>>,
    h_inv: &'a Vec<Vec<f64>>,
    condition_number: f64,
    quality: f64,
}

impl Transformation {
    pub fn h(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn h_inv(&self) -> &Array2<f64> {
        &self.h_inv
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    /// Hyperrectangle symmetry score of the generating vertex set; zero
    /// means exactly mirrored images.
    pub fn quality(&self) -> f64 {
        self.quality
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Identity transformation of dimension `n`.
    pub fn identity(n: usize) -> Self {
        Transformation {
            h: Array2::eye(n),
            h_inv: Array2::eye(n),
            condition_number: 1.0,
            quality: 0.0,
        }
    }

    /// Map a single state vector into z-space.
    pub fn to_z(&self, x: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
        self.h.dot(&x)
    }

    /// Map a single z-space vector back to x-space.
    pub fn to_x(&self, z: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
        self.h_inv.dot(&z)
    }

    /// Row-major JSON audit record.
    pub fn to_json(&self) -> String {
        let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> {
            m.rows().into_iter().map(|r| r.to_vec()).collect()
        };
        let h = rows(&self.h);
        let h_inv = rows(&self.h_inv);
        serde_json::to_string_pretty(&TransformationDoc {
            h: &h,
            h_inv: &h_inv,
            condition_number: self.condition_number,
            quality: self.quality,
        })
        .expect("transformation serializes")
    }
}

/// Greedy vertex selection. The base vertex anchors at the first endpoint
/// of the lowest-residual pair; each remaining pair offers both endpoints
/// as candidate edge vertices. Candidates are scanned in ascending edge
/// length (ties by pair order) and accepted only while the growing edge
/// matrix stays numerically full-rank, which keeps its smallest singular
/// value as large as the candidate pool allows. On an exactly mirrored
/// parallelotope whose edge matrix has condition number below sqrt(2),
/// every edge is strictly shorter than any vertex diagonal, so this
/// recovers the true edge set up to signed permutation.
pub fn assemble_vertex_set(pairs: &SymmetricPairSet, cond_bound: f64) -> Result<VertexSet> {
    let n = pairs.dim;
    if pairs.pairs.len() < 2 {
        return Err(Error::InsufficientPairs {
            found: pairs.pairs.len(),
            needed: n + 1,
        });
    }
    let base_pair = &pairs.pairs[0];
    let base = VertexPair {
        vertex: base_pair.a.clone(),
        mirror: base_pair.b.clone(),
        vertex_id: base_pair.a_id,
        mirror_id: base_pair.b_id,
    };

    // Candidate edge vertices: both endpoints of every remaining pair.
    struct Candidate {
        vertex: Array1<f64>,
        mirror: Array1<f64>,
        vertex_id: SampleId,
        mirror_id: SampleId,
        diff: Array1<f64>,
        len: f64,
        order: usize,
    }
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut order = 0usize;
    for pair in pairs.pairs.iter().skip(1) {
        for (v, m, vid, mid) in [
            (&pair.a, &pair.b, pair.a_id, pair.b_id),
            (&pair.b, &pair.a, pair.b_id, pair.a_id),
        ] {
            let diff = v - &base.vertex;
            let len = diff.dot(&diff).sqrt();
            candidates.push(Candidate {
                vertex: v.clone(),
                mirror: m.clone(),
                vertex_id: vid,
                mirror_id: mid,
                diff,
                len,
                order,
            });
            order += 1;
        }
    }

    let mut scan: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].len > 0.0)
        .collect();
    scan.sort_by(|&a, &b| {
        candidates[a]
            .len
            .partial_cmp(&candidates[b].len)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(candidates[a].order.cmp(&candidates[b].order))
    });

    let mut chosen: Vec<usize> = Vec::new();
    let mut normalized_cols: Vec<Array1<f64>> = Vec::new();
    for idx in scan {
        if chosen.len() == n {
            break;
        }
        let cand = &candidates[idx];
        let unit = &cand.diff / cand.len;
        let mut m = Array2::<f64>::zeros((n, normalized_cols.len() + 1));
        for (c, col) in normalized_cols.iter().enumerate() {
            m.column_mut(c).assign(col);
        }
        m.column_mut(normalized_cols.len()).assign(&unit);
        if smallest_singular_value(&m)? <= RANK_GUARD {
            continue;
        }
        normalized_cols.push(unit);
        chosen.push(idx);
    }
    if chosen.len() < n {
        return Err(Error::DegenerateGeometry {
            best_cond: f64::INFINITY,
            bound: cond_bound,
        });
    }

    let mut edge_matrix = Array2::<f64>::zeros((n, n));
    for (j, &idx) in chosen.iter().enumerate() {
        edge_matrix.column_mut(j).assign(&candidates[idx].diff);
    }
    let cond = cond2(&edge_matrix)?;
    if cond > cond_bound {
        return Err(Error::DegenerateGeometry {
            best_cond: cond,
            bound: cond_bound,
        });
    }
    let edges = chosen
        .iter()
        .map(|&idx| VertexPair {
            vertex: candidates[idx].vertex.clone(),
            mirror: candidates[idx].mirror.clone(),
            vertex_id: candidates[idx].vertex_id,
            mirror_id: candidates[idx].mirror_id,
        })
        .collect();
    Ok(VertexSet {
        base,
        edges,
        edge_matrix,
    })
}

/// Invert the edge matrix: `H = E^-1`, `H^-1 = E`.
pub fn build_transformation(vs: &VertexSet) -> Result<Transformation> {
    let e = &vs.edge_matrix;
    let smin = smallest_singular_value(e)?;
    let smax = e.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if smin <= 1e-14 * smax.max(1.0) {
        return Err(Error::SingularEdgeMatrix);
    }
    let h = e.inv().map_err(|_| Error::SingularEdgeMatrix)?;
    let mut t = Transformation {
        h,
        h_inv: e.clone(),
        condition_number: cond2(e)?,
        quality: 0.0,
    };
    t.quality = verify_hyperrectangle(&t, vs);
    Ok(t)
}

/// Map every trajectory sample by `H`; timestamps and scenario ids are
/// unchanged.
pub fn apply_transformation(t: &Transformation, ms: &MeasurementSet) -> Result<MeasurementSet> {
    if t.dim() != ms.dim() {
        return Err(Error::DimensionMismatch {
            expected: ms.dim(),
            got: t.dim(),
            context: "transformation vs measurement set".into(),
        });
    }
    let ht = t.h.t();
    let mapped: Result<Vec<Trajectory>> = ms
        .trajectories()
        .iter()
        .map(|traj| {
            let states = traj.states().dot(&ht);
            Trajectory::new(traj.times().to_vec(), states, traj.scenario_id())
        })
        .collect();
    MeasurementSet::new(mapped?, ms.labels().to_vec())
}

/// Symmetry score of the z-space image of the vertex pairs: the worst
/// `||z + z'||` over pairs divided by the mean `||z||` over endpoints.
/// Zero means the image is perfectly mirrored.
pub fn verify_hyperrectangle(t: &Transformation, vs: &VertexSet) -> f64 {
    let mut worst = 0.0f64;
    let mut norm_acc = 0.0f64;
    let mut count = 0usize;
    let mut visit = |pair: &VertexPair| {
        let za = t.h.dot(&pair.vertex);
        let zb = t.h.dot(&pair.mirror);
        let s = &za + &zb;
        worst = worst.max(s.dot(&s).sqrt());
        norm_acc += za.dot(&za).sqrt() + zb.dot(&zb).sqrt();
        count += 2;
    };
    visit(&vs.base);
    for e in &vs.edges {
        visit(e);
    }
    let mean = norm_acc / count as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    worst / mean
}
