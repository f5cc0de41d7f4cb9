//! Style propagation over a body-region graph.
//!
//! Regions of a segmented figure form a small graph: nodes are regions,
//! edges follow the anatomical adjacency (hair-face, face-torso, ...). Each
//! node carries an anchor point (its region centroid) and a scalar
//! eccentricity `e`: the distance from the figure's gravity center to the
//! anchor.
//!
//! [`partition_neighbors`] splits every node's closed neighborhood into
//! three subsets by comparing eccentricities: ties (subset 0), neighbors
//! closer to the gravity center (subset 1), and neighbors farther from it
//! (subset 2). [`graph_reason`] then mixes style rows over the neighborhood,
//! applying one learned `C x C` matrix per subset and normalizing each
//! contribution by its subset's cardinality:
//!
//! ```text
//! out(i) = sum over j in B(i) of  st(j) * W[r_i(j)] / Z_i(j)
//! ```
//!
//! where `B(i)` is `{i} union neighbors(i)` and `Z_i(j)` counts the members
//! of `B(i)` sharing `j`'s subset label. The mixed rows estimate styles for
//! regions that are invisible in the source view; [`merge_styles`] selects,
//! per pixel, the reasoned row for occluded pixels and the pooled row
//! everywhere else.

use crate::error::{Error, Result};
use crate::region::{OcclusionMask, StyleCodeMatrix};
use crate::tensor::{SegmentationMap, Tensor};

/// Relative tolerance for eccentricity ties, scaled by the largest
/// gravity-to-anchor distance in the graph.
pub const TIE_RELATIVE_TOLERANCE: f64 = 1e-3;

/// Subset label of a neighbor whose eccentricity ties the center node's.
pub const SUBSET_TIE: u8 = 0;
/// Subset label of a neighbor strictly closer to the gravity center.
pub const SUBSET_CLOSER: u8 = 1;
/// Subset label of a neighbor strictly farther from the gravity center.
pub const SUBSET_FARTHER: u8 = 2;

/// Region adjacency plus the geometry needed for neighbor partitioning.
#[derive(Debug, Clone)]
pub struct BodyGraph {
    nodes: usize,
    /// Normalized (lo, hi) pairs, deduplicated, no self-loops.
    edges: Vec<(usize, usize)>,
    /// Sorted neighbor lists, one per node.
    adjacency: Vec<Vec<usize>>,
    /// Region anchor points as (y, x); absent regions anchor at the gravity
    /// center.
    anchors: Vec<(f64, f64)>,
    gravity_center: (f64, f64),
    /// Euclidean distance from the gravity center to each anchor.
    eccentricity: Vec<f64>,
}

fn normalize_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut normalized: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a >= nodes {
            return Err(Error::LabelOutOfRange {
                label: a,
                regions: nodes,
            });
        }
        if b >= nodes {
            return Err(Error::LabelOutOfRange {
                label: b,
                regions: nodes,
            });
        }
        if a == b {
            return Err(Error::InvalidParameter {
                name: "edges",
                reason: format!("self-loop on node {a}"),
            });
        }
        normalized.push((a.min(b), a.max(b)));
    }
    normalized.sort_unstable();
    normalized.dedup();
    Ok(normalized)
}

impl BodyGraph {
    /// Builds a graph from explicit geometry. `anchors` holds one `(y, x)`
    /// point per node; eccentricities are derived.
    pub fn from_parts(
        nodes: usize,
        edges: &[(usize, usize)],
        anchors: Vec<(f64, f64)>,
        gravity_center: (f64, f64),
    ) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidParameter {
                name: "nodes",
                reason: "graph needs at least one node".into(),
            });
        }
        if anchors.len() != nodes {
            return Err(Error::LengthMismatch {
                shape: vec![nodes],
                expected: nodes,
                got: anchors.len(),
            });
        }
        for (i, &(y, x)) in anchors.iter().enumerate() {
            if !y.is_finite() || !x.is_finite() {
                return Err(Error::NonFinite {
                    context: "BodyGraph anchors",
                    index: i,
                });
            }
        }
        if !gravity_center.0.is_finite() || !gravity_center.1.is_finite() {
            return Err(Error::NonFinite {
                context: "BodyGraph gravity center",
                index: 0,
            });
        }
        let edges = normalize_edges(nodes, edges)?;
        let mut adjacency = vec![Vec::new(); nodes];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let eccentricity = anchors
            .iter()
            .map(|&(y, x)| {
                let dy = y - gravity_center.0;
                let dx = x - gravity_center.1;
                (dy * dy + dx * dx).sqrt()
            })
            .collect();
        Ok(BodyGraph {
            nodes,
            edges,
            adjacency,
            anchors,
            gravity_center,
            eccentricity,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    pub fn gravity_center(&self) -> (f64, f64) {
        self.gravity_center
    }

    pub fn eccentricity(&self) -> &[f64] {
        &self.eccentricity
    }

    /// Absolute tie tolerance used when comparing eccentricities.
    pub fn tie_tolerance(&self) -> f64 {
        let scale = self.eccentricity.iter().copied().fold(0.0, f64::max);
        TIE_RELATIVE_TOLERANCE * scale
    }
}

/// Builds the region graph of a segmentation: anchors are region centroids
/// (in pixel coordinates), the gravity center is the mean centroid of the
/// present regions, and absent regions anchor at the gravity center itself.
pub fn build_body_graph(s: &SegmentationMap, edges: &[(usize, usize)]) -> Result<BodyGraph> {
    let n = s.regions();
    let (h, w) = (s.height(), s.width());
    let mut sum_y = vec![0.0f64; n];
    let mut sum_x = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            let label = s.label(y, x);
            sum_y[label] += y as f64;
            sum_x[label] += x as f64;
            counts[label] += 1;
        }
    }

    let mut centroid_sum = (0.0f64, 0.0f64);
    let mut present = 0usize;
    let mut anchors = vec![None; n];
    for region in 0..n {
        if counts[region] == 0 {
            continue;
        }
        let c = (
            sum_y[region] / counts[region] as f64,
            sum_x[region] / counts[region] as f64,
        );
        anchors[region] = Some(c);
        centroid_sum.0 += c.0;
        centroid_sum.1 += c.1;
        present += 1;
    }
    if present == 0 {
        return Err(Error::InvalidParameter {
            name: "s",
            reason: "segmentation has no pixels".into(),
        });
    }
    let gravity = (
        centroid_sum.0 / present as f64,
        centroid_sum.1 / present as f64,
    );
    let anchors = anchors
        .into_iter()
        .map(|a| a.unwrap_or(gravity))
        .collect::<Vec<_>>();
    BodyGraph::from_parts(n, edges, anchors, gravity)
}

/// The three `C x C` mixing matrices, indexed by subset label.
#[derive(Debug, Clone)]
pub struct SubsetWeights {
    channels: usize,
    w: [Tensor; 3],
}

impl SubsetWeights {
    pub fn new(w0: Tensor, w1: Tensor, w2: Tensor) -> Result<Self> {
        let c = match w0.shape() {
            [r, k] if r == k => *r,
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "SubsetWeights",
                    expected: vec![0, 0],
                    got: w0.shape().to_vec(),
                })
            }
        };
        for w in [&w1, &w2] {
            if w.shape() != [c, c] {
                return Err(Error::ShapeMismatch {
                    context: "SubsetWeights",
                    expected: vec![c, c],
                    got: w.shape().to_vec(),
                });
            }
        }
        Ok(SubsetWeights {
            channels: c,
            w: [w0, w1, w2],
        })
    }

    /// Three identity matrices; useful as a neutral baseline.
    pub fn identity(channels: usize) -> Result<Self> {
        let eye = Tensor::from_fn2(channels, channels, |i, j| if i == j { 1.0 } else { 0.0 })?;
        SubsetWeights::new(eye.clone(), eye.clone(), eye)
    }

    /// Seeded random matrices with entries in `[-0.5, 0.5]`.
    pub fn seeded(channels: usize, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut make = || Tensor::from_fn2(channels, channels, |_, _| rng.gen_range(-0.5..=0.5f32));
        let w0 = make()?;
        let w1 = make()?;
        let w2 = make()?;
        SubsetWeights::new(w0, w1, w2)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn matrix(&self, subset: u8) -> &Tensor {
        &self.w[subset as usize]
    }
}

/// Subset labels for every node's closed neighborhood.
///
/// `labels[i]` lists `(j, subset)` for each `j` in `B(i)`, self first and
/// neighbors in ascending node order.
pub fn partition_neighbors(g: &BodyGraph) -> Vec<Vec<(usize, u8)>> {
    let tol = g.tie_tolerance();
    let e = g.eccentricity();
    (0..g.nodes())
        .map(|i| {
            let mut members = Vec::with_capacity(1 + g.neighbors(i).len());
            members.push((i, SUBSET_TIE));
            for &j in g.neighbors(i) {
                let diff = e[j] - e[i];
                let label = if diff.abs() <= tol {
                    SUBSET_TIE
                } else if diff < 0.0 {
                    SUBSET_CLOSER
                } else {
                    SUBSET_FARTHER
                };
                members.push((j, label));
            }
            members
        })
        .collect()
}

/// Mixes style rows over each node's neighborhood with per-subset weights
/// and cardinality normalization (see the module docs for the formula).
///
/// A node is present in the output when any member of its neighborhood was
/// present in the input; rows with no present contributor stay exactly zero.
pub fn graph_reason(
    st: &StyleCodeMatrix,
    g: &BodyGraph,
    w: &SubsetWeights,
) -> Result<StyleCodeMatrix> {
    if st.regions() != g.nodes() {
        return Err(Error::InvalidParameter {
            name: "st",
            reason: format!("{} style rows for a {}-node graph", st.regions(), g.nodes()),
        });
    }
    if w.channels() != st.channels() {
        return Err(Error::ShapeMismatch {
            context: "graph_reason",
            expected: vec![st.channels(), st.channels()],
            got: w.matrix(0).shape().to_vec(),
        });
    }
    let c = st.channels();
    let partition = partition_neighbors(g);
    let mut codes = vec![0.0f32; st.regions() * c];
    let mut presence = vec![false; st.regions()];
    for i in 0..g.nodes() {
        let members = &partition[i];
        let mut subset_size = [0usize; 3];
        for &(_, label) in members {
            subset_size[label as usize] += 1;
        }
        let mut acc = vec![0.0f64; c];
        for &(j, label) in members {
            presence[i] |= st.present(j);
            let z = subset_size[label as usize] as f64;
            let row = st.row(j);
            let m = w.matrix(label);
            // acc += (row * m) / z, row treated as 1 x C
            for out_ch in 0..c {
                let mut dot = 0.0f64;
                for in_ch in 0..c {
                    dot += row[in_ch] as f64 * m.at2(in_ch, out_ch) as f64;
                }
                acc[out_ch] += dot / z;
            }
        }
        for (out_ch, &v) in acc.iter().enumerate() {
            codes[i * c + out_ch] = v as f32;
        }
    }
    // Rows without any present contributor are mathematically zero, but keep
    // the stored values exact in the face of float rounding.
    for (i, &p) in presence.iter().enumerate() {
        if !p {
            codes[i * c..(i + 1) * c].fill(0.0);
        }
    }
    StyleCodeMatrix::new(st.regions(), c, codes, presence)
}

/// Builds the per-pixel conditioning map: occluded pixels take their
/// region's reasoned style row, all others take the pooled row.
pub fn merge_styles(
    st: &StyleCodeMatrix,
    st_reasoned: &StyleCodeMatrix,
    m_oc: &OcclusionMask,
    s_g: &SegmentationMap,
) -> Result<Tensor> {
    if st.regions() != s_g.regions() || st_reasoned.regions() != s_g.regions() {
        return Err(Error::InvalidParameter {
            name: "st",
            reason: format!(
                "style matrices ({}, {}) must match segmentation regions ({})",
                st.regions(),
                st_reasoned.regions(),
                s_g.regions()
            ),
        });
    }
    if st.channels() != st_reasoned.channels() {
        return Err(Error::ShapeMismatch {
            context: "merge_styles",
            expected: vec![st.regions(), st.channels()],
            got: vec![st_reasoned.regions(), st_reasoned.channels()],
        });
    }
    if m_oc.height() != s_g.height() || m_oc.width() != s_g.width() {
        return Err(Error::ShapeMismatch {
            context: "merge_styles",
            expected: vec![s_g.height(), s_g.width()],
            got: vec![m_oc.height(), m_oc.width()],
        });
    }
    let (c, h, w) = (st.channels(), s_g.height(), s_g.width());
    let plane = h * w;
    let mut data = vec![0.0f32; c * plane];
    for y in 0..h {
        for x in 0..w {
            let label = s_g.label(y, x);
            let row = if m_oc.occluded(y, x) {
                st_reasoned.row(label)
            } else {
                st.row(label)
            };
            let p = y * w + x;
            for ch in 0..c {
                data[ch * plane + p] = row[ch];
            }
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Parses a standalone graph description of the form
/// `{"nodes": N, "edges": [[i, j], ...]}` and validates the edge endpoints.
pub fn parse_graph_config(json: &str) -> Result<(usize, Vec<(usize, usize)>)> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Doc {
        nodes: usize,
        edges: Vec<(usize, usize)>,
    }
    let doc: Doc = serde_json::from_str(json)?;
    if doc.nodes == 0 {
        return Err(Error::InvalidParameter {
            name: "nodes",
            reason: "graph needs at least one node".into(),
        });
    }
    for &(a, b) in &doc.edges {
        if a >= doc.nodes || b >= doc.nodes {
            return Err(Error::InvalidParameter {
                name: "edges",
                reason: format!("edge ({a}, {b}) out of range for {} nodes", doc.nodes),
            });
        }
    }
    Ok((doc.nodes, doc.edges))
}
