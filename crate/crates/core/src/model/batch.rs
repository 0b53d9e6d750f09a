//! Packing several structures into one disjoint graph.
//!
//! Node, edge and composition-token indices are offset per structure; no
//! edge ever connects two structures.

use crate::autodiff::{Mat, Segment};
use crate::structure::{AtomicStructure, NeighborGraph, Vec3};

/// Embedding row shared by the composition and interaction streams for
/// masked atoms; rows `0..100` hold elements `1..=100`.
pub const MASK_ROW: usize = 100;
pub const EMBEDDING_ROWS: usize = 101;

/// One structure with its fixed graph and the set of masked node indices.
#[derive(Clone, Copy, Debug)]
pub struct GraphSample<'a> {
    pub structure: &'a AtomicStructure,
    pub graph: &'a NeighborGraph,
    pub masked: &'a [usize],
}

impl<'a> GraphSample<'a> {
    pub fn new(structure: &'a AtomicStructure, graph: &'a NeighborGraph) -> Self {
        Self {
            structure,
            graph,
            masked: &[],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub node_graph: Vec<usize>,
    pub graph_offsets: Vec<usize>,
    pub graph_sizes: Vec<usize>,
    pub positions: Mat,
    pub species: Vec<u8>,
    /// Embedding row per node (`MASK_ROW` when masked).
    pub embed_rows: Vec<usize>,
    pub masked: Vec<bool>,

    pub centers: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub edge_offsets: Mat,
    pub degree: Mat,

    /// Embedding row per composition token.
    pub token_rows: Vec<usize>,
    pub token_counts: Vec<f64>,
    pub token_segments: Vec<Segment>,
    pub node_token: Vec<usize>,

    pub lattice: Mat,
    pub periodic: Vec<bool>,
}

impl Batch {
    pub fn new(samples: &[GraphSample]) -> Self {
        let mut b = Batch {
            num_graphs: samples.len(),
            num_nodes: 0,
            node_graph: Vec::new(),
            graph_offsets: Vec::new(),
            graph_sizes: Vec::new(),
            positions: Mat::zeros((0, 3)),
            species: Vec::new(),
            embed_rows: Vec::new(),
            masked: Vec::new(),
            centers: Vec::new(),
            neighbors: Vec::new(),
            edge_offsets: Mat::zeros((0, 3)),
            degree: Mat::zeros((0, 1)),
            token_rows: Vec::new(),
            token_counts: Vec::new(),
            token_segments: Vec::new(),
            node_token: Vec::new(),
            lattice: Mat::zeros((samples.len(), 9)),
            periodic: Vec::new(),
        };
        let mut pos = Vec::new();
        let mut offs = Vec::new();
        let mut deg = Vec::new();
        for (g, sample) in samples.iter().enumerate() {
            let s = sample.structure;
            let n = s.len();
            assert_eq!(sample.graph.num_nodes, n, "graph/structure size mismatch");
            let base = b.num_nodes;
            b.graph_offsets.push(base);
            b.graph_sizes.push(n);
            let mut masked = vec![false; n];
            for &m in sample.masked {
                masked[m] = true;
            }
            for i in 0..n {
                b.node_graph.push(g);
                pos.extend_from_slice(&s.positions[i]);
                b.species.push(s.species[i]);
                b.embed_rows.push(if masked[i] {
                    MASK_ROW
                } else {
                    s.species[i] as usize - 1
                });
            }
            b.masked.extend_from_slice(&masked);
            for (e, off) in sample.graph.edges.iter().zip(&sample.graph.offsets) {
                b.centers.push(base + e.center);
                b.neighbors.push(base + e.neighbor);
                offs.extend_from_slice(off);
            }
            deg.extend(sample.graph.degree().into_iter().map(|d| d as f64));

            // composition tokens over embedding rows, mask token last
            let mut counts = [0u32; EMBEDDING_ROWS];
            for i in 0..n {
                counts[b.embed_rows[base + i]] += 1;
            }
            let tok_base = b.token_rows.len();
            let mut row_to_tok = [usize::MAX; EMBEDDING_ROWS];
            for (row, &c) in counts.iter().enumerate() {
                if c > 0 {
                    row_to_tok[row] = b.token_rows.len();
                    b.token_rows.push(row);
                    b.token_counts.push(c as f64);
                }
            }
            b.token_segments.push(Segment {
                start: tok_base,
                len: b.token_rows.len() - tok_base,
            });
            for i in 0..n {
                b.node_token.push(row_to_tok[b.embed_rows[base + i]]);
            }

            b.periodic.push(s.periodic);
            if s.periodic {
                let f = lattice_features(&s.cell.expect("periodic has cell"), n);
                for (k, v) in f.iter().enumerate() {
                    b.lattice[[g, k]] = *v;
                }
            }
            b.num_nodes += n;
        }
        b.positions = Mat::from_shape_vec((b.num_nodes, 3), pos).expect("positions");
        b.edge_offsets =
            Mat::from_shape_vec((b.centers.len(), 3), offs).expect("edge offsets");
        b.degree = Mat::from_shape_vec((b.num_nodes, 1), deg).expect("degree");
        b
    }

    pub fn num_edges(&self) -> usize {
        self.centers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_rows.len()
    }

    /// `B × N` matrix averaging node rows per structure.
    pub fn node_mean_matrix(&self) -> Mat {
        let mut m = Mat::zeros((self.num_graphs, self.num_nodes));
        for (i, &g) in self.node_graph.iter().enumerate() {
            m[[g, i]] = 1.0 / self.graph_sizes[g] as f64;
        }
        m
    }

    /// `B × N` matrix summing node rows per structure.
    pub fn node_sum_matrix(&self) -> Mat {
        let mut m = Mat::zeros((self.num_graphs, self.num_nodes));
        for (i, &g) in self.node_graph.iter().enumerate() {
            m[[g, i]] = 1.0;
        }
        m
    }

    /// `B × T` count-weighted token mean per structure.
    pub fn token_mean_matrix(&self) -> Mat {
        let mut m = Mat::zeros((self.num_graphs, self.num_tokens()));
        for (g, seg) in self.token_segments.iter().enumerate() {
            let total: f64 = self.token_counts[seg.start..seg.start + seg.len].iter().sum();
            for t in seg.start..seg.start + seg.len {
                m[[g, t]] = self.token_counts[t] / total;
            }
        }
        m
    }

    pub fn masked_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes).filter(|&i| self.masked[i]).collect()
    }

    /// Positions of one structure from a flat `N × 3` matrix.
    pub fn split_rows(&self, m: &Mat, graph: usize) -> Vec<Vec3> {
        let start = self.graph_offsets[graph];
        (start..start + self.graph_sizes[graph])
            .map(|i| [m[[i, 0]], m[[i, 1]], m[[i, 2]]])
            .collect()
    }
}

/// Nine scale-aware cell descriptors: three lengths divided by their mean,
/// three inter-vector angles divided by π, `ln(V/N)`, `ln(N/V)` (unit mass per
/// atom) and an orthogonality score `1 − mean |cos angle|`.
pub fn lattice_features(cell: &[[f64; 3]; 3], n_atoms: usize) -> [f64; 9] {
    use crate::structure::{det3, dot3, norm3};
    let lens = [norm3(&cell[0]), norm3(&cell[1]), norm3(&cell[2])];
    let mean = (lens[0] + lens[1] + lens[2]) / 3.0;
    let cosines = [
        dot3(&cell[1], &cell[2]) / (lens[1] * lens[2]),
        dot3(&cell[0], &cell[2]) / (lens[0] * lens[2]),
        dot3(&cell[0], &cell[1]) / (lens[0] * lens[1]),
    ];
    let angles = cosines.map(|c| c.clamp(-1.0, 1.0).acos() / std::f64::consts::PI);
    let vol = det3(cell).abs();
    let n = n_atoms as f64;
    let ortho = 1.0 - cosines.iter().map(|c| c.abs()).sum::<f64>() / 3.0;
    [
        lens[0] / mean,
        lens[1] / mean,
        lens[2] / mean,
        angles[0],
        angles[1],
        angles[2],
        (vol / n).ln(),
        (n / vol).ln(),
        ortho,
    ]
}
