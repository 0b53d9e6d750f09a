//! Atomic structures, radius-cutoff neighbor graphs and composition tokens.
//!
//! Every geometric quantity downstream (radial bases, spherical harmonics,
//! message passing, forces) is computed from a [`NeighborGraph`]. The graph is
//! built once per input from plain `f64` positions and then treated as fixed,
//! so differentiating with respect to positions never re-enumerates edges.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const MAX_Z: u8 = 100;

#[inline]
pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn det3(m: &Mat3) -> f64 {
    dot3(&m[0], &cross3(&m[1], &m[2]))
}

/// Row-vector times matrix: `v · M` where rows of `M` are lattice vectors.
#[inline]
pub fn vec_mat(v: &Vec3, m: &Mat3) -> Vec3 {
    [
        v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
        v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
        v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
    ]
}

/// `M · v` for a rotation acting on column vectors.
#[inline]
pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

pub fn inverse3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if det.abs() < 1e-300 {
        return None;
    }
    let c0 = cross3(&m[1], &m[2]);
    let c1 = cross3(&m[2], &m[0]);
    let c2 = cross3(&m[0], &m[1]);
    // inverse columns are the cofactor rows
    Some([
        [c0[0] / det, c1[0] / det, c2[0] / det],
        [c0[1] / det, c1[1] / det, c2[1] / det],
        [c0[2] / det, c1[2] / det, c2[2] / det],
    ])
}

/// A value attached to a structure. Unknown keys from files are kept as
/// `Text` so they round-trip verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelValue {
    Float(f64),
    Int(i64),
    Text(String),
    PerAtom(Vec<Vec3>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels(pub IndexMap<String, LabelValue>);

impl Labels {
    pub fn get(&self, key: &str) -> Option<&LabelValue> {
        self.0.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: LabelValue) {
        self.0.insert(key.into(), value);
    }

    pub fn float(&self, key: &str) -> Option<f64> {
        match self.0.get(key)? {
            LabelValue::Float(v) => Some(*v),
            LabelValue::Int(v) => Some(*v as f64),
            LabelValue::Text(s) => s.parse().ok(),
            LabelValue::PerAtom(_) => None,
        }
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        match self.0.get(key)? {
            LabelValue::Int(v) => Some(*v),
            LabelValue::Text(s) => s.parse().ok(),
            _ => None,
        }
    }

    pub fn energy(&self) -> Option<f64> {
        self.float("energy")
    }

    pub fn forces(&self) -> Option<&[Vec3]> {
        match self.0.get("forces")? {
            LabelValue::PerAtom(f) => Some(f),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicStructure {
    pub species: Vec<u8>,
    pub positions: Vec<Vec3>,
    /// Rows are lattice vectors, in Å.
    pub cell: Option<Mat3>,
    pub periodic: bool,
    pub labels: Labels,
}

impl AtomicStructure {
    pub fn new(species: Vec<u8>, positions: Vec<Vec3>) -> Result<Self> {
        let s = Self {
            species,
            positions,
            cell: None,
            periodic: false,
            labels: Labels::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn periodic(species: Vec<u8>, positions: Vec<Vec3>, cell: Mat3) -> Result<Self> {
        let s = Self {
            species,
            positions,
            cell: Some(cell),
            periodic: true,
            labels: Labels::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_labels(mut self, labels: Labels) -> Self {
        self.labels = labels;
        self
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return input("structure has no atoms");
        }
        if self.species.len() != self.positions.len() {
            return input(format!(
                "{} species but {} positions",
                self.species.len(),
                self.positions.len()
            ));
        }
        if let Some(&z) = self.species.iter().find(|&&z| z == 0 || z > MAX_Z) {
            return input(format!("atomic number {z} outside 1..={MAX_Z}"));
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return input("non-finite coordinate");
        }
        if let Some(cell) = &self.cell {
            if cell.iter().flatten().any(|x| !x.is_finite()) {
                return input("non-finite cell entry");
            }
        }
        if self.periodic {
            match &self.cell {
                None => return input("periodic structure without a cell"),
                Some(c) if det3(c).abs() <= 1e-8 => {
                    return input(format!("near-singular cell (det = {:e})", det3(c)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> Option<f64> {
        self.cell.as_ref().map(|c| det3(c).abs())
    }

    pub fn translated(&self, t: Vec3) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            for a in 0..3 {
                p[a] += t[a];
            }
        }
        out
    }

    /// Applies `rot` to positions, cell rows and per-atom vector labels.
    pub fn rotated(&self, rot: &Mat3) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = mat_vec(rot, p);
        }
        if let Some(cell) = &mut out.cell {
            for row in cell.iter_mut() {
                *row = mat_vec(rot, row);
            }
        }
        for v in out.labels.0.values_mut() {
            if let LabelValue::PerAtom(f) = v {
                for x in f.iter_mut() {
                    *x = mat_vec(rot, x);
                }
            }
        }
        out
    }
}

/// One directed edge: `neighbor` seen from `center` through lattice image `shift`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub center: usize,
    pub neighbor: usize,
    pub shift: [i32; 3],
}

/// Radius-cutoff graph. The displacement of an edge is
/// `x[neighbor] - x[center] + shift · cell`; the neighbor count is capped per
/// center, which is the receiving node in message passing.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub displacements: Vec<Vec3>,
    pub distances: Vec<f64>,
    /// Cartesian offset `shift · cell` for each edge (zero when non-periodic).
    pub offsets: Vec<Vec3>,
    pub cutoff: f64,
    pub max_neighbors: usize,
}

impl NeighborGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn centers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.center).collect()
    }

    pub fn neighbors(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.neighbor).collect()
    }

    pub fn degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for e in &self.edges {
            deg[e.center] += 1;
        }
        deg
    }

    /// Recomputes displacements for new positions while keeping the edge set.
    pub fn displacements_for(&self, positions: &[Vec3]) -> Vec<Vec3> {
        self.edges
            .iter()
            .zip(&self.offsets)
            .map(|(e, off)| {
                let (a, b) = (positions[e.center], positions[e.neighbor]);
                [b[0] - a[0] + off[0], b[1] - a[1] + off[1], b[2] - a[2] + off[2]]
            })
            .collect()
    }
}

/// Relative distance difference below which two candidates count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Builds the directed radius graph, enumerating every periodic image inside
/// the cutoff sphere. Centers with more than `max_neighbors` candidates keep
/// the nearest ones, ties (within [`TIE_TOLERANCE`]) broken by smaller
/// neighbor index then shift order.
pub fn build_graph(
    structure: &AtomicStructure,
    cutoff: f64,
    max_neighbors: usize,
) -> Result<NeighborGraph> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return input(format!("cutoff must be positive, got {cutoff}"));
    }
    if max_neighbors == 0 {
        return input("max_neighbors must be at least 1");
    }
    structure.validate()?;
    let n = structure.len();
    let pos = &structure.positions;

    let lattice = if structure.periodic {
        let cell = structure.cell.expect("validated");
        let inv = inverse3(&cell).expect("validated non-singular");
        let frac: Vec<Vec3> = pos.iter().map(|p| vec_mat(p, &inv)).collect();
        let vol = det3(&cell).abs();
        // plane spacing along each lattice direction
        let reach: Vec3 = std::array::from_fn(|a| {
            let b = cross3(&cell[(a + 1) % 3], &cell[(a + 2) % 3]);
            cutoff * norm3(&b) / vol
        });
        Some((cell, frac, reach))
    } else {
        None
    };

    let mut edges = Vec::new();
    let mut displacements = Vec::new();
    let mut distances = Vec::new();
    let mut offsets = Vec::new();

    for i in 0..n {
        let mut cands: Vec<(f64, usize, [i32; 3], Vec3, Vec3)> = Vec::new();
        for j in 0..n {
            let base = [
                pos[j][0] - pos[i][0],
                pos[j][1] - pos[i][1],
                pos[j][2] - pos[i][2],
            ];
            match &lattice {
                None => {
                    if i == j {
                        continue;
                    }
                    let d = norm3(&base);
                    if d < 1e-8 {
                        return input(format!("atoms {i} and {j} coincide"));
                    }
                    if d <= cutoff {
                        cands.push((d, j, [0; 3], base, [0.0; 3]));
                    }
                }
                Some((cell, frac, reach)) => {
                    let df: Vec3 = std::array::from_fn(|a| frac[j][a] - frac[i][a]);
                    let lo: [i32; 3] =
                        std::array::from_fn(|a| (-reach[a] - df[a]).floor() as i32);
                    let hi: [i32; 3] = std::array::from_fn(|a| (reach[a] - df[a]).ceil() as i32);
                    for s0 in lo[0]..=hi[0] {
                        for s1 in lo[1]..=hi[1] {
                            for s2 in lo[2]..=hi[2] {
                                let shift = [s0, s1, s2];
                                if i == j && shift == [0, 0, 0] {
                                    continue;
                                }
                                let off = vec_mat(&[s0 as f64, s1 as f64, s2 as f64], cell);
                                let r = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
                                let d = norm3(&r);
                                if d < 1e-8 {
                                    return input(format!("atoms {i} and {j} coincide"));
                                }
                                if d <= cutoff {
                                    cands.push((d, j, shift, r, off));
                                }
                            }
                        }
                    }
                }
            }
        }
        if cands.len() > max_neighbors {
            cands.sort_by(|a, b| a.0.total_cmp(&b.0));
            // distances equal up to rounding are ties, so a rigid motion
            // cannot change which neighbors survive
            let mut start = 0;
            while start < cands.len() {
                let d0 = cands[start].0;
                let end = start + cands[start..].iter().take_while(|c| c.0 - d0 <= TIE_TOLERANCE * d0).count();
                cands[start..end].sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
                start = end;
            }
            cands.truncate(max_neighbors);
        }
        cands.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
        for (d, j, shift, r, off) in cands {
            edges.push(Edge {
                center: i,
                neighbor: j,
                shift,
            });
            displacements.push(r);
            distances.push(d);
            offsets.push(off);
        }
    }

    Ok(NeighborGraph {
        num_nodes: n,
        edges,
        displacements,
        distances,
        offsets,
        cutoff,
        max_neighbors,
    })
}

/// Unique-element tokens `(z, count)` in ascending `z`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub tokens: Vec<(u8, u32)>,
}

impl Composition {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_atoms(&self) -> u32 {
        self.tokens.iter().map(|t| t.1).sum()
    }

    pub fn element_set(&self) -> Vec<u8> {
        self.tokens.iter().map(|t| t.0).collect()
    }

    pub fn token_of(&self, z: u8) -> Option<usize> {
        self.tokens.binary_search_by_key(&z, |t| t.0).ok()
    }
}

pub fn compress_composition(structure: &AtomicStructure) -> Result<Composition> {
    structure.validate()?;
    Ok(compress_species(&structure.species))
}

pub fn compress_species(species: &[u8]) -> Composition {
    let mut counts = [0u32; 256];
    for &z in species {
        counts[z as usize] += 1;
    }
    let tokens = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(z, &c)| (z as u8, c))
        .collect();
    Composition { tokens }
}

/// Mean distance from each atom to its nearest neighbor (minimum image for
/// periodic inputs, including an atom's own images). Single isolated atoms
/// contribute nothing; returns `None` when no atom has a neighbor.
pub fn mean_nearest_neighbor_distance(structure: &AtomicStructure) -> Option<f64> {
    let n = structure.len();
    let span = if structure.periodic {
        let c = structure.cell.as_ref()?;
        c.iter().map(norm3).fold(0.0, f64::max) * 1.01
    } else {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &structure.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        norm3(&[hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]) + 1.0
    };
    let graph = build_graph(structure, span.max(1e-3), usize::MAX).ok()?;
    let mut best = vec![f64::INFINITY; n];
    for (e, d) in graph.edges.iter().zip(&graph.distances) {
        best[e.center] = best[e.center].min(*d);
    }
    let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
    if found.is_empty() {
        None
    } else {
        Some(found.iter().sum::<f64>() / found.len() as f64)
    }
}

const SYMBOLS: [&str; 100] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm",
];

pub fn element_symbol(z: u8) -> Option<&'static str> {
    SYMBOLS.get((z as usize).checked_sub(1)?).copied()
}

/// Accepts element symbols (case-sensitive) or bare atomic numbers.
pub fn atomic_number(symbol: &str) -> Option<u8> {
    if let Ok(z) = symbol.parse::<u8>() {
        return (1..=MAX_Z).contains(&z).then_some(z);
    }
    SYMBOLS
        .iter()
        .position(|&s| s == symbol)
        .map(|i| (i + 1) as u8)
}
