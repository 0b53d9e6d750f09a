//! Type-agnostic geometric stream.
//!
//! Pipeline per node: learnable radial mixing `φ̃ = Φ W`, density
//! coefficients `c_{αlm} = Σ_j φ̃_α(r_ij) Y_lm(r̂_ij)`, power spectrum
//! `p_{αα'l} = Σ_m c_{αlm} c_{α'lm}` (upper triangle), concatenation with the
//! lattice embedding, a residual SiLU MLP and invariant message passing. No
//! step reads species.

use rand::Rng;

use crate::autodiff::{Binder, Mat, ParameterStore, SpectrumLayout, Tape, Var};
use crate::error::{input, Result};
use crate::structure::{det3, AtomicStructure, NeighborGraph};

use super::batch::{lattice_features, Batch, GraphSample};
use super::config::StructStreamConfig;
use super::geometry;
use super::nn::{init_linear, linear, Mlp};

pub fn layout(cfg: &StructStreamConfig) -> SpectrumLayout {
    SpectrumLayout {
        channels: cfg.mixed_channels,
        l_max: cfg.l_max,
    }
}

fn lattice_mlp(cfg: &StructStreamConfig) -> Mlp {
    Mlp::new("struct.lattice", vec![9, cfg.width, cfg.width])
}

fn phi(cfg: &StructStreamConfig, l: usize) -> Mlp {
    Mlp::new(format!("struct.mp{l}.phi"), vec![cfg.width + cfg.edge_width, cfg.width, cfg.width])
}

fn psi(cfg: &StructStreamConfig, l: usize) -> Mlp {
    Mlp::new(format!("struct.mp{l}.psi"), vec![2 * cfg.width, cfg.width, cfg.width])
}

pub fn init<R: Rng + ?Sized>(cfg: &StructStreamConfig, store: &mut ParameterStore, rng: &mut R) {
    let ks = cfg.radial_count * cfg.scales.len();
    let d = cfg.width;
    store.init_normal("struct.mix", ks, cfg.mixed_channels, 1.0, rng);
    lattice_mlp(cfg).init(store, rng);
    init_linear(store, "struct.in", layout(cfg).output_width() + d, d, rng);
    for l in 1..cfg.mlp_layers {
        init_linear(store, &format!("struct.res{l}"), d, d, rng);
    }
    init_linear(store, "struct.eta", ks, cfg.edge_width, rng);
    for l in 0..cfg.mp_layers {
        phi(cfg, l).init(store, rng);
        psi(cfg, l).init(store, rng);
    }
}

/// `N × (K'·(l_max+1)²)` density coefficients, channel-major.
pub fn density_coefficients(
    tape: &mut Tape,
    bind: &mut Binder,
    batch: &Batch,
    radial: Var,
    harmonics: Var,
) -> Var {
    let w = bind.get(tape, "struct.mix");
    let mixed = tape.matmul(radial, w);
    let per_edge = tape.row_outer(mixed, harmonics);
    tape.scatter_add_rows(per_edge, &batch.centers, batch.num_nodes)
}

/// One round of `h_j ← h_j + ψ([h_j ‖ Σ_i s φ([h_i ‖ η]) / Σ_i s])`.
pub fn message_passing(
    cfg: &StructStreamConfig,
    layer: usize,
    tape: &mut Tape,
    bind: &mut Binder,
    batch: &Batch,
    h: Var,
    eta: Var,
    env: Var,
) -> Var {
    let hn = tape.gather_rows(h, &batch.neighbors);
    let inp = tape.concat_cols(&[hn, eta]);
    let m = phi(cfg, layer).forward(tape, bind, inp);
    let m = tape.mul_col(m, env);
    let agg = tape.scatter_add_rows(m, &batch.centers, batch.num_nodes);
    let norm = tape.scatter_add_rows(env, &batch.centers, batch.num_nodes);
    let agg = tape.div_col_safe(agg, norm);
    let cat = tape.concat_cols(&[h, agg]);
    let upd = psi(cfg, layer).forward(tape, bind, cat);
    tape.add(h, upd)
}

/// Per-node `h^struct`.
pub fn forward(cfg: &StructStreamConfig, tape: &mut Tape, bind: &mut Binder, batch: &Batch, disp: Var) -> Var {
    let radial = geometry::radial_features(tape, disp, &cfg.radial(), &cfg.bank());
    let sh = geometry::harmonics(tape, disp, cfg.l_max);
    let env = geometry::envelope(tape, disp, cfg.r_cut);
    let c = density_coefficients(tape, bind, batch, radial, sh);
    let p = tape.power_spectrum(c, layout(cfg));

    let lat = tape.constant(batch.lattice.clone());
    let lat = lattice_mlp(cfg).forward(tape, bind, lat);
    let on = Mat::from_shape_fn((batch.num_graphs, 1), |(g, _)| f64::from(u8::from(batch.periodic[g])));
    let on = tape.constant(on);
    let lat = tape.mul_col(lat, on);
    let lat = tape.gather_rows(lat, &batch.node_graph);

    let x = tape.concat_cols(&[p, lat]);
    let x = linear(tape, bind, "struct.in", x);
    let mut h = tape.silu(x);
    for l in 1..cfg.mlp_layers {
        let u = linear(tape, bind, &format!("struct.res{l}"), h);
        let u = tape.silu(u);
        h = tape.add(h, u);
    }
    let eta = linear(tape, bind, "struct.eta", radial);
    for l in 0..cfg.mp_layers {
        h = message_passing(cfg, l, tape, bind, batch, h, eta, env);
    }
    h
}

/// Value-level density coefficients for one structure given a mixing matrix
/// `W` of shape `(K·S) × K'`.
pub fn coefficients_for(
    cfg: &StructStreamConfig,
    structure: &AtomicStructure,
    graph: &NeighborGraph,
    mix: &Mat,
) -> Mat {
    let batch = Batch::new(&[GraphSample::new(structure, graph)]);
    let mut store = ParameterStore::new(0);
    store.insert("struct.mix", mix.clone());
    let mut tape = Tape::new();
    let mut bind = store.bind_frozen();
    let pos = tape.constant(batch.positions.clone());
    let disp = geometry::displacements(&mut tape, &batch, pos);
    let radial = geometry::radial_features(&mut tape, disp, &cfg.radial(), &cfg.bank());
    let sh = geometry::harmonics(&mut tape, disp, cfg.l_max);
    let c = density_coefficients(&mut tape, &mut bind, &batch, radial, sh);
    tape.value(c).clone()
}

/// Value-level power spectrum of `N × (K'·(l_max+1)²)` coefficients.
pub fn power_spectrum(c: &Mat, channels: usize, l_max: usize) -> Mat {
    let mut tape = Tape::new();
    let v = tape.constant(c.clone());
    let p = tape.power_spectrum(v, SpectrumLayout { channels, l_max });
    tape.value(p).clone()
}

/// Lattice descriptors with validity checks: zeros for non-periodic input,
/// an input error for a singular cell.
pub fn structure_lattice_features(structure: &AtomicStructure) -> Result<[f64; 9]> {
    if !structure.periodic {
        return Ok([0.0; 9]);
    }
    let Some(cell) = structure.cell else {
        return input("periodic structure without a cell");
    };
    if !(det3(&cell).abs() > 1e-8) {
        return input("singular cell");
    }
    Ok(lattice_features(&cell, structure.len()))
}
