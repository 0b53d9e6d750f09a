//! Differentiable per-edge geometry. Every feature is a function of the
//! displacement row only, evaluated with dual numbers so the tape records the
//! exact `E × 3` Jacobian.

use crate::autodiff::{Mat, Tape, Var};
use crate::basis::{cutoff, multiscale_into, num_harmonics, sph_harm_into, CutoffBank, Dual, RadialBasisSpec, Scalar};

use super::batch::Batch;

/// `r_e = x[neighbor] − x[center] + shift · cell` for every edge.
pub fn displacements(tape: &mut Tape, batch: &Batch, positions: Var) -> Var {
    let xn = tape.gather_rows(positions, &batch.neighbors);
    let xc = tape.gather_rows(positions, &batch.centers);
    let d = tape.sub(xn, xc);
    let off = tape.constant(batch.edge_offsets.clone());
    tape.add(d, off)
}

fn length(d: &[Dual<3>; 3]) -> Dual<3> {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Multi-scale radial features `E × (K·S)`.
pub fn radial_features(tape: &mut Tape, disp: Var, spec: &RadialBasisSpec, bank: &CutoffBank) -> Var {
    let width = spec.count * bank.scales.len();
    let mut scratch = Vec::new();
    tape.map_rows::<3>(disp, width, |d, out| {
        multiscale_into(spec, bank, length(d), &mut scratch, out);
    })
}

/// Cosine envelope `s(r)` at the outer radius, `E × 1`.
pub fn envelope(tape: &mut Tape, disp: Var, r_cut: f64) -> Var {
    tape.map_rows::<3>(disp, 1, |d, out| out.push(cutoff(r_cut, length(d))))
}

/// Real spherical harmonics of the edge direction, `E × (l_max+1)²`.
pub fn harmonics(tape: &mut Tape, disp: Var, l_max: usize) -> Var {
    tape.map_rows::<3>(disp, num_harmonics(l_max), |d, out| {
        let r = length(d);
        sph_harm_into([d[0] / r, d[1] / r, d[2] / r], l_max, out);
    })
}

/// Unit edge directions `r̂`, `E × 3`.
pub fn unit_vectors(tape: &mut Tape, disp: Var) -> Var {
    tape.map_rows::<3>(disp, 3, |d, out| {
        let r = length(d);
        out.extend(d.iter().map(|&c| c / r));
    })
}

/// Plain distances for callers that only need values.
pub fn distances(disp: &Mat) -> Vec<f64> {
    disp.rows()
        .into_iter()
        .map(|r| (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt())
        .collect()
}
