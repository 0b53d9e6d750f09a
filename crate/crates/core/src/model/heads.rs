//! Output heads on the fused node vector `h = [h^comp ‖ h^struct ‖ h^int]`.

use rand::Rng;

use crate::autodiff::{Binder, ParameterStore, Tape, Var};

use super::batch::Batch;
use super::config::{EnergyHeadMode, ModelConfig};
use super::nn::Mlp;

fn dims(inp: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut d = vec![inp];
    d.extend_from_slice(hidden);
    d.push(out);
    d
}

pub fn energy_mlp(cfg: &ModelConfig) -> Mlp {
    Mlp::new("head.energy", dims(cfg.fused_width(), &cfg.heads.energy_hidden, 1))
}

pub fn geometric_energy_mlp(cfg: &ModelConfig) -> Mlp {
    let w = cfg.structure.width + cfg.interaction.width;
    Mlp::new("head.egeom", dims(w, &cfg.heads.energy_hidden, 1))
}

pub fn composition_energy_mlp(cfg: &ModelConfig) -> Mlp {
    Mlp::new("head.ecf", dims(cfg.comp.width, &cfg.heads.energy_hidden, 1))
}

pub fn directional_mlp(cfg: &ModelConfig, name: &str) -> Mlp {
    let ks = cfg.interaction.radial_count * cfg.interaction.scales.len();
    let hidden = if name == "force" {
        &cfg.heads.force_hidden
    } else {
        &cfg.heads.noise_hidden
    };
    Mlp::new(format!("head.{name}"), dims(2 * cfg.fused_width() + ks, hidden, 1))
}

pub fn mask_mlp(cfg: &ModelConfig) -> Mlp {
    Mlp::new("head.mask", dims(cfg.fused_width(), &cfg.heads.mask_hidden, cfg.heads.mask_classes))
}

pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParameterStore, rng: &mut R) {
    match cfg.heads.energy_mode {
        EnergyHeadMode::Fused => energy_mlp(cfg).init(store, rng),
        EnergyHeadMode::Additive => {
            geometric_energy_mlp(cfg).init(store, rng);
            composition_energy_mlp(cfg).init(store, rng);
        }
    }
    store.init_zeros("head.atom_ref", 100, 1);
    directional_mlp(cfg, "force").init(store, rng);
    directional_mlp(cfg, "noise").init(store, rng);
    mask_mlp(cfg).init(store, rng);
}

/// Per-atom energies `N × 1`, including the per-element reference term.
pub fn atom_energies(cfg: &ModelConfig, tape: &mut Tape, bind: &mut Binder, batch: &Batch, fused: Var) -> Var {
    let e = match cfg.heads.energy_mode {
        EnergyHeadMode::Fused => energy_mlp(cfg).forward(tape, bind, fused),
        EnergyHeadMode::Additive => {
            let dc = cfg.comp.width;
            let geo = tape.slice_cols(fused, dc, cfg.fused_width());
            let comp = tape.slice_cols(fused, 0, dc);
            let eg = geometric_energy_mlp(cfg).forward(tape, bind, geo);
            let ec = composition_energy_mlp(cfg).forward(tape, bind, comp);
            tape.add(eg, ec)
        }
    };
    let refs = bind.get(tape, "head.atom_ref");
    let rows: Vec<usize> = batch.species.iter().map(|&z| z as usize - 1).collect();
    let r = tape.gather_rows(refs, &rows);
    tape.add(e, r)
}

/// Total energy per structure, `B × 1`.
pub fn energies(cfg: &ModelConfig, tape: &mut Tape, bind: &mut Binder, batch: &Batch, fused: Var) -> Var {
    let e = atom_energies(cfg, tape, bind, batch, fused);
    let sum = tape.constant(batch.node_sum_matrix());
    tape.matmul(sum, e)
}

/// `v_i = Σ_j w([h_i ‖ h_j ‖ Φ(r_ij)]) r̂_ij`, `N × 3`.
#[allow(clippy::too_many_arguments)]
pub fn directional(
    cfg: &ModelConfig,
    name: &str,
    tape: &mut Tape,
    bind: &mut Binder,
    batch: &Batch,
    fused: Var,
    radial: Var,
    unit: Var,
) -> Var {
    let hc = tape.gather_rows(fused, &batch.centers);
    let hn = tape.gather_rows(fused, &batch.neighbors);
    let inp = tape.concat_cols(&[hc, hn, radial]);
    let w = directional_mlp(cfg, name).forward(tape, bind, inp);
    let v = tape.mul_col(unit, w);
    tape.scatter_add_rows(v, &batch.centers, batch.num_nodes)
}

/// Element logits (`|nodes| × 100`) at the given node rows.
pub fn mask_logits(cfg: &ModelConfig, tape: &mut Tape, bind: &mut Binder, fused: Var, nodes: &[usize]) -> Var {
    let h = tape.gather_rows(fused, nodes);
    mask_mlp(cfg).forward(tape, bind, h)
}
