//! Interaction stream: a small invariant message-passing network that sees
//! both species and geometry. Alternative backbones can be registered by name.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use rand::RngCore;

use crate::autodiff::{Binder, ParameterStore, Tape, Var};
use crate::error::{Error, Result};

use super::batch::{Batch, EMBEDDING_ROWS};
use super::config::InterStreamConfig;
use super::geometry;
use super::nn::Mlp;

/// Anything mapping `(batch, displacements, parameters)` to `N × width` node
/// features. Parameters must live under the `int.` prefix.
pub trait InteractionBackbone: Send + Sync {
    fn init(&self, cfg: &InterStreamConfig, store: &mut ParameterStore, rng: &mut dyn RngCore);

    fn forward(
        &self,
        cfg: &InterStreamConfig,
        tape: &mut Tape,
        bind: &mut Binder,
        batch: &Batch,
        disp: Var,
    ) -> Var;
}

pub type BackboneFactory = Arc<dyn Fn() -> Box<dyn InteractionBackbone> + Send + Sync>;

fn registry() -> &'static RwLock<HashMap<String, BackboneFactory>> {
    static REG: OnceLock<RwLock<HashMap<String, BackboneFactory>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m: HashMap<String, BackboneFactory> = HashMap::new();
        m.insert(
            InvariantMpnn::NAME.to_string(),
            Arc::new(|| Box::new(InvariantMpnn) as Box<dyn InteractionBackbone>),
        );
        RwLock::new(m)
    })
}

/// Registers (or replaces) a backbone under `name`.
pub fn register_backbone(name: &str, factory: BackboneFactory) {
    registry().write().expect("registry lock").insert(name.to_string(), factory);
}

pub fn backbone(name: &str) -> Result<Box<dyn InteractionBackbone>> {
    let reg = registry().read().expect("registry lock");
    match reg.get(name) {
        Some(f) => Ok(f()),
        None => Err(Error::Input(format!("unknown interaction backbone `{name}`"))),
    }
}

pub fn backbone_names() -> Vec<String> {
    let mut v: Vec<String> = registry().read().expect("registry lock").keys().cloned().collect();
    v.sort();
    v
}

/// Default backbone. Layer update:
/// `h_i ← h_i + U([h_i ‖ (1/deg_i) Σ_j s(r_ij) M([h_i ‖ h_j ‖ Φ(r_ij)])])`.
pub struct InvariantMpnn;

impl InvariantMpnn {
    pub const NAME: &'static str = "invariant-mpnn";

    fn msg(cfg: &InterStreamConfig, l: usize) -> Mlp {
        let ks = cfg.radial_count * cfg.scales.len();
        Mlp::new(format!("int.l{l}.msg"), vec![2 * cfg.width + ks, cfg.width, cfg.width])
    }

    fn upd(cfg: &InterStreamConfig, l: usize) -> Mlp {
        Mlp::new(format!("int.l{l}.upd"), vec![2 * cfg.width, cfg.width, cfg.width])
    }
}

impl InteractionBackbone for InvariantMpnn {
    fn init(&self, cfg: &InterStreamConfig, store: &mut ParameterStore, rng: &mut dyn RngCore) {
        store.init_normal("int.embed", EMBEDDING_ROWS, cfg.width, (EMBEDDING_ROWS as f64).sqrt(), rng);
        for l in 0..cfg.layers {
            Self::msg(cfg, l).init(store, rng);
            Self::upd(cfg, l).init(store, rng);
        }
    }

    fn forward(
        &self,
        cfg: &InterStreamConfig,
        tape: &mut Tape,
        bind: &mut Binder,
        batch: &Batch,
        disp: Var,
    ) -> Var {
        let radial = geometry::radial_features(tape, disp, &cfg.radial(), &cfg.bank());
        let env = geometry::envelope(tape, disp, cfg.r_cut);
        let deg = tape.constant(batch.degree.clone());
        let table = bind.get(tape, "int.embed");
        let mut h = tape.gather_rows(table, &batch.embed_rows);
        for l in 0..cfg.layers {
            let hc = tape.gather_rows(h, &batch.centers);
            let hn = tape.gather_rows(h, &batch.neighbors);
            let inp = tape.concat_cols(&[hc, hn, radial]);
            let m = Self::msg(cfg, l).forward(tape, bind, inp);
            let m = tape.mul_col(m, env);
            let agg = tape.scatter_add_rows(m, &batch.centers, batch.num_nodes);
            let agg = tape.div_col_safe(agg, deg);
            let cat = tape.concat_cols(&[h, agg]);
            let u = Self::upd(cfg, l).forward(tape, bind, cat);
            h = tape.add(h, u);
        }
        h
    }
}
