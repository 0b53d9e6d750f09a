//! The three-stream encoder and its heads.

pub mod batch;
pub mod comp;
pub mod config;
pub mod geometry;
pub mod heads;
pub mod interaction;
pub mod nn;
pub mod structural;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, Mat, ParameterStore, Tape, Var};
use crate::error::Result;
use crate::structure::{build_graph, AtomicStructure, NeighborGraph, Vec3};

pub use batch::{Batch, GraphSample};
pub use config::{
    CompStreamConfig, EnergyHeadMode, GraphConfig, HeadConfig, InterStreamConfig, ModelConfig,
    StreamSet, StructStreamConfig,
};

/// Stream selector for embeddings, retrieval and sensitivity analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Comp,
    Struct,
    Int,
    Joint,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Comp, Stream::Struct, Stream::Int, Stream::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Comp => "comp",
            Stream::Struct => "struct",
            Stream::Int => "int",
            Stream::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Stream> {
        Stream::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Tape handles produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub positions: Var,
    pub displacements: Var,
    /// `T × d_comp` token outputs.
    pub comp_tokens: Var,
    pub comp: Var,
    pub structure: Var,
    pub interaction: Var,
    pub fused: Var,
    /// `B × d` pooled vectors.
    pub comp_pooled: Var,
    pub struct_pooled: Var,
    pub int_pooled: Var,
    pub fused_pooled: Var,
}

/// Plain-value embeddings: per-node and per-structure blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamEmbeddings {
    pub comp: Mat,
    pub structure: Mat,
    pub interaction: Mat,
    pub fused: Mat,
    pub comp_pooled: Mat,
    pub struct_pooled: Mat,
    pub int_pooled: Mat,
    pub fused_pooled: Mat,
}

impl StreamEmbeddings {
    pub fn pooled(&self, stream: Stream) -> &Mat {
        match stream {
            Stream::Comp => &self.comp_pooled,
            Stream::Struct => &self.struct_pooled,
            Stream::Int => &self.int_pooled,
            Stream::Joint => &self.fused_pooled,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Initializes every parameter from `seed` in a fixed order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = interaction::backbone(&config.interaction.backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new(seed);
        comp::init(&config.comp, &mut params, &mut rng);
        structural::init(&config.structure, &mut params, &mut rng);
        backbone.init(&config.interaction, &mut params, &mut rng);
        heads::init(&config, &mut params, &mut rng);
        Ok(Self { config, params })
    }

    /// Fused-vector column ranges `[comp, struct, int]`.
    pub fn slices(&self) -> [(usize, usize); 3] {
        let (a, b, c) = (
            self.config.comp.width,
            self.config.structure.width,
            self.config.interaction.width,
        );
        [(0, a), (a, a + b), (a + b, a + b + c)]
    }

    pub fn graph(&self, structure: &AtomicStructure) -> Result<NeighborGraph> {
        build_graph(structure, self.config.graph.cutoff, self.config.graph.max_neighbors)
    }

    /// Runs all streams. `positions` must be an `N × 3` tape value matching
    /// the batch; passing a variable enables position gradients.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        batch: &Batch,
        positions: Var,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Encoded {
        let cfg = &self.config;
        let n = batch.num_nodes;
        let disp = geometry::displacements(tape, batch, positions);

        let (comp_tokens, comp_nodes, comp_pooled) = if cfg.streams.comp {
            let tok = comp::forward(&cfg.comp, tape, bind, batch, dropout.as_deref_mut());
            let nodes = tape.gather_rows(tok, &batch.node_token);
            let pool = tape.constant(batch.token_mean_matrix());
            let pooled = tape.matmul(pool, tok);
            (tok, nodes, pooled)
        } else {
            (
                tape.zeros(batch.num_tokens(), cfg.comp.width),
                tape.zeros(n, cfg.comp.width),
                tape.zeros(batch.num_graphs, cfg.comp.width),
            )
        };
        let mean = tape.constant(batch.node_mean_matrix());
        let structure = if cfg.streams.structure {
            structural::forward(&cfg.structure, tape, bind, batch, disp)
        } else {
            tape.zeros(n, cfg.structure.width)
        };
        let interaction = if cfg.streams.interaction {
            let bb = interaction::backbone(&cfg.interaction.backbone).expect("validated backbone");
            bb.forward(&cfg.interaction, tape, bind, batch, disp)
        } else {
            tape.zeros(n, cfg.interaction.width)
        };
        let struct_pooled = tape.matmul(mean, structure);
        let int_pooled = tape.matmul(mean, interaction);
        let fused = tape.concat_cols(&[comp_nodes, structure, interaction]);
        let fused_pooled = tape.concat_cols(&[comp_pooled, struct_pooled, int_pooled]);
        Encoded {
            positions,
            displacements: disp,
            comp_tokens,
            comp: comp_nodes,
            structure,
            interaction,
            fused,
            comp_pooled,
            struct_pooled,
            int_pooled,
            fused_pooled,
        }
    }

    /// `B × 1` total energies.
    pub fn energy_var(&self, tape: &mut Tape, bind: &mut Binder, batch: &Batch, enc: &Encoded) -> Var {
        heads::energies(&self.config, tape, bind, batch, enc.fused)
    }

    /// Direct force (`"force"`) or noise (`"noise"`) vectors, `N × 3`.
    pub fn directional_var(
        &self,
        name: &str,
        tape: &mut Tape,
        bind: &mut Binder,
        batch: &Batch,
        enc: &Encoded,
    ) -> Var {
        let ic = &self.config.interaction;
        let radial = geometry::radial_features(tape, enc.displacements, &ic.radial(), &ic.bank());
        let unit = geometry::unit_vectors(tape, enc.displacements);
        heads::directional(&self.config, name, tape, bind, batch, enc.fused, radial, unit)
    }

    pub fn mask_logits_var(&self, tape: &mut Tape, bind: &mut Binder, enc: &Encoded, nodes: &[usize]) -> Var {
        heads::mask_logits(&self.config, tape, bind, enc.fused, nodes)
    }

    fn eval<T>(&self, samples: &[GraphSample], f: impl FnOnce(&mut Tape, &mut Binder, &Batch, &Encoded) -> T) -> T {
        let batch = Batch::new(samples);
        let mut tape = Tape::new();
        let mut bind = self.params.bind_frozen();
        let pos = tape.constant(batch.positions.clone());
        let enc = self.encode(&mut tape, &mut bind, &batch, pos, None);
        f(&mut tape, &mut bind, &batch, &enc)
    }

    pub fn embed(&self, samples: &[GraphSample]) -> StreamEmbeddings {
        self.eval(samples, |tape, _, _, e| StreamEmbeddings {
            comp: tape.value(e.comp).clone(),
            structure: tape.value(e.structure).clone(),
            interaction: tape.value(e.interaction).clone(),
            fused: tape.value(e.fused).clone(),
            comp_pooled: tape.value(e.comp_pooled).clone(),
            struct_pooled: tape.value(e.struct_pooled).clone(),
            int_pooled: tape.value(e.int_pooled).clone(),
            fused_pooled: tape.value(e.fused_pooled).clone(),
        })
    }

    pub fn energies(&self, samples: &[GraphSample]) -> Vec<f64> {
        self.eval(samples, |tape, bind, batch, e| {
            let v = self.energy_var(tape, bind, batch, e);
            tape.value(v).column(0).to_vec()
        })
    }

    pub fn energy(&self, structure: &AtomicStructure, graph: &NeighborGraph) -> f64 {
        self.energies(&[GraphSample::new(structure, graph)])[0]
    }

    /// Energies and conservative forces `F = −∂E/∂x` on a fixed graph.
    pub fn energy_and_forces(&self, samples: &[GraphSample]) -> (Vec<f64>, Vec<Vec<Vec3>>) {
        let batch = Batch::new(samples);
        let mut tape = Tape::new();
        let mut bind = self.params.bind_frozen();
        let pos = tape.variable(batch.positions.clone());
        let enc = self.encode(&mut tape, &mut bind, &batch, pos, None);
        let e = self.energy_var(&mut tape, &mut bind, &batch, &enc);
        let total = tape.sum(e);
        let g = tape.backward(total).get_or_zeros(pos, (batch.num_nodes, 3));
        let f = -g;
        let forces = (0..batch.num_graphs).map(|b| batch.split_rows(&f, b)).collect();
        (tape.value(e).column(0).to_vec(), forces)
    }

    pub fn forces_conservative(&self, structure: &AtomicStructure, graph: &NeighborGraph) -> Vec<Vec3> {
        let (_, mut f) = self.energy_and_forces(&[GraphSample::new(structure, graph)]);
        f.pop().expect("one structure")
    }

    fn directional_values(&self, name: &str, structure: &AtomicStructure, graph: &NeighborGraph) -> Vec<Vec3> {
        self.eval(&[GraphSample::new(structure, graph)], |tape, bind, batch, e| {
            let v = self.directional_var(name, tape, bind, batch, e);
            batch.split_rows(tape.value(v), 0)
        })
    }

    pub fn forces_direct(&self, structure: &AtomicStructure, graph: &NeighborGraph) -> Vec<Vec3> {
        self.directional_values("force", structure, graph)
    }

    pub fn predict_noise(&self, structure: &AtomicStructure, graph: &NeighborGraph) -> Vec<Vec3> {
        self.directional_values("noise", structure, graph)
    }

    /// Element logits at `nodes` of one (possibly masked) structure.
    pub fn mask_logits(&self, sample: GraphSample, nodes: &[usize]) -> Mat {
        self.eval(&[sample], |tape, bind, _, e| {
            let v = self.mask_logits_var(tape, bind, e, nodes);
            tape.value(v).clone()
        })
    }
}
