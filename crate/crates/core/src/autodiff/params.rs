use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Gradients, Mat, Tape, Var};

/// Named trainable arrays. Insertion order is the canonical parameter order
/// used for flattening, checkpoints and finite-difference sweeps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Mat>,
    pub seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.params.insert(name, value);
    }

    /// Scaled-normal initialization `N(0, gain² / fan_in)`.
    pub fn init_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut R,
    ) {
        let std = gain / (rows.max(1) as f64).sqrt();
        let m = Array2::from_shape_fn((rows, cols), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.insert(name, m);
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Mat::zeros((rows, cols)));
    }

    pub fn init_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Mat::ones((rows, cols)));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Every `(name, flat index)` whose name starts with `prefix`.
    pub fn coordinates(&self, prefix: &str) -> Vec<ParamCoord> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(n, m)| {
                (0..m.len()).map(move |i| ParamCoord {
                    name: n.clone(),
                    index: i,
                })
            })
            .collect()
    }

    pub fn read(&self, c: &ParamCoord) -> f64 {
        let m = &self.params[&c.name];
        m[[c.index / m.ncols(), c.index % m.ncols()]]
    }

    pub fn write(&mut self, c: &ParamCoord, v: f64) {
        let m = self.params.get_mut(&c.name).expect("known parameter");
        let cols = m.ncols();
        m[[c.index / cols, c.index % cols]] = v;
    }

    pub fn zeros_like(&self) -> GradStore {
        GradStore {
            grads: self
                .params
                .iter()
                .map(|(n, m)| (n.clone(), Mat::zeros(m.dim())))
                .collect(),
        }
    }

    /// Binds this store to a tape; parameters become leaves on first use.
    pub fn bind(&self) -> Binder<'_> {
        Binder {
            store: self,
            vars: IndexMap::new(),
            frozen: false,
        }
    }

    /// Binds parameters as constants: no parameter gradients are recorded.
    pub fn bind_frozen(&self) -> Binder<'_> {
        Binder {
            store: self,
            vars: IndexMap::new(),
            frozen: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub name: String,
    pub index: usize,
}

/// Gradient slot for every parameter, same names and shapes as the store.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    pub grads: IndexMap<String, Mat>,
}

impl GradStore {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.grads.get(name)
    }

    pub fn read(&self, c: &ParamCoord) -> f64 {
        let m = &self.grads[&c.name];
        m[[c.index / m.ncols(), c.index % m.ncols()]]
    }

    pub fn add_scaled(&mut self, other: &GradStore, c: f64) {
        for (n, g) in &mut self.grads {
            if let Some(o) = other.grads.get(n) {
                g.scaled_add(c, o);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            *g *= c;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Binder<'a> {
    store: &'a ParameterStore,
    vars: IndexMap<String, Var>,
    frozen: bool,
}

impl<'a> Binder<'a> {
    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = if self.frozen {
            tape.constant(value)
        } else {
            tape.variable(value)
        };
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient for every stored parameter; unreached ones are zero.
    pub fn collect(&self, grads: &Gradients) -> GradStore {
        let mut out = self.store.zeros_like();
        for (name, v) in &self.vars {
            if let Some(g) = grads.get(*v) {
                out.grads[name].assign(g);
            }
        }
        out
    }
}
