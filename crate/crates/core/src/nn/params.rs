//! Named model parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in ±1/sqrt(fan_in); fan_in is the row count.
    UniformFanIn,
    /// Gaussian with the given std (embedding tables use 0.02).
    Normal(f64),
}

/// Optimizer parameter group tag (distinct learning rates).
pub type ParamGroup = u32;
pub const GROUP_DEFAULT: ParamGroup = 0;

/// One named tensor-shaped parameter.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
    pub group: ParamGroup,
    /// Updated row-wise by the optimizer when gradients arrive sparse.
    pub sparse: bool,
}

impl<S: Scalar> Param<S> {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let v: f64 = rng.gen::<f64>();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Registry of model parameters. Initialization is a pure function of
/// (seed, parameter name), so registration order does not matter.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    pub params: Vec<Param<S>>,
    by_name: BTreeMap<String, usize>,
    seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new(), seed }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        self.add_tagged(name, rows, cols, init, GROUP_DEFAULT, false)
    }

    pub fn add_tagged(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        group: ParamGroup,
        sparse: bool,
    ) -> usize {
        assert!(!self.by_name.contains_key(name), "duplicate param {name}");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let n = rows * cols;
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Const(c) => vec![S::of(c); n],
            Init::UniformFanIn => {
                let bound = 1.0 / (rows.max(1) as f64).sqrt();
                (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect()
            }
            Init::Normal(std) => (0..n).map(|_| S::of(gaussian(&mut rng) * std)).collect(),
        };
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), rows, cols, data, group, sparse });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Param<S> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<S> {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<S>> {
        self.id(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::invalid(format!("unknown param {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}
