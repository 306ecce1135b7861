//! Named trainable parameters living outside any tape.
//!
//! A forward pass binds the store onto a fresh tape ([`Tape::bind`]); after
//! backward, [`Tape::param_grads_into`] folds the leaf gradients back here.

use super::{NodeId, Precision, Tape, Tensor};
use crate::tensor::rng::Rng;

pub type ParamId = usize;

pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub struct ParamStore {
    params: Vec<Param>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            params: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        if precision == Precision::F32 {
            for p in &mut self.params {
                for v in &mut p.data {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], mut data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter data does not match shape");
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        let grad = vec![0.0; numel];
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            grad,
        });
        self.params.len() - 1
    }

    /// Xavier-uniform weight matrix `[rows, cols]`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(name, &[rows, cols], data)
    }

    /// Gaussian table `[rows, cols]` with std `1/sqrt(cols)`.
    pub fn add_table(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let std = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        self.add(name, &[rows, cols], data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; numel])
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, shape, vec![1.0; numel])
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id];
        debug_assert_eq!(p.grad.len(), g.len());
        for (a, b) in p.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients down so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                for g in &mut p.grad {
                    *g *= s;
                }
            }
        }
    }

    /// Bit-level checksum of parameter values (freeze verification).
    pub fn checksum(&self, name_prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            if !p.name.starts_with(name_prefix) {
                continue;
            }
            for v in &p.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn total_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}

/// Parameter leaves bound onto one tape.
pub struct ParamBind<'t> {
    tape: &'t Tape,
    ids: Vec<NodeId>,
}

impl<'t> ParamBind<'t> {
    pub(super) fn new(tape: &'t Tape, ids: Vec<NodeId>) -> Self {
        ParamBind { tape, ids }
    }

    pub fn get(&self, id: ParamId) -> Tensor<'t> {
        Tensor {
            tape: self.tape,
            id: self.ids[id],
        }
    }
}
