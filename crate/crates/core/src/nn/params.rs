use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a tensor is updated by the optimizer or tracked statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub data: Vec<T>,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, role: Role, data: Vec<T>) -> ParamId {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param `{name}`");
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param `{name}`"
        );
        self.params.push(Param {
            name,
            shape,
            role,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == Role::Trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Checks that `other` has the same names, shapes and roles in the same
    /// order.
    pub fn check_same_layout<U>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Contract(format!(
                "parameter sets differ in size: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape || a.role != b.role {
                return Err(Error::Contract(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    role: p.role,
                    data: p.data.iter().map(|&x| U::of(x.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Zero-filled tensors with the same layout, e.g. for gradients or
    /// momentum.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|p| vec![T::zero(); p.data.len()])
            .collect()
    }
}

/// Kaiming-normal initialization: `N(0, 2 / fan_in)`.
pub fn kaiming<T: Real, R: Rng + ?Sized>(fan_in: usize, count: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..count).map(|_| T::of(normal.sample(rng))).collect()
}
