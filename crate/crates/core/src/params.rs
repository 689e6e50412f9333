//! Uniform access to the learnable tensors of any parameter container.
//!
//! Gradients are stored in the same container type as the parameters they
//! differentiate, so optimizers, the finite-difference oracle and the
//! checkpoint writer all walk both through this one flat view.

use crate::numerics::{Matrix, Vector};

/// What a tensor is for. L2 decay applies to [`TensorRole::Weight`] only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    Peephole,
}

#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub role: TensorRole,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub role: TensorRole,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

pub trait ParamSet: Clone {
    /// Every learnable tensor, in a fixed order.
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    /// Same tensors, same order, mutably.
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// `self += other`, tensor by tensor. Shapes must mirror.
    fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.shape, src.shape);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    /// Shape signature used to detect mismatched containers.
    fn signature(&self) -> Vec<(String, (usize, usize))> {
        self.tensors().into_iter().map(|t| (t.name, t.shape)).collect()
    }
}

pub(crate) fn mat<'a>(name: &str, role: TensorRole, m: &'a Matrix) -> TensorRef<'a> {
    TensorRef {
        name: name.to_string(),
        role,
        shape: m.shape(),
        data: m.as_slice(),
    }
}

pub(crate) fn mat_mut<'a>(name: &str, role: TensorRole, m: &'a mut Matrix) -> TensorMut<'a> {
    TensorMut {
        name: name.to_string(),
        role,
        shape: m.shape(),
        data: m.as_mut_slice(),
    }
}

pub(crate) fn vec_ref<'a>(name: &str, role: TensorRole, v: &'a Vector) -> TensorRef<'a> {
    TensorRef {
        name: name.to_string(),
        role,
        shape: (v.len(), 1),
        data: v.as_slice(),
    }
}

pub(crate) fn vec_mut<'a>(name: &str, role: TensorRole, v: &'a mut Vector) -> TensorMut<'a> {
    TensorMut {
        name: name.to_string(),
        role,
        shape: (v.len(), 1),
        data: v.as_mut_slice(),
    }
}

/// A bare vector is a one-tensor parameter set (handy for scalar objectives).
impl ParamSet for Vector {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![vec_ref("p", TensorRole::Weight, self)]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![vec_mut("p", TensorRole::Weight, self)]
    }
}
