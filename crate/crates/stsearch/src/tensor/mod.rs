//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The kernel is deliberately small: it implements exactly the operator set
//! the spatial-temporal cells need (batched matrix products along the graph
//! and time axes, pointwise activations, softmax, concatenation) plus a
//! Wengert-style tape ([`Tape`]) that replays recorded operations in reverse
//! to fill the gradient slots of a [`ParamStore`].
//!
//! Element type is generic: `f64` is the default precision everywhere, `f32`
//! is selectable through the run configuration.

mod store;
mod tape;

pub use store::{AdamConfig, ParamStore};
pub use tape::{GradMap, Tape, Var};

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`]: `f64` (default) or `f32`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_real(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Element for f32 {}
impl Element for f64 {}

/// Dense tensor: a shape and row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension {
                op: "tensor_new",
                detail: format!("shape {shape:?} wants {expect} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    /// 0-rank-like scalar, stored as shape `[1]`.
    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Build from f64 values, converting to the element type.
    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::from_real(v)).collect())
    }

    /// 2-D tensor from rows (test/ingest convenience).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().map(|&v| E::from_real(v)).collect();
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> E {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Size of the last axis; 1 for empty shapes.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes except the last.
    pub fn lead(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Health check: error if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Maximum absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
                .fold(0.0, f64::max),
        )
    }
}

impl<E: Element> fmt::Display for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Central finite-difference gradient checking, shared by unit tests.
#[cfg(test)]
pub(crate) mod gradcheck {
    use super::{GradMap, ParamStore, Tensor};

    /// Numeric gradients of `f` w.r.t. every store parameter, by central
    /// differences with step `h`.
    pub fn central_diff(
        store: &ParamStore<f64>,
        h: f64,
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> GradMap<f64> {
        let mut work = store.clone();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut out = GradMap::new();
        for name in names {
            let base = store.get(&name).unwrap().clone();
            let mut grad = vec![0.0; base.numel()];
            for (i, g) in grad.iter_mut().enumerate() {
                let mut bumped = base.clone();
                bumped.data_mut()[i] += h;
                work.set(&name, bumped).unwrap();
                let up = f(&work);
                let mut bumped = base.clone();
                bumped.data_mut()[i] -= h;
                work.set(&name, bumped).unwrap();
                let down = f(&work);
                *g = (up - down) / (2.0 * h);
            }
            work.set(&name, base.clone()).unwrap();
            out.insert(name, Tensor::new(base.shape().to_vec(), grad).unwrap());
        }
        out
    }

    /// Worst relative disagreement between analytic and numeric gradients.
    /// Parameters the tape never touched count as analytically zero. The
    /// denominator is floored at 1e-4 so finite-difference noise on
    /// near-zero entries does not register as relative error.
    pub fn max_rel_err(analytic: &GradMap<f64>, numeric: &GradMap<f64>) -> f64 {
        let mut worst = 0.0f64;
        for (name, gn) in numeric {
            let zero = Tensor::zeros(gn.shape().to_vec());
            let ga = analytic.get(name).unwrap_or(&zero);
            for (&x, &y) in ga.data().iter().zip(gn.data()) {
                let denom = x.abs().max(y.abs()).max(1e-4);
                worst = worst.max((x - y).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_element_count_invariant() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn from_rows_rejects_ragged() {
        let err = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0]]);
        assert!(err.is_err());
    }

    #[test]
    fn finite_check() {
        let t = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
        let ok = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(ok.check_finite("test").is_ok());
    }
}
