//! Flat parameter vectors, gradients, and the update rules applied to them.
//!
//! Every objective in the crate implements [`Objective`]: it evaluates a scalar
//! loss at a [`ParamVector`] and returns the analytic gradient, obtained by
//! hand-derived reverse accumulation through the fixed primitive set (affine
//! maps, tanh/relu/softplus, Rodrigues rotation, forward kinematics,
//! weak-perspective projection, squared norms and sums).
//! [`finite_difference_gradient`] is the independent central-difference oracle
//! those gradients are checked against.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{first_non_finite, Scalar};

/// The differentiable primitives; used to report where a non-finite value first appeared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Affine,
    Tanh,
    Relu,
    Softplus,
    Rodrigues,
    ForwardKinematics,
    Projection,
    SquaredNorm,
    Sum,
    Objective,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Primitive::Affine => "affine",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::Rodrigues => "rodrigues",
            Primitive::ForwardKinematics => "forward_kinematics",
            Primitive::Projection => "projection",
            Primitive::SquaredNorm => "squared_norm",
            Primitive::Sum => "sum",
            Primitive::Objective => "objective",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced by {primitive} (index {index})")]
    NonFinite { primitive: Primitive, index: usize },
    #[error("layout mismatch: expected {expected} values, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("update produced non-finite parameter at index {index}")]
    NonFiniteUpdate { index: usize },
    #[error("finite-difference evaluation at coordinate {coordinate} is not finite")]
    NonFiniteEvaluation { coordinate: usize },
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

/// Returns an error naming `primitive` if any of `values` is NaN or infinite.
pub fn check_finite<T: Scalar>(primitive: Primitive, values: &[T]) -> Result<(), DiffError> {
    match first_non_finite(values) {
        Some(index) => Err(DiffError::NonFinite { primitive, index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered `(name, shape)` blocks describing how a flat vector maps onto layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<LayoutBlock>,
}

impl Layout {
    pub fn new(blocks: Vec<LayoutBlock>) -> Self {
        Self { blocks }
    }

    /// Single unnamed block of `n` values; handy for toy objectives.
    pub fn flat(n: usize) -> Self {
        Self::new(vec![LayoutBlock {
            name: "values".into(),
            shape: vec![n],
        }])
    }

    pub fn blocks(&self) -> &[LayoutBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(LayoutBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of each block in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = acc;
                acc += b.len();
                o
            })
            .collect()
    }
}

/// Immutable flat vector of weights plus the layout that gives it structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(layout: Arc<Layout>, values: Vec<T>) -> Result<Self, DiffError> {
        if layout.len() != values.len() {
            return Err(DiffError::LayoutMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![T::zero(); layout.len()];
        Self { values, layout }
    }

    pub fn from_slice(values: &[T]) -> Self {
        Self {
            layout: Arc::new(Layout::flat(values.len())),
            values: values.to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Copy with one coordinate shifted; used by the finite-difference oracle.
    pub fn perturbed(&self, index: usize, delta: T) -> Self {
        let mut values = self.values.clone();
        values[index] = values[index] + delta;
        Self {
            values,
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn is_finite(&self) -> bool {
        first_non_finite(&self.values).is_none()
    }

    pub fn cast<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    fn same_layout(&self, other_len: usize) -> Result<(), DiffError> {
        if self.values.len() != other_len {
            return Err(DiffError::LayoutMismatch {
                expected: self.values.len(),
                actual: other_len,
            });
        }
        Ok(())
    }
}

/// Partial derivatives of a scalar objective, aligned with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T> {
    values: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> GradientVector<T> {
    pub fn new(layout: Arc<Layout>, values: Vec<T>) -> Result<Self, DiffError> {
        if layout.len() != values.len() {
            return Err(DiffError::LayoutMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![T::zero(); layout.len()];
        Self { values, layout }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &GradientVector<T>) -> Result<(), DiffError> {
        if self.values.len() != other.values.len() {
            return Err(DiffError::LayoutMismatch {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            *v = *v * factor;
        }
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }
}

/// A scalar loss over a parameter vector with an analytic gradient.
pub trait Objective<T: Scalar> {
    fn value(&self, params: &ParamVector<T>) -> Result<T, DiffError>;

    fn value_and_gradient(
        &self,
        params: &ParamVector<T>,
    ) -> Result<(T, GradientVector<T>), DiffError>;
}

/// `‖w‖²`, the simplest member of the primitive set.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredNorm;

impl<T: Scalar> Objective<T> for SquaredNorm {
    fn value(&self, params: &ParamVector<T>) -> Result<T, DiffError> {
        let v = params.as_slice().iter().map(|x| *x * *x).sum::<T>();
        check_finite(Primitive::SquaredNorm, &[v])?;
        Ok(v)
    }

    fn value_and_gradient(
        &self,
        params: &ParamVector<T>,
    ) -> Result<(T, GradientVector<T>), DiffError> {
        let v = self.value(params)?;
        let two = T::lit(2.0);
        let g = params.as_slice().iter().map(|x| two * *x).collect();
        Ok((v, GradientVector::new(Arc::clone(params.layout()), g)?))
    }
}

/// Evaluates `loss` and its analytic gradient at `params`, rejecting non-finite results.
pub fn evaluate_with_gradient<T, O>(
    loss: &O,
    params: &ParamVector<T>,
) -> Result<(T, GradientVector<T>), DiffError>
where
    T: Scalar,
    O: Objective<T> + ?Sized,
{
    let (value, grad) = loss.value_and_gradient(params)?;
    check_finite(Primitive::Objective, &[value])?;
    check_finite(Primitive::Sum, grad.as_slice())?;
    if grad.len() != params.len() {
        return Err(DiffError::LayoutMismatch {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    Ok((value, grad))
}

/// Central differences `(f(p + h eᵢ) − f(p − h eᵢ)) / 2h` for every coordinate.
pub fn finite_difference_gradient<T, F>(
    loss: F,
    params: &ParamVector<T>,
    h: T,
) -> Result<GradientVector<T>, DiffError>
where
    T: Scalar,
    F: Fn(&ParamVector<T>) -> Result<T, DiffError>,
{
    if !(h > T::zero()) || !h.is_finite() {
        return Err(DiffError::InvalidStep(h.as_f64()));
    }
    let two_h = h + h;
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let plus = loss(&params.perturbed(i, h))?;
        let minus = loss(&params.perturbed(i, -h))?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DiffError::NonFiniteEvaluation { coordinate: i });
        }
        out.push((plus - minus) / two_h);
    }
    GradientVector::new(Arc::clone(params.layout()), out)
}

/// Plain gradient descent: `out[i] = params[i] − lr·grad[i]`.
pub fn sgd_step<T: Scalar>(
    params: &ParamVector<T>,
    grad: &GradientVector<T>,
    lr: T,
) -> Result<ParamVector<T>, DiffError> {
    params.same_layout(grad.len())?;
    if !(lr >= T::zero()) {
        return Err(DiffError::InvalidHyperparameter(format!(
            "learning rate {lr} must be non-negative"
        )));
    }
    let values: Vec<T> = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(p, g)| *p - lr * *g)
        .collect();
    if let Some(index) = first_non_finite(&values) {
        return Err(DiffError::NonFiniteUpdate { index });
    }
    Ok(ParamVector {
        values,
        layout: Arc::clone(&params.layout),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn for_params(params: &ParamVector<T>) -> Self {
        Self::new(params.len())
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

/// One bias-corrected Adam update. Returns the new parameters and advanced state.
pub fn adam_step<T: Scalar>(
    state: &AdamState<T>,
    params: &ParamVector<T>,
    grad: &GradientVector<T>,
    cfg: &AdamConfig,
) -> Result<(ParamVector<T>, AdamState<T>), DiffError> {
    params.same_layout(grad.len())?;
    params.same_layout(state.m.len())?;
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(DiffError::InvalidHyperparameter(format!(
            "adam betas ({}, {}) must lie in [0, 1)",
            cfg.beta1, cfg.beta2
        )));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let t = state.t + 1;
    let bc1 = T::one() - b1.powi(t as i32);
    let bc2 = T::one() - b2.powi(t as i32);

    let n = params.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad.values[i];
        let mi = b1 * state.m[i] + (T::one() - b1) * g;
        let vi = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        out.push(params.values[i] - lr * m_hat / (v_hat.sqrt() + eps));
        m.push(mi);
        v.push(vi);
    }
    if let Some(index) = first_non_finite(&out) {
        return Err(DiffError::NonFiniteUpdate { index });
    }
    Ok((
        ParamVector {
            values: out,
            layout: Arc::clone(&params.layout),
        },
        AdamState { m, v, t },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);

    impl Objective<f64> for Constant {
        fn value(&self, _: &ParamVector<f64>) -> Result<f64, DiffError> {
            Ok(self.0)
        }
        fn value_and_gradient(
            &self,
            params: &ParamVector<f64>,
        ) -> Result<(f64, GradientVector<f64>), DiffError> {
            Ok((self.0, GradientVector::zeros(Arc::clone(params.layout()))))
        }
    }

    #[test]
    fn squared_norm_value_and_gradient() {
        let p = ParamVector::from_slice(&[1.0, -2.0]);
        let (v, g) = evaluate_with_gradient(&SquaredNorm, &p).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.as_slice(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = ParamVector::from_slice(&[0.3, 4.0, -1.0]);
        let (v, g) = evaluate_with_gradient(&Constant(7.5), &p).unwrap();
        assert_eq!(v, 7.5);
        assert!(g.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let p = ParamVector::from_slice(&[1.0]);
        let err = evaluate_with_gradient(&Constant(f64::NAN), &p).unwrap_err();
        assert!(matches!(
            err,
            DiffError::NonFinite {
                primitive: Primitive::Objective,
                ..
            }
        ));
    }

    #[test]
    fn finite_difference_quadratic() {
        let p = ParamVector::from_slice(&[3.0f64]);
        let g = finite_difference_gradient(|w| SquaredNorm.value(w), &p, 1e-4).unwrap();
        assert!((g.as_slice()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_bilinear() {
        let p = ParamVector::from_slice(&[2.0, 5.0]);
        let g = finite_difference_gradient(
            |w: &ParamVector<f64>| Ok(w.as_slice()[0] * w.as_slice()[1]),
            &p,
            1e-5,
        )
        .unwrap();
        assert!((g.as_slice()[0] - 5.0).abs() < 1e-8);
        assert!((g.as_slice()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_rejects_bad_step_and_nan() {
        let p = ParamVector::from_slice(&[1.0]);
        assert!(matches!(
            finite_difference_gradient(|w| SquaredNorm.value(w), &p, 0.0),
            Err(DiffError::InvalidStep(_))
        ));
        let err =
            finite_difference_gradient(|_: &ParamVector<f64>| Ok(f64::INFINITY), &p, 1e-3)
                .unwrap_err();
        assert_eq!(err, DiffError::NonFiniteEvaluation { coordinate: 0 });
    }

    #[test]
    fn sgd_by_definition() {
        let p = ParamVector::from_slice(&[1.0, 1.0]);
        let g = GradientVector::new(Arc::clone(p.layout()), vec![2.0, -2.0]).unwrap();
        let out = sgd_step(&p, &g, 0.5).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 2.0]);
        assert_eq!(p.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let p = ParamVector::from_slice(&[0.1f64, -3.7, 1e-300]);
        let g = GradientVector::zeros(Arc::clone(p.layout()));
        let out = sgd_step(&p, &g, 0.3).unwrap();
        for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sgd_with_small_alpha_moves_by_one() {
        let p = ParamVector::from_slice(&[4.0, -2.0, 0.5]);
        let g = GradientVector::new(Arc::clone(p.layout()), vec![1e5; 3]).unwrap();
        let out = sgd_step(&p, &g, 1e-5).unwrap();
        for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
            assert_eq!(b - a, 1.0);
        }
    }

    #[test]
    fn sgd_layout_mismatch() {
        let p = ParamVector::from_slice(&[1.0, 2.0]);
        let g = GradientVector::new(Arc::new(Layout::flat(3)), vec![0.0; 3]).unwrap();
        assert!(matches!(
            sgd_step(&p, &g, 0.1),
            Err(DiffError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn sgd_non_finite_update_aborts() {
        let p = ParamVector::from_slice(&[1.0]);
        let g = GradientVector::new(Arc::clone(p.layout()), vec![f64::MAX]).unwrap();
        assert_eq!(
            sgd_step(&p, &g, 1e10).unwrap_err(),
            DiffError::NonFiniteUpdate { index: 0 }
        );
    }

    #[test]
    fn adam_first_step_closed_form() {
        let p = ParamVector::from_slice(&[0.5f64, -0.25, 2.0]);
        let g = GradientVector::new(Arc::clone(p.layout()), vec![0.3, -4.0, 1e-3]).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.7,
            beta2: 0.95,
            eps: 1e-8,
        };
        let (out, st) = adam_step(&AdamState::for_params(&p), &p, &g, &cfg).unwrap();
        assert_eq!(st.steps(), 1);
        for i in 0..3 {
            let gi = g.as_slice()[i];
            let expected = p.as_slice()[i] - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((out.as_slice()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_never_moves() {
        let mut p = ParamVector::from_slice(&[1.0, -1.0]);
        let g = GradientVector::zeros(Arc::clone(p.layout()));
        let mut st = AdamState::for_params(&p);
        let cfg = AdamConfig::default();
        for _ in 0..5 {
            let (np, ns) = adam_step(&st, &p, &g, &cfg).unwrap();
            p = np;
            st = ns;
        }
        assert_eq!(p.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn adam_rejects_bad_betas() {
        let p = ParamVector::from_slice(&[1.0]);
        let g = GradientVector::zeros(Arc::clone(p.layout()));
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(adam_step(&AdamState::for_params(&p), &p, &g, &cfg).is_err());
    }
}
