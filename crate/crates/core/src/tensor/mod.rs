//! Dense arbitrary-rank tensors in row-major order.

mod contract;
pub(crate) mod gemm;
pub mod io;

pub use contract::{contract, TensorTransformSpec, TransformMode};
pub(crate) use contract::{contract_adjoints, ContractionLayout};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Axis extents of a tensor. Every extent is at least one; rank 0 is a scalar.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "extent of axis {axis} is zero in {dims:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides (last axis fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &Shape) -> Shape {
        let mut dims = self.0.clone();
        dims.extend_from_slice(&other.0);
        Shape(dims)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("×"))
    }
}

/// Dense tensor: a shape plus row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Real>,
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(Real),
}

#[derive(Clone, Copy, Debug)]
pub enum Elementwise<'a> {
    Add(Operand<'a>),
    Sub(Operand<'a>),
    Mul(Operand<'a>),
    Div(Operand<'a>),
    Scale(Real),
    MaxWithZero,
    Sign,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<Real>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<Real>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    /// Caller guarantees `data.len() == shape.numel()`.
    pub(crate) fn from_parts(shape: Shape, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &Shape, value: Real) -> Self {
        Tensor {
            shape: shape.clone(),
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &Shape, std: Real, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite, non-negative std");
        let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
        Tensor::from_parts(shape.clone(), data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.len());
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> Result<Real> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::OutOfBounds(format!(
                "index {index:?} has rank {}, tensor has rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut off = 0;
        for (axis, (&i, &d)) in index.iter().zip(self.dims()).enumerate() {
            if i >= d {
                return Err(Error::OutOfBounds(format!(
                    "index {i} on axis {axis} with extent {d}"
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn elementwise(&self, op: Elementwise<'_>) -> Result<Tensor> {
        match op {
            Elementwise::Add(rhs) => self.binary(rhs, |a, b| a + b),
            Elementwise::Sub(rhs) => self.binary(rhs, |a, b| a - b),
            Elementwise::Mul(rhs) => self.binary(rhs, |a, b| a * b),
            Elementwise::Div(rhs) => {
                let zero = match rhs {
                    Operand::Tensor(t) => t.data.iter().position(|&v| v == 0.0),
                    Operand::Scalar(s) => (s == 0.0).then_some(0),
                };
                if let Some(index) = zero {
                    return Err(Error::DivisionByZero { index });
                }
                self.binary(rhs, |a, b| a / b)
            }
            Elementwise::Scale(s) => Ok(self.map(|v| v * s)),
            Elementwise::MaxWithZero => Ok(self.map(|v| if v > 0.0 { v } else { 0.0 })),
            Elementwise::Sign => Ok(self.map(sign)),
        }
    }

    fn binary(&self, rhs: Operand<'_>, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let data = match rhs {
            Operand::Tensor(t) => {
                self.expect_same_shape(t)?;
                self.data.iter().zip(&t.data).map(|(&a, &b)| f(a, b)).collect()
            }
            Operand::Scalar(s) => self.data.iter().map(|&a| f(a, s)).collect(),
        };
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(Elementwise::Add(Operand::Tensor(other)))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(Elementwise::Sub(Operand::Tensor(other)))
    }

    pub fn scale(&self, s: Real) -> Tensor {
        self.map(|v| v * s)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// In-place `self += other`; shapes must already agree.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} ({} elements) into {shape}",
                self.shape,
                self.len()
            )));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    pub(crate) fn with_shape(self, shape: Shape) -> Tensor {
        Tensor::from_parts(shape, self.data)
    }

    pub fn flatten(&self) -> Tensor {
        Tensor::from_parts(Shape(vec![self.len()]), self.data.clone())
    }

    /// Reverse the order of all axes (a full transpose).
    pub fn reverse_axes(&self) -> Tensor {
        let dims = self.dims();
        let rev_dims: Vec<usize> = dims.iter().rev().copied().collect();
        let src_strides = self.shape.strides();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..self.len() {
            // idx enumerates the reversed tensor in row-major order
            let off: usize = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| i * src_strides[dims.len() - 1 - k])
                .sum();
            out.push(self.data[off]);
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < rev_dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor::from_parts(Shape(rev_dims), out)
    }
}

pub(crate) fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise sum of equally shaped tensors, accumulated in list order.
pub fn linear_combine(tensors: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = tensors
        .split_first()
        .ok_or(Error::EmptyInput("linear_combine needs at least one tensor"))?;
    let mut acc = first.clone();
    for t in rest {
        acc.expect_same_shape(t)?;
        acc.add_assign(t);
    }
    Ok(acc)
}

/// `size×size` spatial window of a map laid out `[m, H, W, cell...]`, with its
/// top-left corner at `(top, left)`. Returns `[m, size, size, cell...]`.
pub fn slice_window(map: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let dims = map.dims();
    if dims.len() < 3 {
        return Err(Error::ShapeMismatch(format!(
            "feature map needs rank >= 3, got {}",
            map.shape()
        )));
    }
    let (m, h, w) = (dims[0], dims[1], dims[2]);
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::OutOfBounds(format!(
            "{size}×{size} window at ({top},{left}) on a {h}×{w} map"
        )));
    }
    let cell: usize = dims[3..].iter().product();
    let mut out = Vec::with_capacity(m * size * size * cell);
    for c in 0..m {
        for y in top..top + size {
            let row = ((c * h + y) * w + left) * cell;
            out.extend_from_slice(&map.data[row..row + size * cell]);
        }
    }
    let mut out_dims = vec![m, size, size];
    out_dims.extend_from_slice(&dims[3..]);
    Ok(Tensor::from_parts(Shape(out_dims), out))
}

/// Zero-pad the two spatial axes of a `[m, H, W, cell...]` map by `pad` cells.
pub fn pad_spatial(map: &Tensor, pad: usize) -> Result<Tensor> {
    let dims = map.dims();
    if dims.len() < 3 {
        return Err(Error::ShapeMismatch(format!(
            "feature map needs rank >= 3, got {}",
            map.shape()
        )));
    }
    let (m, h, w) = (dims[0], dims[1], dims[2]);
    let cell: usize = dims[3..].iter().product();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; m * hp * wp * cell];
    for c in 0..m {
        for y in 0..h {
            let src = ((c * h + y) * w) * cell;
            let dst = ((c * hp + y + pad) * wp + pad) * cell;
            out[dst..dst + w * cell].copy_from_slice(&map.data[src..src + w * cell]);
        }
    }
    let mut out_dims = vec![m, hp, wp];
    out_dims.extend_from_slice(&dims[3..]);
    Ok(Tensor::from_parts(Shape(out_dims), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[Real]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(vec![2, 0, 3]).is_err());
        assert_eq!(Shape::scalar().numel(), 1);
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().strides(), vec![12, 4, 1]);
    }

    #[test]
    fn shape_rejects_overflowing_element_count() {
        assert!(Shape::new(vec![usize::MAX, 2]).is_err());
    }

    #[test]
    fn data_length_must_match() {
        assert!(matches!(
            Tensor::from_vec(&[2, 2], vec![1.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn scale_by_one_is_identity() {
        let a = t(&[2, 2], &[1.5, -2.0, 0.0, 7.25]);
        assert_eq!(a.elementwise(Elementwise::Scale(1.0)).unwrap(), a);
    }

    #[test]
    fn sign_definition() {
        let a = t(&[3], &[-2.0, 0.0, 3.5]);
        assert_eq!(a.elementwise(Elementwise::Sign).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn max_with_zero() {
        let a = t(&[3], &[-2.0, 0.0, 3.5]);
        let r = a.elementwise(Elementwise::MaxWithZero).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 3.5]);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let a = t(&[2], &[1.0, 2.0]);
        let z = t(&[2], &[1.0, 0.0]);
        assert!(matches!(
            a.elementwise(Elementwise::Div(Operand::Tensor(&z))),
            Err(Error::DivisionByZero { index: 1 })
        ));
        assert!(matches!(
            a.elementwise(Elementwise::Div(Operand::Scalar(0.0))),
            Err(Error::DivisionByZero { .. })
        ));
    }

    #[test]
    fn binary_shape_mismatch() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[1, 2], &[1.0, 2.0]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn elementwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(vec![3, 4, 2]).unwrap();
        for _ in 0..20 {
            let a = Tensor::randn(&shape, 1.0, &mut rng);
            let b = Tensor::randn(&shape, 1.0, &mut rng);
            let add = a.add(&b).unwrap();
            let mul = a.elementwise(Elementwise::Mul(Operand::Tensor(&b))).unwrap();
            let sub = a.sub(&b).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    for k in 0..2 {
                        let (x, y) = (a.get(&[i, j, k]).unwrap(), b.get(&[i, j, k]).unwrap());
                        assert_eq!(add.get(&[i, j, k]).unwrap(), x + y);
                        assert_eq!(sub.get(&[i, j, k]).unwrap(), x - y);
                        assert_eq!(mul.get(&[i, j, k]).unwrap(), x * y);
                    }
                }
            }
        }
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = a.reshape(&[6]).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.reshape(&[3, 2]).unwrap().get(&[2, 0]).unwrap(), 5.0);
        assert!(matches!(a.reshape(&[4]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn linear_combine_cases() {
        let a = t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]);
        let neg = a.scale(-1.0);
        let zero = linear_combine(&[a.clone(), neg]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let ones = Tensor::full(&Shape::new(vec![2, 2]).unwrap(), 1.0);
        let nine = linear_combine(&vec![ones; 9]).unwrap();
        assert!(nine.data().iter().all(|&v| v == 9.0));

        assert!(matches!(linear_combine(&[]), Err(Error::EmptyInput(_))));
        let b = t(&[4], &[1.0; 4]);
        assert!(matches!(linear_combine(&[a, b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn linear_combine_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape::new(vec![2, 2, 2]).unwrap();
        let ts: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&shape, 1.0, &mut rng)).collect();
        let sum = linear_combine(&ts).unwrap();
        for i in 0..8 {
            let mut expect = 0.0;
            for x in &ts {
                expect += x.data()[i];
            }
            assert_eq!(sum.data()[i], expect);
        }
    }

    #[test]
    fn top_left_window() {
        // 1 channel, 5×5 map of scalar cells holding their own flat index
        let map = Tensor::from_vec(&[1, 5, 5], (0..25).map(|v| v as Real).collect()).unwrap();
        let w = slice_window(&map, 0, 0, 3).unwrap();
        assert_eq!(w.dims(), &[1, 3, 3]);
        assert_eq!(w.data(), &[0.0, 1.0, 2.0, 5.0, 6.0, 7.0, 10.0, 11.0, 12.0]);
        assert!(matches!(slice_window(&map, 3, 0, 3), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn windows_match_index_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = Tensor::randn(&Shape::new(vec![2, 6, 5, 2, 3]).unwrap(), 1.0, &mut rng);
        for top in 0..=3 {
            for left in 0..=2 {
                let w = slice_window(&map, top, left, 3).unwrap();
                for c in 0..2 {
                    for y in 0..3 {
                        for x in 0..3 {
                            for p in 0..2 {
                                for q in 0..3 {
                                    assert_eq!(
                                        w.get(&[c, y, x, p, q]).unwrap(),
                                        map.get(&[c, top + y, left + x, p, q]).unwrap()
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pad_then_window_recovers_interior() {
        let map = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad_spatial(&map, 1).unwrap();
        assert_eq!(p.dims(), &[1, 4, 4, 1]);
        assert_eq!(slice_window(&p, 1, 1, 2).unwrap(), map);
        assert_eq!(p.sum(), 10.0);
    }

    #[test]
    fn reverse_axes_transposes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = a.reverse_axes();
        assert_eq!(r.dims(), &[3, 2]);
        assert_eq!(r.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::randn(&Shape::new(vec![2, 3, 4]).unwrap(), 1.0, &mut rng);
        let rb = b.reverse_axes();
        assert_eq!(rb.get(&[3, 1, 0]).unwrap(), b.get(&[0, 1, 3]).unwrap());
        assert_eq!(rb.reverse_axes(), b);
    }

    proptest! {
        #[test]
        fn serialization_round_trips(dims in proptest::collection::vec(1usize..4, 0..5), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&Shape::new(dims).unwrap(), 1.0, &mut rng);
            let back = io::tensor_from_bytes(&io::tensor_to_bytes(&t)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn reshape_round_trips(dims in proptest::collection::vec(1usize..5, 1..5)) {
            let n: usize = dims.iter().product();
            let t = Tensor::from_vec(&dims, (0..n).map(|v| v as Real).collect()).unwrap();
            prop_assert_eq!(t.flatten().reshape(&dims).unwrap(), t);
        }
    }
}
