//! The neuron tensor transformation.
//!
//! `contract(U, W, r)` sums over the trailing `r` axes of `U` and the leading
//! `r` axes of `W` with reversed pairing: axis `rank(U) - 1 - t` of `U` meets
//! axis `t` of `W`. The output keeps `U`'s leading axes followed by `W`'s
//! trailing axes:
//!
//! ```text
//! V[a.., p..] = Σ U[a.., i_{r-1}, .., i_0] · W[i_0, .., i_{r-1}, p..]
//! ```
//!
//! So `U ∈ R^{1×2×3×4}` contracted with `W ∈ R^{4×3×7×8}` at `r = 2` gives
//! `V ∈ R^{1×2×7×8}`.

use std::borrow::Cow;

use super::{gemm, Shape, Tensor};
use crate::{Error, Real, Result};

/// Whether a transformation keeps, lowers or raises the tensor rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMode {
    Preserve,
    Compress,
    Expand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorTransformSpec {
    pub input_rank: usize,
    pub weight_rank: usize,
    pub contract_count: usize,
}

impl TensorTransformSpec {
    pub fn new(input_rank: usize, weight_rank: usize, contract_count: usize) -> Result<Self> {
        if contract_count == 0 || contract_count > input_rank.min(weight_rank) {
            return Err(Error::Rank(format!(
                "r = {contract_count} must lie in 1..={} for ranks {input_rank} and {weight_rank}",
                input_rank.min(weight_rank)
            )));
        }
        Ok(TensorTransformSpec {
            input_rank,
            weight_rank,
            contract_count,
        })
    }

    pub fn output_rank(&self) -> usize {
        self.input_rank + self.weight_rank - 2 * self.contract_count
    }

    pub fn mode(&self) -> TransformMode {
        use std::cmp::Ordering::*;
        match self.output_rank().cmp(&self.input_rank) {
            Equal => TransformMode::Preserve,
            Less => TransformMode::Compress,
            Greater => TransformMode::Expand,
        }
    }
}

/// Flattened view of a contraction as a matrix product `[A, K] · [K, P]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ContractionLayout {
    pub out_dims: Vec<usize>,
    /// Product of `U`'s uncontracted (leading) extents.
    pub a_len: usize,
    /// Product of the contracted extents.
    pub k_len: usize,
    /// Product of `W`'s uncontracted (trailing) extents.
    pub p_len: usize,
    /// `kperm[k]` is the flat offset, within `W`'s leading `r` axes, of the
    /// element that pairs with `U`'s trailing flat index `k`.
    pub kperm: Vec<usize>,
}

impl ContractionLayout {
    /// Accepts `r = 0` (outer product) for internal scalar-cell kernels.
    pub fn new(u_dims: &[usize], w_dims: &[usize], r: usize) -> Result<Self> {
        let (ru, rw) = (u_dims.len(), w_dims.len());
        if r > ru.min(rw) {
            return Err(Error::Rank(format!(
                "r = {r} exceeds min rank of {u_dims:?} and {w_dims:?}"
            )));
        }
        for t in 0..r {
            let ua = ru - 1 - t;
            if u_dims[ua] != w_dims[t] {
                return Err(Error::ShapeMismatch(format!(
                    "U axis {ua} (extent {}) is paired with W axis {t} (extent {})",
                    u_dims[ua], w_dims[t]
                )));
            }
        }
        let a_dims = &u_dims[..ru - r];
        let k_dims = &u_dims[ru - r..];
        let p_dims = &w_dims[r..];
        let mut out_dims = a_dims.to_vec();
        out_dims.extend_from_slice(p_dims);

        let k_len: usize = k_dims.iter().product();
        // strides of W's leading block, whose axis t has extent k_dims[r-1-t]
        let mut w_lead_strides = vec![1usize; r];
        for t in (0..r.saturating_sub(1)).rev() {
            w_lead_strides[t] = w_lead_strides[t + 1] * w_dims[t + 1];
        }
        let mut kperm = Vec::with_capacity(k_len);
        let mut idx = vec![0usize; r];
        for _ in 0..k_len {
            // idx[j] indexes U axis (ru - r + j), which pairs with W axis r-1-j
            let off: usize = (0..r).map(|j| idx[j] * w_lead_strides[r - 1 - j]).sum();
            kperm.push(off);
            for j in (0..r).rev() {
                idx[j] += 1;
                if idx[j] < k_dims[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
        Ok(ContractionLayout {
            out_dims,
            a_len: a_dims.iter().product(),
            k_len,
            p_len: p_dims.iter().product(),
            kperm,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.kperm.iter().enumerate().all(|(i, &k)| i == k)
    }

    /// `W` rearranged as a row-major `[K, P]` matrix in `U`'s contraction order.
    pub fn permuted_weight<'a>(&self, w: &'a [Real]) -> Cow<'a, [Real]> {
        if self.is_identity() {
            return Cow::Borrowed(w);
        }
        let p = self.p_len;
        let mut out = vec![0.0; w.len()];
        for (k, &src) in self.kperm.iter().enumerate() {
            out[k * p..(k + 1) * p].copy_from_slice(&w[src * p..(src + 1) * p]);
        }
        Cow::Owned(out)
    }

    /// Inverse of [`permuted_weight`](Self::permuted_weight).
    pub fn unpermute_weight(&self, wk: Vec<Real>) -> Vec<Real> {
        if self.is_identity() {
            return wk;
        }
        let p = self.p_len;
        let mut out = vec![0.0; wk.len()];
        for (k, &dst) in self.kperm.iter().enumerate() {
            out[dst * p..(dst + 1) * p].copy_from_slice(&wk[k * p..(k + 1) * p]);
        }
        out
    }
}

/// Contract the trailing `r` axes of `u` with the leading `r` axes of `w`
/// (reversed pairing).
pub fn contract(u: &Tensor, w: &Tensor, r: usize) -> Result<Tensor> {
    TensorTransformSpec::new(u.rank(), w.rank(), r)?;
    let layout = ContractionLayout::new(u.dims(), w.dims(), r)?;
    let wk = layout.permuted_weight(w.data());
    let out = gemm::matmul(layout.a_len, layout.k_len, layout.p_len, u.data(), &wk);
    Ok(Tensor::from_parts(Shape(layout.out_dims), out))
}

/// Adjoints of `V = contract(U, W, r)` given `dV`.
///
/// With `U` as `[A, K]` and the permuted `W` as `[K, P]`:
/// `dU = dV · Wᵀ` and `dW = Uᵀ · dV`, both of which are again contractions.
pub(crate) fn contract_adjoints(
    u: &Tensor,
    w: &Tensor,
    dv: &Tensor,
    r: usize,
    need_u: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let layout = ContractionLayout::new(u.dims(), w.dims(), r)?;
    let (a, k, p) = (layout.a_len, layout.k_len, layout.p_len);
    let du = need_u.then(|| {
        let wk = layout.permuted_weight(w.data());
        let mut du = vec![0.0; a * k];
        // dV [A,P] · (W [K,P])ᵀ
        gemm::gemm(a, p, k, 1.0, dv.data(), p, 1, &wk, 1, p, 0.0, &mut du, k, 1);
        Tensor::from_parts(u.shape().clone(), du)
    });
    let dw = need_w.then(|| {
        let mut dwk = vec![0.0; k * p];
        // (U [A,K])ᵀ · dV [A,P]
        gemm::gemm(k, a, p, 1.0, u.data(), 1, k, dv.data(), p, 1, 0.0, &mut dwk, p, 1);
        Tensor::from_parts(w.shape().clone(), layout.unpermute_weight(dwk))
    });
    Ok((du, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Elementwise;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(&Shape::new(dims.to_vec()).unwrap(), 1.0, rng)
    }

    /// Enumerates every (output index, contracted index) pair directly.
    fn oracle(u: &Tensor, w: &Tensor, r: usize) -> Tensor {
        let (ud, wd) = (u.dims(), w.dims());
        let a_dims = &ud[..ud.len() - r];
        let k_dims = &wd[..r];
        let p_dims = &wd[r..];
        let mut out_dims = a_dims.to_vec();
        out_dims.extend_from_slice(p_dims);
        let n_out: usize = out_dims.iter().product();
        let n_k: usize = k_dims.iter().product();
        let mut out = vec![0.0; n_out];
        for (o, slot) in out.iter_mut().enumerate() {
            let oi = unflatten(o, &out_dims);
            for kf in 0..n_k {
                let ki = unflatten(kf, k_dims); // W's leading index i_0..i_{r-1}
                let mut uidx = oi[..a_dims.len()].to_vec();
                uidx.extend(ki.iter().rev());
                let mut widx = ki.clone();
                widx.extend_from_slice(&oi[a_dims.len()..]);
                *slot += u.get(&uidx).unwrap() * w.get(&widx).unwrap();
            }
        }
        Tensor::from_vec(&out_dims, out).unwrap()
    }

    fn unflatten(mut f: usize, dims: &[usize]) -> Vec<usize> {
        let mut idx = vec![0; dims.len()];
        for a in (0..dims.len()).rev() {
            idx[a] = f % dims[a];
            f /= dims[a];
        }
        idx
    }

    #[test]
    fn worked_example_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = randn(&[1, 2, 3, 4], &mut rng);
        let w = randn(&[4, 3, 7, 8], &mut rng);
        let v = contract(&u, &w, 2).unwrap();
        assert_eq!(v.dims(), &[1, 2, 7, 8]);
        let spec = TensorTransformSpec::new(4, 4, 2).unwrap();
        assert_eq!(spec.output_rank(), 4);
        assert_eq!(spec.mode(), TransformMode::Preserve);
    }

    #[test]
    fn dot_product() {
        let u = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let v = contract(&u, &u, 1).unwrap();
        assert_eq!(v.rank(), 0);
        assert_eq!(v.item(), 5.0);
    }

    #[test]
    fn six_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = randn(&[2, 3], &mut rng);
        let w = randn(&[3, 2, 2], &mut rng);
        let v = contract(&u, &w, 1).unwrap();
        assert_eq!(v.dims(), &[2, 2, 2]);
        for a in 0..2 {
            for p in 0..2 {
                for q in 0..2 {
                    let mut s = 0.0;
                    for i in 0..3 {
                        s += u.get(&[a, i]).unwrap() * w.get(&[i, p, q]).unwrap();
                    }
                    assert!((v.get(&[a, p, q]).unwrap() - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reversed_pairing_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // trailing [3,4] of U must meet leading [4,3] of W
        let u = randn(&[2, 3, 4], &mut rng);
        let bad = randn(&[3, 4, 5], &mut rng);
        let err = contract(&u, &bad, 2).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(ref m) if m.contains("U axis 2") && m.contains("W axis 0")));
    }

    #[test]
    fn rank_out_of_range() {
        let u = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(contract(&u, &u, 0), Err(Error::Rank(_))));
        assert!(matches!(contract(&u, &u, 2), Err(Error::Rank(_))));
        assert!(TensorTransformSpec::new(2, 3, 3).is_err());
    }

    #[test]
    fn mode_classification() {
        assert_eq!(TensorTransformSpec::new(2, 6, 2).unwrap().mode(), TransformMode::Expand);
        assert_eq!(TensorTransformSpec::new(4, 4, 4).unwrap().mode(), TransformMode::Compress);
        assert_eq!(TensorTransformSpec::new(6, 6, 3).unwrap().mode(), TransformMode::Preserve);
    }

    #[test]
    fn full_contraction_adjoint_is_axis_reversed_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = randn(&[2, 3, 4], &mut rng);
        let w = randn(&[4, 3, 2], &mut rng);
        let v = contract(&u, &w, 3).unwrap();
        assert_eq!(v.rank(), 0);
        let (du, dw) = contract_adjoints(&u, &w, &Tensor::scalar(1.0), 3, true, true).unwrap();
        assert_eq!(du.unwrap(), w.reverse_axes());
        assert_eq!(dw.unwrap(), u.reverse_axes());
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <dV, contract(U, W)> is bilinear, so <dV, V(U)> = <dU, U> and likewise for W.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (ud, wd, r) in [
            (vec![2, 3, 4], vec![4, 3, 5], 2),
            (vec![3, 1], vec![1, 3, 2, 2], 2),
            (vec![2, 2, 2, 2], vec![2, 2, 2, 2], 2),
            (vec![5], vec![5, 3], 1),
        ] {
            let u = randn(&ud, &mut rng);
            let w = randn(&wd, &mut rng);
            let v = contract(&u, &w, r).unwrap();
            let dv = randn(v.dims(), &mut rng);
            let (du, dw) = contract_adjoints(&u, &w, &dv, r, true, true).unwrap();
            let lhs: Real = dv.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            let via_u: Real = du.unwrap().data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
            let via_w: Real = dw.unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_u).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, usize) {
        loop {
            let ru = rng.random_range(1..=6);
            let rw = rng.random_range(1..=6);
            let r = rng.random_range(1..=ru.min(rw));
            let ud: Vec<usize> = (0..ru).map(|_| rng.random_range(1..=4)).collect();
            let mut wd: Vec<usize> = ud[ru - r..].iter().rev().copied().collect();
            wd.extend((0..rw - r).map(|_| rng.random_range(1..=4)));
            let total: usize = ud.iter().product::<usize>() * wd[r..].iter().product::<usize>();
            if total <= 1 << 14 {
                return (randn(&ud, rng), randn(&wd, rng), r);
            }
        }
    }

    #[test]
    fn random_cases_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let (u, w, r) = random_case(&mut rng);
            let v = contract(&u, &w, r).unwrap();
            let o = oracle(&u, &w, r);
            assert_eq!(v.dims(), o.dims());
            let scale = oracle(&u.map(Real::abs), &w.map(Real::abs), r);
            for ((a, b), s) in v.data().iter().zip(o.data()).zip(scale.data()) {
                assert!((a - b).abs() <= 1e-12 * s.max(Real::MIN_POSITIVE));
            }
        }
    }

    proptest! {
        #[test]
        fn bilinear_in_both_arguments(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (a, b) = (a as Real, b as Real);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u1, w1, r) = random_case(&mut rng);
            let u2 = Tensor::randn(u1.shape(), 1.0, &mut rng);
            let w2 = Tensor::randn(w1.shape(), 1.0, &mut rng);
            let mix_u = u1.scale(a).add(&u2.scale(b)).unwrap();
            let lhs = contract(&mix_u, &w1, r).unwrap();
            let rhs = contract(&u1, &w1, r).unwrap().scale(a)
                .add(&contract(&u2, &w1, r).unwrap().scale(b)).unwrap();
            let mix_w = w1.scale(a).add(&w2.scale(b)).unwrap();
            let lhs_w = contract(&u1, &mix_w, r).unwrap();
            let rhs_w = contract(&u1, &w1, r).unwrap().scale(a)
                .add(&contract(&u1, &w2, r).unwrap().scale(b)).unwrap();
            let du = lhs.elementwise(Elementwise::Sub(crate::tensor::Operand::Tensor(&rhs))).unwrap();
            let dw = lhs_w.sub(&rhs_w).unwrap();
            prop_assert!(du.max_abs() <= 1e-10 * lhs.max_abs().max(1.0));
            prop_assert!(dw.max_abs() <= 1e-10 * lhs_w.max_abs().max(1.0));
        }

        #[test]
        fn output_rank_law(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, w, r) = random_case(&mut rng);
            let v = contract(&u, &w, r).unwrap();
            prop_assert_eq!(v.rank(), u.rank() + w.rank() - 2 * r);
            let spec = TensorTransformSpec::new(u.rank(), w.rank(), r).unwrap();
            let expected = match v.rank().cmp(&u.rank()) {
                std::cmp::Ordering::Equal => TransformMode::Preserve,
                std::cmp::Ordering::Less => TransformMode::Compress,
                std::cmp::Ordering::Greater => TransformMode::Expand,
            };
            prop_assert_eq!(spec.mode(), expected);
        }
    }
}
