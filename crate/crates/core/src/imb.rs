//! Implicit memory bank: `K` learnable prototype slots queried by the cosine
//! similarity of the globally pooled feature map.
//!
//! The top-`k` slots are averaged into a prototype that is broadcast-added to
//! every spatial position. Selection is treated as a constant in the backward
//! pass, so only the selected slots receive gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

pub const DEFAULT_CAPACITY: usize = 512;
pub const DEFAULT_TOP_K: usize = 32;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    /// `K × C` slot matrix.
    pub slots: Tensor<T>,
    top_k: usize,
    frozen: bool,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn from_slots(slots: Tensor<T>, top_k: usize) -> Result<Self> {
        let (capacity, _) = slots.dims2("MemoryBank")?;
        check_top_k(top_k, capacity)?;
        Ok(Self {
            slots,
            top_k,
            frozen: false,
        })
    }

    /// Slots drawn from `N(0, 1/C)`.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, top_k: usize, rng: &mut R) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("memory bank", format!("{capacity}x{dim} is empty")));
        }
        Self::from_slots(Tensor::randn(&[capacity, dim], 1.0 / (dim as f64).sqrt(), rng), top_k)
    }

    pub fn capacity(&self) -> usize {
        self.slots.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.slots.dim(1)
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn set_top_k(&mut self, top_k: usize) -> Result<()> {
        check_top_k(top_k, self.capacity())?;
        self.top_k = top_k;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen banks are read-only: training refuses to update them.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }
}

impl<T: Scalar> Parameters<T> for MemoryBank<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "slots"), &self.slots);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "slots"), &mut self.slots);
    }
}

fn check_top_k(k: usize, capacity: usize) -> Result<()> {
    if k == 0 || k > capacity {
        return Err(Error::invalid("top-k", format!("k = {k} must lie in [1, {capacity}]")));
    }
    Ok(())
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `s_i = qᵀm_i / (‖q‖·‖m_i‖)` with each norm floored at `1e-12`.
pub fn cosine_similarities<T: Scalar>(query: &Tensor<T>, bank: &MemoryBank<T>) -> Result<Tensor<T>> {
    if query.rank() != 1 || query.len() != bank.dim() {
        return Err(Error::shape("cosine_similarities", query.shape(), bank.slots.shape()));
    }
    let floor = T::of(NORM_FLOOR);
    let qn = norm(query.data()).max(floor);
    let sims = (0..bank.capacity())
        .map(|i| {
            let slot = bank.slots.row(i);
            let dot: T = slot.iter().zip(query.data()).map(|(&a, &b)| a * b).sum();
            (dot / (qn * norm(slot).max(floor))).max(-T::one()).min(T::one())
        })
        .collect();
    Tensor::new(&[bank.capacity()], sims)
}

/// Indices of the `k` largest similarities, highest first; ties go to the lower index.
pub fn top_k_select<T: Scalar>(sims: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    check_top_k(k, sims.len())?;
    let s = sims.data();
    let mut order: Vec<usize> = (0..s.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        s[b].partial_cmp(&s[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// Mean of the selected slots.
pub fn retrieve_prototype<T: Scalar>(bank: &MemoryBank<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if indices.is_empty() {
        return Err(Error::invalid("slot indices", "empty selection"));
    }
    let mut seen = vec![false; bank.capacity()];
    for &i in indices {
        if i >= bank.capacity() {
            return Err(Error::invalid(
                "slot indices",
                format!("{i} out of range for {} slots", bank.capacity()),
            ));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid("slot indices", format!("duplicate index {i}")));
        }
    }
    let mut proto = Tensor::zeros(&[bank.dim()]);
    for &i in indices {
        for (p, &v) in proto.data_mut().iter_mut().zip(bank.slots.row(i)) {
            *p += v;
        }
    }
    Ok(proto.scale(T::one() / T::of(indices.len() as f64)))
}

/// `X̂ = X + 1_{H×W} ⊗ m_proto`.
pub fn enhance<T: Scalar>(x: &Tensor<T>, prototype: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, c) = x.dims3("enhance")?;
    if prototype.rank() != 1 || prototype.len() != c {
        return Err(Error::shape("enhance", x.shape(), prototype.shape()));
    }
    let mut out = x.clone();
    out.add_row_vector(prototype)?;
    Ok(out)
}

/// What a memory-bank pass selected; kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval<T> {
    pub similarities: Tensor<T>,
    pub indices: Vec<usize>,
    pub prototype: Tensor<T>,
}

impl<T: Scalar> Retrieval<T> {
    /// Gap between the k-th and (k+1)-th largest similarity; infinite when every slot is selected.
    pub fn selection_margin(&self) -> f64 {
        let k = self.indices.len();
        if k >= self.similarities.len() {
            return f64::INFINITY;
        }
        let mut sorted: Vec<f64> = self.similarities.data().iter().map(|v| v.as_f64()).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[k - 1] - sorted[k]
    }
}

/// GAP query → cosine similarities → top-k → mean → residual add.
///
/// With `use_imb` false the input is returned unchanged.
pub fn imb_forward<T: Scalar>(
    x: &Tensor<T>,
    bank: &MemoryBank<T>,
    use_imb: bool,
) -> Result<(Tensor<T>, Option<Retrieval<T>>)> {
    if !use_imb {
        x.dims3("imb_forward")?;
        return Ok((x.clone(), None));
    }
    let query = tensor::global_avg_pool(x)?;
    let similarities = cosine_similarities(&query, bank)?;
    let indices = top_k_select(&similarities, bank.top_k())?;
    let prototype = retrieve_prototype(bank, &indices)?;
    let out = enhance(x, &prototype)?;
    Ok((
        out,
        Some(Retrieval {
            similarities,
            indices,
            prototype,
        }),
    ))
}

/// Returns `∂/∂X` and accumulates slot gradients into `grad` (selected rows only).
pub fn imb_backward<T: Scalar>(
    retrieval: Option<&Retrieval<T>>,
    dout: &Tensor<T>,
    grad: &mut MemoryBank<T>,
) -> Result<Tensor<T>> {
    // The query only influences the output through the (constant) selection,
    // so the residual path carries the whole input gradient.
    if let Some(r) = retrieval {
        let dproto = dout.sum_rows();
        let share = T::one() / T::of(r.indices.len() as f64);
        for &i in &r.indices {
            for (g, &d) in grad.slots.row_mut(i).iter_mut().zip(dproto.data()) {
                *g += d * share;
            }
        }
    }
    Ok(dout.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::layers::zeros_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn vector(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_closed_forms() {
        let bank =
            MemoryBank::from_slots(Tensor::new(&[3, 2], vec![1.0, 2.0, -2.0, 1.0, 0.0, 0.0]).unwrap(), 1).unwrap();
        let s = cosine_similarities(&vector(&[1.0, 2.0]), &bank).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.data()[1], 0.0);
        assert_eq!(s.data()[2], 0.0, "zero slot is guarded");
        let scaled = cosine_similarities(&vector(&[10.0, 20.0]), &bank).unwrap();
        assert!(s.max_abs_diff(&scaled).unwrap() < 1e-12);
        assert!(cosine_similarities(&vector(&[1.0, 2.0, 3.0]), &bank).is_err());
    }

    #[test]
    fn similarities_are_bounded() {
        let mut r = rng(1);
        let bank = MemoryBank::<f64>::random(64, 8, 4, &mut r).unwrap();
        let q = Tensor::randn(&[8], 5.0, &mut r);
        assert!(cosine_similarities(&q, &bank)
            .unwrap()
            .data()
            .iter()
            .all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn top_k_ordering_and_ties() {
        assert_eq!(top_k_select(&vector(&[0.1, 0.9, 0.5]), 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_select(&vector(&[0.1, 0.9, 0.5]), 3).unwrap(), vec![1, 2, 0]);
        assert_eq!(top_k_select(&vector(&[0.5, 0.7, 0.5, 0.5]), 3).unwrap(), vec![1, 0, 2]);
        assert!(top_k_select(&vector(&[0.1, 0.2]), 0).is_err());
        assert!(top_k_select(&vector(&[0.1, 0.2]), 3).is_err());
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut r = rng(2);
        for trial in 0..200 {
            let n = r.random_range(1..40);
            let k = r.random_range(1..=n);
            let s = Tensor::<f64>::randn(&[n], 1.0, &mut r);
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| s.data()[b].total_cmp(&s.data()[a]).then(a.cmp(&b)));
            oracle.truncate(k);
            assert_eq!(top_k_select(&s, k).unwrap(), oracle, "trial {trial}");
        }
    }

    #[test]
    fn prototype_closed_forms() {
        let slots = Tensor::<f64>::new(&[4, 2], vec![1.0, 2.0, -1.0, -2.0, 3.0, 5.0, 0.5, 0.25]).unwrap();
        let bank = MemoryBank::from_slots(slots, 2).unwrap();
        assert_eq!(retrieve_prototype(&bank, &[2]).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(retrieve_prototype(&bank, &[0, 1]).unwrap().data(), &[0.0, 0.0]);
        let mean = retrieve_prototype(&bank, &[3, 0, 2, 1]).unwrap();
        assert!((mean.data()[0] - 3.5 / 4.0).abs() < 1e-12 && (mean.data()[1] - 5.25 / 4.0).abs() < 1e-12);
        assert!(retrieve_prototype(&bank, &[1, 1]).is_err());
        assert!(retrieve_prototype(&bank, &[4]).is_err());
    }

    #[test]
    fn enhance_broadcasts_and_inverts() {
        let mut r = rng(3);
        let x = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut r);
        assert_eq!(enhance(&x, &Tensor::zeros(&[5])).unwrap(), x);
        let proto = Tensor::randn(&[5], 1.0, &mut r);
        let out = enhance(&x, &proto).unwrap();
        for (o, i) in out.data().chunks(5).zip(x.data().chunks(5)) {
            for c in 0..5 {
                assert!((o[c] - i[c] - proto.data()[c]).abs() < 1e-12);
            }
        }
        let back = Tensor::new(
            out.shape(),
            out.data()
                .chunks(5)
                .flat_map(|p| p.iter().zip(proto.data()).map(|(a, b)| a - b))
                .collect(),
        )
        .unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-15);
        assert!(enhance(&x, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn disabled_bank_is_identity_and_degenerate_bank_adds_its_slot() {
        let mut r = rng(4);
        let x = Tensor::<f64>::randn(&[2, 2, 3], 1.0, &mut r);
        let bank = MemoryBank::random(8, 3, 2, &mut r).unwrap();
        assert_eq!(imb_forward(&x, &bank, false).unwrap().0, x);

        let v = [0.3, -0.2, 0.7];
        let same = MemoryBank::from_slots(Tensor::from_fn(&[6, 3], |i| v[i % 3]), 4).unwrap();
        let (out, _) = imb_forward(&x, &same, true).unwrap();
        let expected = enhance(&x, &vector(&v)).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn query_scale_does_not_change_selection() {
        let mut r = rng(5);
        let x = Tensor::<f64>::randn(&[3, 3, 4], 1.0, &mut r);
        let bank = MemoryBank::random(16, 4, 5, &mut r).unwrap();
        let (_, a) = imb_forward(&x, &bank, true).unwrap();
        let (_, b) = imb_forward(&x.scale(7.5), &bank, true).unwrap();
        assert_eq!(a.unwrap().indices, b.unwrap().indices);
    }

    #[test]
    fn slot_gradients_are_sparse_and_correct() {
        for seed in 0..10 {
            let mut r = rng(100 + seed);
            let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut r);
            let bank = MemoryBank::random(8, 4, 3, &mut r).unwrap();
            let (out, retrieval) = imb_forward(&x, &bank, true).unwrap();
            let retrieval = retrieval.unwrap();
            if retrieval.selection_margin() <= 1e-3 {
                continue;
            }
            let dout = Tensor::full(out.shape(), 1.0 / out.len() as f64);
            let mut grad = zeros_like(&bank);
            let dx = imb_backward(Some(&retrieval), &dout, &mut grad).unwrap();
            for i in 0..8 {
                if !retrieval.indices.contains(&i) {
                    assert!(grad.slots.row(i).iter().all(|&g| g == 0.0));
                }
            }
            let es = grad_check(
                |m| {
                    let b = MemoryBank::from_slots(m.clone(), 3).unwrap();
                    imb_forward(&x, &b, true).unwrap().0.mean()
                },
                &bank.slots,
                &grad.slots,
                1e-6,
            )
            .unwrap();
            let ex = grad_check(|x| imb_forward(x, &bank, true).unwrap().0.mean(), &x, &dx, 1e-6).unwrap();
            assert!(es < 1e-6 && ex < 1e-6, "seed {seed}: {es} {ex}");
        }
    }

    #[test]
    fn forward_never_mutates_the_bank() {
        let mut r = rng(6);
        let mut bank = MemoryBank::<f32>::random(32, 4, 8, &mut r).unwrap();
        bank.freeze();
        let before = bank.clone();
        for _ in 0..100 {
            let x = Tensor::randn(&[2, 2, 4], 1.0, &mut r);
            imb_forward(&x, &bank, true).unwrap();
        }
        assert_eq!(bank, before);
    }

    #[test]
    fn top_k_bounds_are_enforced() {
        let mut r = rng(7);
        assert!(MemoryBank::<f64>::random(8, 4, 9, &mut r).is_err());
        assert!(MemoryBank::<f64>::random(8, 4, 0, &mut r).is_err());
        let mut bank = MemoryBank::<f64>::random(8, 4, 8, &mut r).unwrap();
        assert!(bank.set_top_k(12).is_err());
    }
}
