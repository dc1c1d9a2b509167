//! Sparse mixture-of-experts output stage.
//!
//! A linear router scores the pooled trunk feature, the full softmax gate is
//! kept for the auxiliary losses, and only the top-K experts run. Their noise
//! estimates are combined with the gate restricted to the selection and
//! renormalized.

use rand::Rng;
use thiserror::Error;

use crate::action::ACTION_DIM;
use crate::numerics::{init, NumericsError, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoeError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = MoeError> = std::result::Result<T, E>;

/// Tolerance for "sums to one" checks on gates, weights and joints.
pub const PROB_TOL: f64 = 1e-9;

/// [`PROB_TOL`], widened for scalars too narrow to meet it.
pub fn prob_tol<S: Scalar>() -> S {
    S::lit(PROB_TOL).max(S::epsilon() * S::lit(64.0))
}

/// Outcome of routing one input.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<S: Scalar = f64> {
    /// Full softmax over experts.
    pub gate: Vec<S>,
    /// Indices of the K largest gate entries, largest first; ties go to the
    /// lower index.
    pub selected: Vec<usize>,
    /// Gate restricted to `selected`, renormalized to sum to one.
    pub weights: Vec<S>,
}

impl<S: Scalar> RoutingDecision<S> {
    /// Checks the routing invariants; used when traces are read back.
    pub fn validate(&self) -> Result<()> {
        let n = self.gate.len();
        let k = self.selected.len();
        let tol = prob_tol::<S>();
        if k == 0 || k > n || self.weights.len() != k {
            return Err(MoeError::Usage(format!("decision has {k} selections over {n} experts")));
        }
        if self.gate.iter().any(|g| *g < S::zero()) || (self.gate.iter().copied().sum::<S>() - S::one()).abs() > tol {
            return Err(MoeError::Usage("gate is not a probability vector".into()));
        }
        if self.weights.iter().any(|w| *w <= S::zero()) || (self.weights.iter().copied().sum::<S>() - S::one()).abs() > tol {
            return Err(MoeError::Usage("weights are not a positive normalized vector".into()));
        }
        let mut sorted = self.selected.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.iter().any(|i| *i >= n) {
            return Err(MoeError::Usage("selection has repeated or out-of-range experts".into()));
        }
        let min_selected = sorted.iter().map(|i| self.gate[*i]).fold(S::infinity(), S::min);
        let max_unselected = (0..n)
            .filter(|i| sorted.binary_search(i).is_err())
            .map(|i| self.gate[i])
            .fold(S::neg_infinity(), S::max);
        if max_unselected > min_selected + tol {
            return Err(MoeError::Usage("selection is not the top-K of the gate".into()));
        }
        for (i, w) in self.selected.iter().zip(&self.weights) {
            let expected = self.gate[*i] / sorted.iter().map(|j| self.gate[*j]).sum::<S>();
            if (*w - expected).abs() > tol {
                return Err(MoeError::Usage("weights are not the renormalized gate".into()));
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest values, largest first, lowest index on ties.
pub fn top_k_indices<S: Scalar>(values: &[S], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(MoeError::Usage(format!("top-{k} of {} experts", values.len())));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

fn softmax_vec<S: Scalar>(scores: &[S]) -> Vec<S> {
    let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = scores.iter().map(|s| (*s - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Routes from raw router scores. Selection is made on the scores, which
/// orders identically to the gate.
pub fn route_scores<S: Scalar>(scores: &[S], k: usize) -> Result<RoutingDecision<S>> {
    let selected = top_k_indices(scores, k)?;
    let gate = softmax_vec(scores);
    let picked: Vec<S> = selected.iter().map(|i| gate[*i]).collect();
    let total: S = picked.iter().copied().sum();
    let weights = picked.into_iter().map(|g| g / total).collect();
    Ok(RoutingDecision { gate, selected, weights })
}

/// One expert: a two-layer feed-forward head mapping each token feature to a
/// per-token noise estimate.
#[derive(Debug, Clone)]
pub struct Expert<S: Scalar = f64> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> Expert<S> {
    pub fn new<R: Rng + ?Sized>(width: usize, hidden: usize, out: usize, rng: &mut R) -> Result<Self> {
        Ok(Expert {
            w1: Tensor::param(&[width, hidden], init::normal(width * hidden, (1.0 / width as f64).sqrt(), rng))?,
            b1: Tensor::param(&[hidden], vec![S::zero(); hidden])?,
            // small output layer: an untrained head predicts near-zero noise
            w2: Tensor::param(&[hidden, out], init::normal(hidden * out, 0.02, rng))?,
            b2: Tensor::param(&[out], vec![S::zero(); out])?,
        })
    }

    /// `[..., width] -> [..., out]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = x.matmul(&self.w1)?.add_suffix(&self.b1)?.gelu()?;
        Ok(h.matmul(&self.w2)?.add_suffix(&self.b2)?)
    }

    pub fn parameters(&self) -> Vec<(&'static str, Tensor<S>)> {
        vec![
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
        ]
    }
}

/// Router weights plus N interchangeable expert heads.
#[derive(Debug, Clone)]
pub struct ExpertBank<S: Scalar = f64> {
    /// `[width, N]`, scores are `x W`.
    pub router: Tensor<S>,
    pub experts: Vec<Expert<S>>,
}

/// Output of [`ExpertBank::predict`] for a batch.
#[derive(Debug, Clone)]
pub struct MoeOutput<S: Scalar = f64> {
    /// `[B, H, out]` aggregated estimate.
    pub estimate: Tensor<S>,
    /// `[B, N]` full softmax gate, differentiable.
    pub gate: Tensor<S>,
    pub decisions: Vec<RoutingDecision<S>>,
}

impl<S: Scalar> ExpertBank<S> {
    pub fn new<R: Rng + ?Sized>(width: usize, n_experts: usize, hidden: usize, out: usize, rng: &mut R) -> Result<Self> {
        if n_experts == 0 {
            return Err(MoeError::Usage("need at least one expert".into()));
        }
        let router = Tensor::param(
            &[width, n_experts],
            init::normal(width * n_experts, (1.0 / width as f64).sqrt(), rng),
        )?;
        let experts = (0..n_experts)
            .map(|_| Expert::new(width, hidden, out, rng))
            .collect::<Result<_>>()?;
        Ok(ExpertBank { router, experts })
    }

    /// Bank producing per-token action-space noise estimates.
    pub fn for_actions<R: Rng + ?Sized>(width: usize, n_experts: usize, rng: &mut R) -> Result<Self> {
        Self::new(width, n_experts, 2 * width, ACTION_DIM, rng)
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn width(&self) -> usize {
        self.router.shape()[0]
    }

    /// Routes a single feature vector.
    pub fn route(&self, x: &[S], k: usize) -> Result<RoutingDecision<S>> {
        if x.len() != self.width() {
            return Err(MoeError::Usage(format!("router expects width {}, got {}", self.width(), x.len())));
        }
        let xt = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
        let scores = crate::numerics::no_grad(|| xt.matmul(&self.router))?;
        let decision = route_scores(&scores.data(), k)?;
        Ok(decision)
    }

    /// Sparse prediction for `tokens: [B, H, width]`, routed on
    /// `pooled: [B, width]`: one decision per sequence.
    pub fn predict(&self, tokens: &Tensor<S>, pooled: &Tensor<S>, k: usize) -> Result<MoeOutput<S>> {
        let n = self.n_experts();
        if k == 0 || k > n {
            return Err(MoeError::Usage(format!("top-{k} of {n} experts")));
        }
        if pooled.rank() != 2 || tokens.rank() != 3 || tokens.shape()[0] != pooled.shape()[0] {
            return Err(MoeError::Usage(format!(
                "tokens {:?} and pooled {:?} disagree",
                tokens.shape(),
                pooled.shape()
            )));
        }
        let batch = pooled.shape()[0];
        let scores = pooled.matmul(&self.router)?;
        let gate = scores.softmax()?;
        let selections: Vec<Vec<usize>> = {
            let sd = scores.data();
            sd.chunks(n).map(|row| top_k_indices(row, k)).collect::<Result<_>>()?
        };
        let flat: Vec<usize> = selections
            .iter()
            .enumerate()
            .flat_map(|(b, sel)| sel.iter().map(move |i| b * n + i))
            .collect();
        let weights = gate
            .reshape(&[batch * n])?
            .index_select0(&flat)?
            .reshape(&[batch, k])?
            .normalize_rows()?;
        let weights_flat = weights.reshape(&[batch * k])?;

        let mut estimate: Option<Tensor<S>> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut slots = Vec::new();
            for (b, sel) in selections.iter().enumerate() {
                if let Some(pos) = sel.iter().position(|i| *i == e) {
                    rows.push(b);
                    slots.push(b * k + pos);
                }
            }
            if rows.is_empty() {
                continue;
            }
            let y = expert.forward(&tokens.index_select0(&rows)?)?;
            let w = weights_flat.index_select0(&slots)?;
            let part = y.scale_rows(&w)?.scatter_rows0(&rows, batch)?;
            estimate = Some(match estimate {
                None => part,
                Some(acc) => acc.add(&part)?,
            });
        }
        let estimate = estimate.ok_or_else(|| MoeError::Usage("empty batch".into()))?;

        let decisions = {
            let gd = gate.data();
            let wd = weights.data();
            selections
                .into_iter()
                .enumerate()
                .map(|(b, selected)| RoutingDecision {
                    gate: gd[b * n..(b + 1) * n].to_vec(),
                    selected,
                    weights: wd[b * k..(b + 1) * k].to_vec(),
                })
                .collect()
        };
        Ok(MoeOutput { estimate, gate, decisions })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![("router.w".to_string(), self.router.clone())];
        for (i, e) in self.experts.iter().enumerate() {
            for (name, t) in e.parameters() {
                out.push((format!("experts.{i}.{name}"), t));
            }
        }
        out
    }
}

fn check_nonnegative<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    if t.data().iter().any(|v| *v < S::zero()) {
        return Err(MoeError::Usage(format!("{what} has negative entries")));
    }
    Ok(())
}

/// Negative usage entropy `(1/N) sum_i p_i ln p_i`, with `p` the column means
/// of a `[B, N]` gate batch. Minimal (`-ln N / N`) at uniform usage.
pub fn load_balance_loss<S: Scalar>(gate_batch: &Tensor<S>) -> Result<Tensor<S>> {
    if gate_batch.rank() != 2 || gate_batch.shape()[0] == 0 {
        return Err(MoeError::Usage(format!("gate batch must be [B, N], got {:?}", gate_batch.shape())));
    }
    check_nonnegative(gate_batch, "gate batch")?;
    let n = gate_batch.shape()[1];
    let usage = gate_batch.mean_axis(0)?;
    Ok(usage.xlogx()?.sum()?.scale(S::one() / S::from_usize_lossy(n))?)
}

/// Mutual information of a `[J, N]` joint distribution, marginals taken
/// from the joint. Zero cells contribute nothing.
pub fn mutual_info<S: Scalar>(joint: &Tensor<S>) -> Result<Tensor<S>> {
    if joint.rank() != 2 {
        return Err(MoeError::Usage(format!("joint must be [J, N], got {:?}", joint.shape())));
    }
    check_nonnegative(joint, "joint")?;
    let total: S = joint.data().iter().copied().sum();
    if (total - S::one()).abs() > prob_tol::<S>() {
        return Err(MoeError::Usage(format!("joint sums to {total}, expected 1")));
    }
    // I = H(K) + H(E) - H(K, E)
    let joint_term = joint.xlogx()?.sum()?;
    let row_term = joint.sum_axis(1)?.xlogx()?.sum()?;
    let col_term = joint.sum_axis(0)?.xlogx()?.sum()?;
    let mi = joint_term.sub(&row_term)?.sub(&col_term)?;
    // rounding can leave a value a few ulps below zero
    if mi.item()? < S::zero() {
        return Ok(mi.sub(&mi)?);
    }
    Ok(mi)
}

/// Soft empirical joint `p(K_j, E_i) = (1/B) sum_{b: cat_b = j} gate[b][i]`.
/// Categories are zero-based and must be below `n_categories`.
pub fn estimate_joint<S: Scalar>(gate_batch: &Tensor<S>, categories: &[usize], n_categories: usize) -> Result<Tensor<S>> {
    if gate_batch.rank() != 2 {
        return Err(MoeError::Usage(format!("gate batch must be [B, N], got {:?}", gate_batch.shape())));
    }
    let batch = gate_batch.shape()[0];
    if batch == 0 {
        return Err(MoeError::Usage("empty batch".into()));
    }
    if categories.len() != batch {
        return Err(MoeError::Usage(format!("{} categories for {batch} samples", categories.len())));
    }
    if let Some(c) = categories.iter().find(|c| **c >= n_categories) {
        return Err(MoeError::Usage(format!("category {c} out of range 0..{n_categories}")));
    }
    let inv = S::one() / S::from_usize_lossy(batch);
    let mut assign = vec![S::zero(); n_categories * batch];
    for (b, c) in categories.iter().enumerate() {
        assign[c * batch + b] = inv;
    }
    let assign = Tensor::from_vec(&[n_categories, batch], assign)?;
    Ok(assign.matmul(gate_batch)?)
}

/// How often each expert was selected across `decisions`.
pub fn selection_counts<S: Scalar>(decisions: &[RoutingDecision<S>], n_experts: usize) -> Vec<usize> {
    let mut counts = vec![0; n_experts];
    for d in decisions {
        for &i in &d.selected {
            counts[i] += 1;
        }
    }
    counts
}

/// Shannon entropy (nats) of a count histogram.
pub fn usage_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v).unwrap()
    }

    #[test]
    fn equal_scores_pick_lowest_indices() {
        let d = route_scores(&[0.0f64; 8], 2).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert_eq!(d.weights, vec![0.5, 0.5]);
        d.validate().unwrap();
    }

    #[test]
    fn dense_limit_returns_full_softmax() {
        let scores = [0.3f64, -1.0, 2.0, 0.1];
        let d = route_scores(&scores, 4).unwrap();
        let mut by_index = [0.0f64; 4];
        for (i, w) in d.selected.iter().zip(&d.weights) {
            by_index[*i] = *w;
        }
        for (a, b) in by_index.iter().zip(&d.gate) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        assert!(route_scores(&[0.0f64; 4], 0).is_err());
        assert!(route_scores(&[0.0f64; 4], 5).is_err());
    }

    #[test]
    fn validate_catches_bad_decisions() {
        let mut d = route_scores(&[1.0, 0.5, 0.2], 2).unwrap();
        d.selected = vec![2, 1];
        assert!(d.validate().is_err());
        let mut d = route_scores(&[1.0, 0.5, 0.2], 2).unwrap();
        d.weights = vec![0.9, 0.3];
        assert!(d.validate().is_err());
    }

    #[test]
    fn load_balance_one_hot_is_zero() {
        let gate = t2(2, 4, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(load_balance_loss(&gate).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn load_balance_rejects_negative_entries() {
        let gate = t2(1, 2, vec![1.5, -0.5]);
        assert!(matches!(load_balance_loss(&gate), Err(MoeError::Usage(_))));
    }

    #[test]
    fn mutual_info_rejects_unnormalized_joint() {
        let joint = t2(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(mutual_info(&joint), Err(MoeError::Usage(_))));
    }

    #[test]
    fn joint_of_single_sample() {
        let gate = t2(1, 4, vec![0.25; 4]);
        let joint = estimate_joint(&gate, &[0], 2).unwrap();
        assert_eq!(joint.to_vec(), vec![0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0]);
        assert!(estimate_joint(&t2(0, 4, vec![]), &[], 2).is_err());
    }

    #[test]
    fn single_expert_selection_returns_raw_head_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = ExpertBank::<f64>::new(6, 4, 12, 2, &mut rng).unwrap();
        let tokens = Tensor::from_vec(&[2, 3, 6], init::normal(36, 1.0, &mut rng)).unwrap();
        let pooled = tokens.mean_pool().unwrap();
        let out = bank.predict(&tokens, &pooled, 1).unwrap();
        for (b, d) in out.decisions.iter().enumerate() {
            let raw = bank.experts[d.selected[0]].forward(&tokens.index_select0(&[b]).unwrap()).unwrap();
            assert_eq!(&out.estimate.data()[b * 6..(b + 1) * 6], &raw.data()[..]);
        }
    }

    #[test]
    fn unselected_experts_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = ExpertBank::<f64>::new(4, 6, 8, 2, &mut rng).unwrap();
        let tokens = Tensor::from_vec(&[1, 2, 4], init::normal(8, 1.0, &mut rng)).unwrap();
        let pooled = tokens.mean_pool().unwrap();
        let out = bank.predict(&tokens, &pooled, 2).unwrap();
        out.estimate.sum().unwrap().backward().unwrap();
        let sel = &out.decisions[0].selected;
        for (i, e) in bank.experts.iter().enumerate() {
            let has = e.w1.grad().map(|g| g.iter().any(|v| *v != 0.0)).unwrap_or(false);
            assert_eq!(has, sel.contains(&i), "expert {i}");
        }
    }

    #[test]
    fn usage_entropy_bounds() {
        assert_eq!(usage_entropy(&[5, 0, 0]), 0.0);
        assert!((usage_entropy(&[3, 3, 3, 3]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(usage_entropy(&[0, 0]), 0.0);
    }
}
