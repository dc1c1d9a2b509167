use crate::scalar::Scalar;

/// Controls per step: normalized steering and throttle/brake.
pub const ACTION_DIM: usize = 2;

/// An `H x 2` block of normalized controls; the object being diffused.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence<S: Scalar = f64> {
    horizon: usize,
    data: Vec<S>,
}

impl<S: Scalar> ActionSequence<S> {
    /// `None` when `data` does not hold exactly `horizon` rows.
    pub fn new(horizon: usize, data: Vec<S>) -> Option<Self> {
        (horizon >= 1 && data.len() == horizon * ACTION_DIM).then_some(ActionSequence { horizon, data })
    }

    pub fn zeros(horizon: usize) -> Self {
        ActionSequence {
            horizon,
            data: vec![S::zero(); horizon * ACTION_DIM],
        }
    }

    /// `horizon` copies of one action.
    pub fn repeat(horizon: usize, action: [S; ACTION_DIM]) -> Self {
        ActionSequence {
            horizon,
            data: action.iter().copied().cycle().take(horizon * ACTION_DIM).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn row(&self, i: usize) -> [S; ACTION_DIM] {
        [self.data[i * ACTION_DIM], self.data[i * ACTION_DIM + 1]]
    }

    /// Every entry clamped into `[-1, 1]`.
    pub fn clamped(&self) -> Self {
        let lim = S::one();
        ActionSequence {
            horizon: self.horizon,
            data: self.data.iter().map(|v| v.max(-lim).min(lim)).collect(),
        }
    }
}
