//! Rectangular grid worlds and the behavior-policy mixtures used in the toy study.

use serde::{Deserialize, Serialize};

use super::{ExactMdp, PolicyTable};
use crate::error::{domain, Result};
use crate::policy::SoftmaxTabularPolicy;

/// Action order shared by every grid world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

    fn delta(self) -> (isize, isize) {
        match self {
            GridAction::Up => (-1, 0),
            GridAction::Down => (1, 0),
            GridAction::Left => (0, -1),
            GridAction::Right => (0, 1),
        }
    }
}

/// `rows x cols` grid, states numbered row-major. The start is the top-left
/// cell and the absorbing goal the bottom-right cell. Every step before
/// absorption costs -1; moves that would leave the grid keep the state.
///
/// For a 2x2 grid this gives S0 = 0 (top-left), S1 = 1 (top-right),
/// S2 = 2 (bottom-left) and the goal 3 (bottom-right).
pub fn gridworld(rows: usize, cols: usize, gamma: f64) -> Result<ExactMdp> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(domain("grid needs at least two cells"));
    }
    let n = rows * cols;
    let goal = n - 1;
    let mut transitions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for s in 0..n {
        let (r, c) = ((s / cols) as isize, (s % cols) as isize);
        let mut row_t = Vec::with_capacity(4);
        let mut row_r = Vec::with_capacity(4);
        for action in GridAction::ALL {
            if s == goal {
                row_t.push(vec![(s, 1.0)]);
                row_r.push(0.0);
                continue;
            }
            let (dr, dc) = action.delta();
            let (nr, nc) = (r + dr, c + dc);
            let next = if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                s
            } else {
                nr as usize * cols + nc as usize
            };
            row_t.push(vec![(next, 1.0)]);
            row_r.push(-1.0);
        }
        transitions.push(row_t);
        rewards.push(row_r);
    }
    let mut absorbing = vec![false; n];
    absorbing[goal] = true;
    ExactMdp::new(transitions, rewards, gamma, 0, absorbing)
}

/// Behavior policy built as a mixture of three softmax base policies with
/// logits `[0,0,0,0]` (random), `[0,0,0,1]` (right-preferring) and
/// `[0,1,0,0]` (down-preferring).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorCase {
    pub id: String,
    /// Weights on (random, right, down).
    pub weights: [f64; 3],
}

impl BehaviorCase {
    pub fn new(id: impl Into<String>, weights: [f64; 3]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(domain("behavior mixture weights must be nonnegative and sum to 1"));
        }
        Ok(Self { id: id.into(), weights })
    }

    pub fn a() -> Self {
        Self::new("A", [1.0, 0.0, 0.0]).expect("valid weights")
    }

    pub fn b() -> Self {
        Self::new("B", [0.4, 0.3, 0.3]).expect("valid weights")
    }

    pub fn c() -> Self {
        Self::new("C", [0.2, 0.4, 0.4]).expect("valid weights")
    }

    pub fn standard() -> [Self; 3] {
        [Self::a(), Self::b(), Self::c()]
    }

    /// Looks up a standard case by its letter (case-insensitive).
    pub fn by_id(id: &str) -> Result<Self> {
        match id.to_ascii_uppercase().as_str() {
            "A" => Ok(Self::a()),
            "B" => Ok(Self::b()),
            "C" => Ok(Self::c()),
            other => Err(domain(format!("unknown behavior case {other:?}; expected A, B or C"))),
        }
    }

    pub fn table(&self, n_states: usize) -> Result<PolicyTable> {
        let uniform = preferring(n_states, None)?;
        let right = preferring(n_states, Some(GridAction::Right))?;
        let down = preferring(n_states, Some(GridAction::Down))?;
        PolicyTable::mixture(&[
            (self.weights[0], &uniform),
            (self.weights[1], &right),
            (self.weights[2], &down),
        ])
    }
}

/// Softmax policy with logit 1 on `action` and 0 elsewhere.
fn preferring(n_states: usize, action: Option<GridAction>) -> Result<PolicyTable> {
    let mut logits = [0.0; 4];
    if let Some(a) = action {
        logits[a as usize] = 1.0;
    }
    let policy = SoftmaxTabularPolicy::uniform_logits(n_states, &logits)?;
    Ok(PolicyTable::from_softmax(&policy))
}
