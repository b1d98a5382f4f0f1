//! A small matrix-valued reverse-mode autodiff tape.
//!
//! Nodes are 2-D `f64` arrays. Leaves are either tracked parameters or
//! untracked constants; [`Tape::detach`] copies a value into a fresh constant,
//! which is how stop-gradient is expressed. Backward runs in reverse creation
//! order, so the tape is its own topological sort.

use ndarray::{Array2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a (r x c) + b (1 x c)` broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise map; stores the derivative evaluated at the input.
    Map(Var, Array2<f64>),
    LogSoftmax(Var),
    /// Picks column `idx[i]` of row `i`, giving an `r x 1` column.
    Gather(Var, Vec<usize>),
    /// Elementwise minimum; ties route the gradient to the left operand.
    Min(Var, Var),
    Clamp(Var, f64, f64),
    RowSum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no gradient path back to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x c row");
        let value = self.value(a) + self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, k), tracked)
    }

    /// Elementwise `f` with derivative `df`.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let input = self.value(a);
        let value = input.mapv(&f);
        let deriv = input.mapv(&df);
        let tracked = self.tracked(a);
        self.push(value, Op::Map(a, deriv), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let value = input.mapv(f64::tanh);
        let deriv = value.mapv(|t| 1.0 - t * t);
        let tracked = self.tracked(a);
        self.push(value, Op::Map(a, deriv), tracked)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let deriv = value.clone();
        let tracked = self.tracked(a);
        self.push(value, Op::Map(a, deriv), tracked)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, |x| 2.0 * x)
    }

    /// Row-wise log-softmax computed with the max-logit shift.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let tracked = self.tracked(a);
        self.push(value, Op::LogSoftmax(a), tracked)
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let input = self.value(a);
        assert_eq!(input.nrows(), idx.len(), "gather needs one index per row");
        let value = Array2::from_shape_fn((idx.len(), 1), |(i, _)| input[[i, idx[i]]]);
        let tracked = self.tracked(a);
        self.push(value, Op::Gather(a, idx.to_vec()), tracked)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x <= y { x } else { y });
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Min(a, b), tracked)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let tracked = self.tracked(a);
        self.push(value, Op::Clamp(a, lo, hi), tracked)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let tracked = self.tracked(a);
        self.push(value, Op::RowSum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let m = input.sum() / input.len() as f64;
        let tracked = self.tracked(a);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a), tracked)
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut send = |target: Var, contrib: Array2<f64>| {
            if !self.nodes[target.0].tracked {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    send(*a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    send(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g * self.value(*b));
                send(*b, g * self.value(*a));
            }
            Op::Scale(a, k) => send(*a, g * *k),
            Op::Map(a, deriv) => send(*a, g * deriv),
            Op::LogSoftmax(a) => {
                let probs = self.nodes[i].value.mapv(f64::exp);
                let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*a, g - &(&probs * &total));
            }
            Op::Gather(a, idx) => {
                let mut contrib = Array2::zeros(self.value(*a).dim());
                for (row, &col) in idx.iter().enumerate() {
                    contrib[[row, col]] = g[[row, 0]];
                }
                send(*a, contrib);
            }
            Op::Min(a, b) => {
                let left = Zip::from(self.value(*a))
                    .and(self.value(*b))
                    .map_collect(|&x, &y| x <= y);
                send(
                    *a,
                    Zip::from(g).and(&left).map_collect(|&gv, &l| if l { gv } else { 0.0 }),
                );
                send(
                    *b,
                    Zip::from(g).and(&left).map_collect(|&gv, &l| if l { 0.0 } else { gv }),
                );
            }
            Op::Clamp(a, lo, hi) => {
                let contrib = Zip::from(g).and(self.value(*a)).map_collect(|&gv, &x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                send(*a, contrib);
            }
            Op::RowSum(a) => {
                let cols = self.value(*a).ncols();
                let contrib = Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                send(*a, contrib);
            }
            Op::Mean(a) => {
                let dim = self.value(*a).dim();
                let n = (dim.0 * dim.1) as f64;
                send(*a, Array2::from_elem(dim, g[[0, 0]] / n));
            }
        }
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros of the given shape if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, dim: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(dim))
    }
}

pub(crate) fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
