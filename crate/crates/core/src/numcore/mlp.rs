use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::tape::{Tape, Var};
use crate::error::{contract, Result};

/// Overflow-free `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

/// Derivative of [`softplus`], i.e. the logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One-hidden-layer tanh network `W2·tanh(W1·u + b1) + b2`.
///
/// Biases are stored as single-column matrices so that every parameter block
/// of the crate has the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp1h {
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

impl Mlp1h {
    pub fn zeros(din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, din),
            b1: DMatrix::zeros(hidden, 1),
            w2: DMatrix::zeros(dout, hidden),
            b2: DMatrix::zeros(dout, 1),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng>(din: usize, hidden: usize, dout: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(din, hidden, dout);
        let a1 = (6.0 / (din + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + dout) as f64).sqrt();
        net.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        net.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        net
    }

    pub fn din(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn dout(&self) -> usize {
        self.w2.nrows()
    }

    /// Checks the shape and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, din, dout) = (self.hidden(), self.din(), self.dout());
        if h == 0 || din == 0 || dout == 0 {
            return contract("Mlp1h dimensions must be >= 1");
        }
        if self.b1.shape() != (h, 1) || self.w2.ncols() != h || self.b2.shape() != (dout, 1) {
            return contract("Mlp1h block shapes are inconsistent");
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(crate::Error::NonFinite("Mlp1h".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> [&DMatrix<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut DMatrix<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Block suffixes in [`blocks`](Self::blocks) order.
    pub const BLOCK_NAMES: [&'static str; 4] = ["w1", "b1", "w2", "b2"];

    /// Records the four blocks as parameter leaves `first_block..first_block + 4`.
    pub fn to_tape(&self, tape: &mut Tape, first_block: usize) -> MlpVars {
        MlpVars {
            w1: tape.param(first_block, &self.w1),
            b1: tape.param(first_block + 1, &self.b1),
            w2: tape.param(first_block + 2, &self.w2),
            b2: tape.param(first_block + 3, &self.b2),
        }
    }

    /// Records the blocks as constants (no adjoints are reported).
    pub fn to_tape_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }

    fn hidden_act(&self, u: &[f64]) -> Result<DVector<f64>> {
        if u.len() != self.din() {
            return contract(format!("Mlp1h input has length {}, expected {}", u.len(), self.din()));
        }
        let u = DVector::from_column_slice(u);
        let mut a = &self.w1 * u;
        a += self.b1.column(0);
        Ok(a.map(f64::tanh))
    }

    /// Network output for input `u`.
    pub fn forward(&self, u: &[f64]) -> Result<DVector<f64>> {
        let h = self.hidden_act(u)?;
        let mut y = &self.w2 * h;
        y += self.b2.column(0);
        Ok(y)
    }

    /// Gradient of a scalar network with respect to its input:
    /// `W1ᵀ(w2 ⊙ (1 − h²))`.
    pub fn input_grad(&self, u: &[f64]) -> Result<DVector<f64>> {
        if self.dout() != 1 {
            return contract("input_grad requires a scalar-output network");
        }
        let h = self.hidden_act(u)?;
        let g = DVector::from_fn(self.hidden(), |m, _| self.w2[(0, m)] * (1.0 - h[m] * h[m]));
        Ok(self.w1.tr_mul(&g))
    }

    /// Hessian of a scalar network with respect to its input:
    /// `W1ᵀ diag(w2 ⊙ (−2h(1 − h²))) W1`.
    pub fn input_hessian(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        if self.dout() != 1 {
            return contract("input_hessian requires a scalar-output network");
        }
        let h = self.hidden_act(u)?;
        let din = self.din();
        let c: Vec<f64> = (0..self.hidden())
            .map(|m| self.w2[(0, m)] * (-2.0 * h[m] * (1.0 - h[m] * h[m])))
            .collect();
        let mut hess = DMatrix::zeros(din, din);
        for i in 0..din {
            for j in 0..=i {
                let v: f64 = c.iter().enumerate().map(|(m, cm)| cm * self.w1[(m, i)] * self.w1[(m, j)]).sum();
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        Ok(hess)
    }
}

/// Tape handles of an [`Mlp1h`].
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    /// `tanh(x·W1ᵀ + b1)` for a batch `x: n × din`.
    pub fn hidden(&self, tape: &mut Tape, x: Var) -> Var {
        let a = tape.linear(x, self.w1, Some(self.b1));
        tape.tanh(a)
    }

    /// Network output for a batch `x: n × din`, shape `n × dout`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden(tape, x);
        tape.linear(h, self.w2, Some(self.b2))
    }
}
