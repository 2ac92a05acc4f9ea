use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};

/// A collection of named parameter blocks in a fixed order.
///
/// Gradients, optimizer moments and checkpoints all use the order returned
/// here.
pub trait ParamSet {
    fn block_names(&self) -> Vec<String>;
    fn blocks(&self) -> Vec<&DMatrix<f64>>;
    fn blocks_mut(&mut self) -> Vec<&mut DMatrix<f64>>;

    fn zero_grads(&self) -> Vec<DMatrix<f64>> {
        self.blocks().iter().map(|b| DMatrix::zeros(b.nrows(), b.ncols())).collect()
    }

    fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P, lr: f64) -> Self {
        Self {
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Gradients are checked before anything is modified, so a non-finite
    /// gradient leaves both parameters and moments untouched.
    pub fn update<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[DMatrix<f64>]) -> Result<()> {
        let names = params.block_names();
        let mut blocks = params.blocks_mut();
        if blocks.len() != grads.len() || blocks.len() != self.m.len() {
            return contract(format!(
                "adam: {} parameter blocks, {} gradients, {} moments",
                blocks.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (i, (b, g)) in blocks.iter().zip(grads).enumerate() {
            if b.shape() != g.shape() {
                return contract(format!("adam: gradient shape mismatch for `{}`", names[i]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", names[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, block) in blocks.iter_mut().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                block[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
