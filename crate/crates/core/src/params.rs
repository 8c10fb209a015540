//! Named dense parameters with paired gradient buffers and Adam state.
//!
//! Training runs at `f32`; gradient verification instantiates the same code
//! at `f64` because central finite differences are unreliable in single
//! precision.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::rng::Rng;

/// Index of a registered parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Borrowed view of one array: (name, rows, cols, data, adam_m, adam_v).
pub type ArrayView<'a, F> = (&'a str, usize, usize, &'a [F], &'a [F], &'a [F]);

/// Adam hyper-parameters. Defaults follow the usual lr 1e-3, beta1 0.9,
/// beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Entry<F> {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<F>,
    grad: Vec<F>,
    adam_m: Vec<F>,
    adam_v: Vec<F>,
}

/// All learnable arrays of a model, addressable by name, with gradients and
/// per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct ParameterStore<F> {
    entries: Vec<Entry<F>>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

impl<F: Float> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { entries: Vec::new(), index: BTreeMap::new(), step: 0 }
    }

    /// Register a `rows x cols` matrix (vectors are `len x 1`) filled
    /// uniformly in [-bound, +bound]. `bound = 0` gives zeros (biases).
    pub fn register(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let x = if bound == 0.0 { 0.0 } else { rng.uniform(-bound, bound) };
            data.push(F::from(x).unwrap());
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            rows,
            cols,
            data,
            grad: vec![F::zero(); n],
            adam_m: vec![F::zero(); n],
            adam_v: vec![F::zero(); n],
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn data(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].grad
    }

    /// Row `r` of a matrix parameter.
    pub fn row(&self, id: ParamId, r: usize) -> &[F] {
        let e = &self.entries[id.0];
        &e.data[r * e.cols..(r + 1) * e.cols]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g = F::zero();
            }
        }
    }

    pub fn optimizer_step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update over every parameter from its gradient
    /// buffer. Gradients are left untouched; call [`Self::zero_grads`] before
    /// the next accumulation.
    pub fn adam_step(&mut self, hp: &AdamParams) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = F::from(hp.beta1).unwrap();
        let b2 = F::from(hp.beta2).unwrap();
        let one = F::one();
        let lr = F::from(hp.lr).unwrap();
        let eps = F::from(hp.eps).unwrap();
        let c1 = F::from(1.0 - hp.beta1.powf(t)).unwrap();
        let c2 = F::from(1.0 - hp.beta2.powf(t)).unwrap();
        for e in &mut self.entries {
            for i in 0..e.data.len() {
                let g = e.grad[i];
                e.adam_m[i] = b1 * e.adam_m[i] + (one - b1) * g;
                e.adam_v[i] = b2 * e.adam_v[i] + (one - b2) * g * g;
                let m_hat = e.adam_m[i] / c1;
                let v_hat = e.adam_v[i] / c2;
                e.data[i] = e.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Raw view used by checkpointing: (name, rows, cols, data, adam_m, adam_v).
    pub fn export(&self) -> Vec<ArrayView<'_, F>> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.as_str(),
                    e.rows,
                    e.cols,
                    e.data.as_slice(),
                    e.adam_m.as_slice(),
                    e.adam_v.as_slice(),
                )
            })
            .collect()
    }

    /// Overwrite data and optimizer state of an existing entry. Errors with
    /// the offending name on shape mismatch.
    pub fn import(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        data: Vec<F>,
        adam_m: Vec<F>,
        adam_v: Vec<F>,
    ) -> Result<(), String> {
        let id = self
            .index
            .get(name)
            .copied()
            .ok_or_else(|| alloc::format!("unknown parameter {name}"))?;
        let e = &mut self.entries[id.0];
        if e.rows != rows || e.cols != cols {
            return Err(alloc::format!(
                "shape mismatch for {name}: expected {}x{}, found {rows}x{cols}",
                e.rows, e.cols
            ));
        }
        if data.len() != rows * cols || adam_m.len() != data.len() || adam_v.len() != data.len() {
            return Err(alloc::format!("length mismatch for {name}"));
        }
        e.data = data;
        e.adam_m = adam_m;
        e.adam_v = adam_v;
        Ok(())
    }

    pub fn set_optimizer_step_count(&mut self, step: u64) {
        self.step = step;
    }
}

impl<F: Float> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically safe softmax over a slice: max-subtracted exponentiation.
pub fn softmax_in_place<F: Float>(xs: &mut [F]) {
    if xs.is_empty() {
        return;
    }
    let mut max = xs[0];
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(g: f64) -> ParameterStore<f64> {
        let mut rng = Rng::new(1);
        let mut s = ParameterStore::<f64>::new();
        let id = s.register("w", 1, 1, 0.0, &mut rng);
        s.grad_mut(id)[0] = g;
        s
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // t=1, g=0.5: m_hat = g, v_hat = g^2, delta = -lr * g/(|g|+eps)
        let mut s = store_with(0.5);
        s.adam_step(&AdamParams::default());
        let got = s.data(ParamId(0))[0];
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
        assert!((got - (-9.99999980e-4)).abs() < 1e-11);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut s = store_with(0.0);
        s.adam_step(&AdamParams::default());
        assert_eq!(s.data(ParamId(0))[0], 0.0);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let mut a = store_with(0.25);
        let mut b = store_with(0.25);
        for _ in 0..10 {
            a.adam_step(&AdamParams::default());
            b.adam_step(&AdamParams::default());
        }
        assert_eq!(a.data(ParamId(0))[0], b.data(ParamId(0))[0]);
    }

    #[test]
    fn registration_is_seed_deterministic() {
        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(5);
        let mut a = ParameterStore::<f32>::new();
        let mut b = ParameterStore::<f32>::new();
        a.register("x", 4, 3, 0.5, &mut r1);
        b.register("x", 4, 3, 0.5, &mut r2);
        assert_eq!(a.data(ParamId(0)), b.data(ParamId(0)));
    }

    #[test]
    fn softmax_contract() {
        let mut xs = [0.0f64, 0.0];
        softmax_in_place(&mut xs);
        assert!((xs[0] - 0.5).abs() < 1e-12 && (xs[1] - 0.5).abs() < 1e-12);

        let mut ys = [3.5f64; 4];
        softmax_in_place(&mut ys);
        for y in ys {
            assert!((y - 0.25).abs() < 1e-12);
        }

        let mut zs = [1000.0f64, 0.0];
        softmax_in_place(&mut zs);
        assert!(zs[0] > 0.999_999 && zs[1] < 1e-6);
        assert!((zs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
