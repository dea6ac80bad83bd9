use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{expect_shape, Checkpoint, EngineError, Parameterized, Record, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment accumulators for one parameter set, in the set's tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let zeros = |s: &Vec<usize>| Array2::zeros((s[0], s[1]));
        Self { config, step: 0, m: shapes.iter().map(zeros).collect(), v: shapes.iter().map(zeros).collect() }
    }

    pub fn for_params<P: Parameterized + ?Sized>(config: AdamConfig, model: &P) -> Self {
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    /// Applies one update from the gradients currently accumulated in `model`.
    pub fn update<P: Parameterized + ?Sized>(&mut self, model: &mut P) -> Result<(), EngineError> {
        let mut params = model.params_mut();
        adam_step(&mut params, self)
    }

    pub fn push_records(&self, prefix: &str, ckpt: &mut Checkpoint) {
        let c = &self.config;
        ckpt.push(Record::vector(format!("{prefix}.config"), vec![c.lr, c.beta1, c.beta2, c.eps, self.step as f64]));
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ckpt.push(Record::from_array(format!("{prefix}.m.{i}"), m));
            ckpt.push(Record::from_array(format!("{prefix}.v.{i}"), v));
        }
    }

    /// Restores moments and step count; the shapes of `self` must match the record.
    pub fn load_records(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<(), EngineError> {
        let name = format!("{prefix}.config");
        let cfg = ckpt.get(&name).ok_or(EngineError::MissingRecord(name))?;
        if cfg.values.len() != 5 {
            return Err(EngineError::ShapeMismatch { expected: vec![5], got: cfg.dims.clone() });
        }
        self.config = AdamConfig { lr: cfg.values[0], beta1: cfg.values[1], beta2: cfg.values[2], eps: cfg.values[3] };
        self.step = cfg.values[4] as u64;
        for (tag, store) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (i, slot) in store.iter_mut().enumerate() {
                let name = format!("{prefix}.{tag}.{i}");
                let arr = ckpt.get(&name).ok_or_else(|| EngineError::MissingRecord(name.clone()))?.to_array()?;
                expect_shape(&arr, slot.shape())?;
                *slot = arr;
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `params` using each tensor's `grad`.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<(), EngineError> {
    if params.len() != state.m.len() {
        return Err(EngineError::ShapeMismatch { expected: vec![state.m.len()], got: vec![params.len()] });
    }
    for (p, m) in params.iter().zip(&state.m) {
        expect_shape(&p.grad, m.shape())?;
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
        if !p.value.iter().all(|x| x.is_finite()) {
            return Err(EngineError::NonFinite("parameters after Adam step".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut t = Tensor::new(array![[1.0, -2.0]]);
        let mut s = AdamState::new(AdamConfig::default(), &[t.shape()]);
        adam_step(&mut [&mut t], &mut s).unwrap();
        assert_eq!(t.value, array![[1.0, -2.0]]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for scale in [1e-3, 1.0, 1e6] {
            let mut t = Tensor::new(array![[0.0, 0.0, 0.0]]);
            t.grad = array![[scale, -3.0 * scale, 0.5 * scale]];
            let mut s = AdamState::new(AdamConfig::default(), &[t.shape()]);
            adam_step(&mut [&mut t], &mut s).unwrap();
            for (w, g) in t.value.iter().zip(t.grad.iter()) {
                assert!((w.abs() - 1e-3).abs() < 1e-5, "{w}");
                assert_eq!(w.signum(), -g.signum());
            }
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2, lr 0.1; the scalar recursion is simulated
        // independently to pin the trajectory.
        let mut t = Tensor::new(array![[0.0]]);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), &[t.shape()]);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for k in 1..=100 {
            t.grad = array![[2.0 * (t.value[[0, 0]] - 3.0)]];
            adam_step(&mut [&mut t], &mut s).unwrap();
            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.1 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert_eq!(t.value[[0, 0]], w);
        // loss gap to the optimum
        assert!((w - 3.0).powi(2) < 1e-3, "{w}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tensor::new(array![[0.0, 1.0]]);
        let mut s = AdamState::new(AdamConfig::default(), &[vec![1, 3]]);
        assert!(matches!(adam_step(&mut [&mut t], &mut s), Err(EngineError::ShapeMismatch { .. })));
    }
}
