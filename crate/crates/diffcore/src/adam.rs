use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Adam with bias correction over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

#[derive(Clone, Debug)]
struct Slot {
    id: ParamId,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ParamStore, ids: &[ParamId], lr: f64) -> Self {
        let slots = ids
            .iter()
            .map(|&id| {
                let n = params.get(id).numel();
                Slot {
                    id,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.iter().find(|s| s.id == id).map(|s| s.m.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.iter().find(|s| s.id == id).map(|s| s.v.as_slice())
    }

    /// Applies one update. Gradients are left in place; the caller clears them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(s) = self.slots.iter().find(|s| params.get(s.id).grad().is_none()) {
            return Err(Error::MissingGradient(params.name(s.id).to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for s in &mut self.slots {
            let tensor = params.get_mut(s.id);
            let g = tensor.grad().expect("checked above").to_vec();
            let w = tensor.data_mut();
            for i in 0..w.len() {
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g[i];
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = s.m[i] / c1;
                let vhat = s.v[i] / c2;
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w0: f64) -> (ParamStore, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.register("w", Tensor::filled([1], w0), true).unwrap();
        (ps, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut ps, id) = single(1.0);
        let mut opt = Adam::new(&ps, &[id], 0.1);
        ps.get_mut(id).set_grad(vec![1.0]).unwrap();
        opt.step(&mut ps).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        let w = ps.get(id).data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(ps.get(id).grad().unwrap(), &[1.0]);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let (mut ps, id) = single(2.0);
        let mut opt = Adam::new(&ps, &[id], 0.1);
        ps.get_mut(id).set_grad(vec![1.0]).unwrap();
        opt.step(&mut ps).unwrap();
        let w = ps.get(id).data()[0];
        let m1 = opt.first_moment(id).unwrap()[0];
        ps.get_mut(id).set_grad(vec![0.0]).unwrap();
        let mut zero_opt = Adam::new(&ps, &[id], 0.1);
        zero_opt.step(&mut ps).unwrap();
        assert_eq!(ps.get(id).data()[0], w);
        opt.step(&mut ps).unwrap();
        assert!((opt.first_moment(id).unwrap()[0] - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let (mut ps, id) = single(5.0);
        let mut opt = Adam::new(&ps, &[id], 0.1);
        for _ in 0..500 {
            let w = ps.get(id).data()[0];
            ps.get_mut(id).set_grad(vec![2.0 * w]).unwrap();
            opt.step(&mut ps).unwrap();
        }
        assert!(ps.get(id).data()[0].abs() < 1e-2, "{}", ps.get(id).data()[0]);
        assert_eq!(opt.step_count(), 500);
    }

    #[test]
    fn missing_gradient_is_named() {
        let (mut ps, id) = single(1.0);
        let mut opt = Adam::new(&ps, &[id], 0.1);
        match opt.step(&mut ps) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }
}
