use super::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD update of a single parameter buffer:
/// `v = momentum·v + (grad + weight_decay·param)`, `param -= lr·v`.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], cfg: &SgdConfig) {
    let (lr, mom, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mom * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
}

/// SGD with momentum and L2 weight decay; holds one
/// velocity buffer per parameter.
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Self {
        let velocity = store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
        Sgd { config, velocity }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(|g| g.to_vec()) else { continue };
            sgd_step(t.data_mut(), &grad, &mut self.velocity[id.0], &self.config);
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.velocity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, momentum: f64, weight_decay: f64) -> SgdConfig {
        SgdConfig { lr, momentum, weight_decay }
    }

    #[test]
    fn plain_step() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[2.0], &mut v, &cfg(0.1, 0.0, 0.0));
        assert!((p[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn momentum_second_step_is_1_9x() {
        let mut p = [0.0f64];
        let mut v = [0.0];
        let c = cfg(0.1, 0.9, 0.0);
        sgd_step(&mut p, &[1.0], &mut v, &c);
        let first = p[0];
        sgd_step(&mut p, &[1.0], &mut v, &c);
        let second = p[0] - first;
        assert!((second / first - 1.9).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = [3.5f32];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, &cfg(0.5, 0.9, 0.0));
        assert_eq!(p[0], 3.5);
    }
}
