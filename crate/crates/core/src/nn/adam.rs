//! Adam optimizer with per-tensor first/second moment state.

use ndarray::ArrayD;

use super::{Float, Module, Param};

pub struct Adam<F: Float> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: u64,
    moments: Option<Vec<(ArrayD<F>, ArrayD<F>)>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: F::from_f64(lr).unwrap(),
            beta1: F::from_f64(0.9).unwrap(),
            beta2: F::from_f64(0.999).unwrap(),
            eps: F::from_f64(1e-8).unwrap(),
            t: 0,
            moments: None,
        }
    }

    /// One update step over a stable traversal of parameters.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        let moments = self.moments.get_or_insert_with(|| {
            params
                .iter()
                .map(|p| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())))
                .collect()
        });
        assert_eq!(moments.len(), params.len(), "parameter set changed under optimizer");
        self.t += 1;
        let t = F::from_u64(self.t).unwrap();
        let bc1 = F::one() - self.beta1.powf(t);
        let bc2 = F::one() - self.beta2.powf(t);
        for (p, (m, v)) in params.iter_mut().zip(moments.iter_mut()) {
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (F::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w = *w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }

    /// One update step over a module's parameters in traversal order.
    pub fn step_module<M: Module<F>>(&mut self, module: &mut M) {
        let moments = self.moments.get_or_insert_with(|| {
            let mut m = Vec::new();
            module.visit_params(&mut |p| {
                m.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())))
            });
            m
        });
        self.t += 1;
        let t = F::from_u64(self.t).unwrap();
        let bc1 = F::one() - self.beta1.powf(t);
        let bc2 = F::one() - self.beta2.powf(t);
        let (lr, beta1, beta2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut idx = 0usize;
        module.visit_params(&mut |p| {
            let (m, v) = &mut moments[idx];
            idx += 1;
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = beta1 * *m + (F::one() - beta1) * g;
                    *v = beta2 * *v + (F::one() - beta2) * g * g;
                    *w = *w - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        });
        assert_eq!(idx, moments.len(), "parameter set changed under optimizer");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn converges_on_quadratic() {
        // minimize (w - 3)^2 elementwise
        let mut p = Param::new(ArrayD::<f64>::zeros(IxDyn(&[4])));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.zero_grad();
            let g = p.value.mapv(|w| 2.0 * (w - 3.0));
            p.grad.assign(&g);
            opt.step(&mut [&mut p]);
        }
        for &w in p.value.iter() {
            assert!((w - 3.0).abs() < 1e-3, "w = {w}");
        }
    }
}
