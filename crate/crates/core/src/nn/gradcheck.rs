//! Central finite-difference verification of analytic gradients, used by
//! unit tests and the acceptance suite.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Module;

/// Compare analytic gradients against central finite differences on
/// `n_coords` randomly chosen parameter coordinates. `loss` must run the
/// full forward/backward pass and return the scalar loss; gradients are
/// read after one call with zeroed accumulators. Panics on a relative
/// error >= `tol`; returns the worst relative error observed.
pub fn grad_check<M, L>(module: &mut M, mut loss: L, n_coords: usize, tol: f64) -> f64
where
    M: Module<f64>,
    L: FnMut(&mut M) -> f64,
{
    // analytic gradients
    module.zero_grads();
    let _ = loss(module);
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    module.visit_params(&mut |p| analytic.push(p.grad.iter().copied().collect()));

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let n_params: Vec<usize> = analytic.iter().map(|g| g.len()).collect();
    for _ in 0..n_coords {
        let pi = rng.random_range(0..n_params.len());
        let ci = rng.random_range(0..n_params[pi]);
        let eps = 1e-5;
        let perturb = |module: &mut M, delta: f64| {
            let mut k = 0;
            module.visit_params(&mut |p| {
                if k == pi {
                    *p.value.iter_mut().nth(ci).unwrap() += delta;
                }
                k += 1;
            });
        };
        perturb(module, eps);
        let lp = loss(module);
        perturb(module, -2.0 * eps);
        let lm = loss(module);
        perturb(module, eps);
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[pi][ci];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        assert!(
            rel < tol,
            "gradient mismatch at param {pi} coord {ci}: analytic {a} numeric {numeric} rel {rel}"
        );
    }
    worst
}
