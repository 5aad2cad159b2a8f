//! Minimal neural-network stack on ndarray: conv/batchnorm/pooling/linear
//! layers with analytic backprop, variance-scaling initialization, Adam,
//! and the 50-layer bottleneck residual backbone. Generic over f32/f64 so
//! gradient checks can run at 64-bit precision.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod resnet;

use ndarray::ArrayD;

/// Element type for network tensors.
pub trait Float:
    ndarray::NdFloat + num_traits::FromPrimitive + num_traits::Float + Send + Sync + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

/// One trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F: Float> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Float> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything with an ordered set of trainable parameters and persistent
/// (non-trainable) state tensors. Traversal order is stable and defines
/// the checkpoint layout.
pub trait Module<F: Float> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    /// Persistent state such as batch-norm running statistics.
    fn visit_state(&mut self, _f: &mut dyn FnMut(&mut ArrayD<F>)) {}

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}
