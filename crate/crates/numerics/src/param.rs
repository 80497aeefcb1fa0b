use crate::tensor::Tensor;

/// A trainable (or frozen) weight with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad, frozen: false }
    }

    pub fn frozen(value: Tensor) -> Self {
        Parameter { frozen: true, ..Parameter::new(value) }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

pub fn zero_grads(params: &mut [Parameter]) {
    params.iter_mut().for_each(Parameter::zero_grad);
}

pub fn freeze_all(params: &mut [Parameter]) {
    params.iter_mut().for_each(|p| p.frozen = true);
}
