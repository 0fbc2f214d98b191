use crate::layers::Layer;
use crate::tensor::{Real, Tensor};

/// SGD with heavy-ball momentum: `v = μ·v + g`, `p -= η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    /// Velocity per parameter, in visitation order.
    velocity: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[(String, Tensor<T>)] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<(String, Tensor<T>)>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, model: &mut dyn Layer<T>, lr: f64) {
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |name, p| {
            if velocity.len() <= i || velocity[i].0 != name {
                velocity.insert(i, (name.to_string(), Tensor::zeros(p.value.shape())));
            }
            let v = velocity[i].1.data_mut();
            for ((w, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
            i += 1;
        });
        velocity.truncate(i);
    }
}
