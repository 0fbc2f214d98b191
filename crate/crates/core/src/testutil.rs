//! Test-only helpers: seeded tensors and a central finite-difference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{Layer, Mode};
use crate::tensor::{Real, Tensor};

pub fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
}

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Loss `Σ out ⊙ w` for a fixed random projection `w`.
fn projected(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Max relative error between analytic and central-difference gradients of a
/// random projection of the layer output, over the input and every parameter.
pub fn check_layer_gradients<L: Layer<f64>>(layer: &mut L, input: &Tensor<f64>, seed: u64) -> f64 {
    let mode = Mode::Training { step: 3 };
    let out = layer.forward(input, mode).unwrap();
    let w = random::<f64>(out.shape(), seed);
    layer.zero_grad();
    let out = layer.forward(input, mode).unwrap();
    assert_eq!(out.shape(), w.shape());
    let gx = layer.backward(&w).unwrap();

    let mut worst: f64 = 0.0;
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let up = projected(&layer.forward(&x, mode).unwrap(), &w);
        x.data_mut()[i] = orig - FD_STEP;
        let down = projected(&layer.forward(&x, mode).unwrap(), &w);
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err(gx.data()[i], (up - down) / (2.0 * FD_STEP)));
    }

    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    layer.visit_params(&mut |n, p| grads.push((n.to_string(), p.grad.data().to_vec())));
    for (name, analytic) in &grads {
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64, layer: &mut L| {
                layer.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] += delta;
                    }
                });
                let v = projected(&layer.forward(input, mode).unwrap(), &w);
                layer.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] -= delta;
                    }
                });
                v
            };
            let up = eval(FD_STEP, layer);
            let down = eval(-FD_STEP, layer);
            let e = rel_err(a, (up - down) / (2.0 * FD_STEP));
            if e > 1e-4 {
                eprintln!("{name}[{i}]: analytic {a} vs numeric {}", (up - down) / (2.0 * FD_STEP));
            }
            worst = worst.max(e);
        }
    }
    worst
}
