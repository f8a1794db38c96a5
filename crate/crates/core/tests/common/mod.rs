#![allow(dead_code)]

use metalora::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 0.0, 1.0, &mut rng(seed))
}

/// Worst relative discrepancy between analytic gradients and central finite
/// differences of a scalar function built on a fresh graph.
///
/// `build` receives the graph and one tracked leaf per input and must return
/// a single-element output. Only forward values are used for the numeric side.
pub fn grad_check<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].numel() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let up = eval(&xs);
            xs[i].data_mut()[k] = orig - h;
            let down = eval(&xs);
            xs[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[k];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = randn(g.shape(y), seed ^ 0x5eed);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}
