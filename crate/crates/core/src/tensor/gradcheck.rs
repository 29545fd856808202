//! Central finite-difference gradient checking in `f64`.
//!
//! The checked function is reduced to a scalar through a fixed random
//! projection, so every output element contributes to the comparison.
//! Only forward evaluations are used for the numeric side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Per-input relative error `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-6)`.
pub fn relative_errors<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let shape = f(&g, &vars)?.shape();
        Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng)
    };

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let w = g.constant(projection.clone());
        Ok(out.mul(w)?.sum().value().data()[0])
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let loss = out.mul(g.constant(projection.clone()))?.sum();
    let grads = loss.backward()?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut p = plus[i].to_vec();
            let mut m = minus[i].to_vec();
            p[j] += DEFAULT_STEP;
            m[j] -= DEFAULT_STEP;
            plus[i] = Tensor::new(inputs[i].shape(), p)?;
            minus[i] = Tensor::new(inputs[i].shape(), m)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * DEFAULT_STEP);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        errors.push(diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-6));
    }
    Ok(errors)
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    for<'g> fn(&[Var<'g, f64>]) -> Result<Var<'g, f64>>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |v| {
            v[0].matmul(v[1])
        }),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]], |v| {
            v[0].matmul_t(v[1])
        }),
        ("transpose", vec![vec![3, 2]], |v| v[0].transpose()),
        ("add", vec![vec![3, 4], vec![3, 4]], |v| v[0].add(v[1])),
        ("add_broadcast", vec![vec![3, 4], vec![4]], |v| {
            v[0].add(v[1])
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |v| v[0].mul(v[1])),
        ("mul_broadcast", vec![vec![4], vec![2, 4]], |v| {
            v[0].mul(v[1])
        }),
        ("scale", vec![vec![2, 3]], |v| Ok(v[0].scale(-1.7))),
        ("gelu", vec![vec![2, 5]], |v| Ok(v[0].gelu())),
        ("layer_norm", vec![vec![2, 4], vec![4], vec![4]], |v| {
            v[0].layer_norm(v[1], v[2], 1e-5)
        }),
        ("softmax_cross_entropy", vec![vec![3, 5]], |v| {
            v[0].softmax_cross_entropy(&[4, 0, 2], &[true, false, true])
        }),
        ("sum", vec![vec![2, 3]], |v| Ok(v[0].sum())),
        ("embedding", vec![vec![5, 3]], |v| {
            v[0].embedding(&[0, 3, 3, 1])
        }),
        ("slice_cols", vec![vec![3, 5]], |v| v[0].slice_cols(1, 3)),
        ("rope", vec![vec![4, 8]], |v| v[0].rope(2, 2)),
        (
            "causal_attention",
            vec![vec![6, 4], vec![6, 4], vec![6, 4]],
            |v| v[0].causal_attention(v[1], v[2], 2, 3),
        ),
        ("dropout", vec![vec![2, 4]], |v| {
            v[0].dropout_with_mask(vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0])
        }),
    ]
}

/// Runs `trials` random finite-difference checks (inputs uniform in
/// `[-2, 2]`) for every differentiable operation and returns the worst
/// relative error seen per operation.
pub fn check_all_ops(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, op) in op_cases() {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| Tensor::uniform(s, -2.0, 2.0, &mut rng))
                .collect();
            let errs = relative_errors(&inputs, seed ^ trial as u64, |_, v| op(v))?;
            worst = errs.into_iter().fold(worst, f64::max);
        }
        out.push((name, worst));
    }
    Ok(out)
}
