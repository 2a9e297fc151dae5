//! Central finite-difference oracles for the autograd tape.
//!
//! Outputs are scalarised with a fixed pseudo-random weighting so a single
//! backward pass checks the whole Jacobian-vector product. Errors are reported
//! as `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` in the Euclidean
//! norm over every checked entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

pub const FD_STEP: f64 = 1e-5;

fn projection(shape: (usize, usize)) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let data = (0..shape.0 * shape.1).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Mat::from_vec(shape.0, shape.1, data)
}

fn scalarise(g: &mut Graph, out: Var, weights: &mut Option<Mat>) -> Var {
    let shape = g.shape(out);
    if shape == (1, 1) && weights.is_none() {
        return out;
    }
    let w = weights.get_or_insert_with(|| projection(shape));
    g.weighted_sum(out, w)
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Checks gradients of `f` with respect to every entry of every input.
pub fn check_inputs(inputs: &[Mat], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut weights = None;
    let eval = |vals: &[Mat], weights: &mut Option<Mat>| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&mut g, &vars);
        let s = scalarise(&mut g, out, weights);
        g.value(s).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
    let out = f(&mut g, &vars);
    let s = scalarise(&mut g, out, &mut weights);
    let grads = g.backward(s);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut vals = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let ga = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(inputs[k].rows(), inputs[k].cols()));
        for e in 0..inputs[k].len() {
            let orig = vals[k].data()[e];
            vals[k].data_mut()[e] = orig + FD_STEP;
            let up = eval(&vals, &mut weights);
            vals[k].data_mut()[e] = orig - FD_STEP;
            let down = eval(&vals, &mut weights);
            vals[k].data_mut()[e] = orig;
            analytic.push(ga.data()[e]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Checks gradients of `f` with respect to the listed parameter blocks.
///
/// Returns the worst per-block relative error together with that block's name.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> (f64, String) {
    let mut weights = None;
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let s = scalarise(&mut g, out, &mut weights);
    let grads = g.backward(s);
    let leaves = g.param_vars();

    let mut work = store.clone();
    let mut worst = (0.0, String::new());
    for &id in ids {
        let block = store.get(id);
        let ga = leaves
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| grads.wrt(*v).cloned())
            .unwrap_or_else(|| Mat::zeros(block.rows(), block.cols()));
        let mut numeric = Vec::with_capacity(block.len());
        for e in 0..block.len() {
            let orig = block.data()[e];
            work.get_mut(id).data_mut()[e] = orig + FD_STEP;
            let up = {
                let mut g = Graph::new();
                let o = f(&mut g, &work);
                let s = scalarise(&mut g, o, &mut weights);
                g.value(s).item()
            };
            work.get_mut(id).data_mut()[e] = orig - FD_STEP;
            let down = {
                let mut g = Graph::new();
                let o = f(&mut g, &work);
                let s = scalarise(&mut g, o, &mut weights);
                g.value(s).item()
            };
            work.get_mut(id).data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let err = relative_error(ga.data(), &numeric);
        if err >= worst.0 {
            worst = (err, store.name(id).to_string());
        }
    }
    worst
}
