//! Shared helpers for the integration tests: a central finite-difference
//! gradient checker and small random fixtures.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tapgkit::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use tapgkit::Result;

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding compare by absolute error.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Entries with magnitude in `[gap, hi)` and a random sign, so that no entry
/// sits within a finite-difference step of zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Outcome of one gradient check.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// `(analytic, numeric)` at the worst entry.
    pub worst: (f64, f64),
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        if e > self.max_rel {
            self.max_rel = e;
            self.worst = (analytic, numeric);
        }
        self.checked += 1;
    }

    pub fn merge(self, o: GradCheck) -> GradCheck {
        let worst = if o.max_rel > self.max_rel { o.worst } else { self.worst };
        GradCheck {
            max_rel: self.max_rel.max(o.max_rel),
            checked: self.checked + o.checked,
            worst,
        }
    }
}

/// Reduces an output of any shape to a scalar through fixed random weights.
fn project(g: &mut Graph<'_, f64>, y: Var, weights: &[f64]) -> Result<Var> {
    g.dot_const(y, weights)
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks the gradient of `build` with respect to every entry of every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    check_inputs_with(&ParamStore::new(), inputs, rng, build)
}

/// As [`check_inputs`], with `build` free to read parameters from `store`.
pub fn check_inputs_with<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], w: Option<&[f64]>| -> Result<(f64, Vec<Vec<f64>>, usize)> {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone(), true)).collect::<Result<_>>()?;
        let y = build(&mut g, &vars)?;
        let n = g.value(y).len();
        let Some(w) = w else { return Ok((0.0, vec![], n)) };
        let loss = project(&mut g, y, w)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect();
        Ok((value, grads, n))
    };
    let (_, _, n_out) = eval(inputs, None)?;
    let w = projection(rng, n_out);
    let (_, analytic, _) = eval(inputs, Some(&w))?;
    let mut out = GradCheck::default();
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[k] = t.data()[k] + FD_STEP;
            let (up, _, _) = eval(&vals, Some(&w))?;
            vals[i].data_mut()[k] = t.data()[k] - FD_STEP;
            let (down, _, _) = eval(&vals, Some(&w))?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            out.record(analytic[i][k], numeric);
        }
    }
    Ok(out)
}

/// Checks the gradient of a scalar `loss` with respect to `coords`, each an
/// entry of a stored parameter.
pub fn check_params<F>(store: &ParamStore<f64>, coords: &[(ParamId, usize)], loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let value = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::with_params(store);
    let l = loss(&mut g)?;
    g.backward(l)?;
    let grads = g.param_grads();
    let mut out = GradCheck::default();
    let mut work = store.clone();
    for &(id, k) in coords {
        let analytic = grads.iter().find(|(p, _)| *p == id).map(|(_, v)| v[k]).unwrap_or(0.0);
        let x = store.value(id).data()[k];
        work.value_mut(id).data_mut()[k] = x + FD_STEP;
        let up = value(&work)?;
        work.value_mut(id).data_mut()[k] = x - FD_STEP;
        let down = value(&work)?;
        work.value_mut(id).data_mut()[k] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        out.record(analytic, numeric);
    }
    Ok(out)
}

/// `per_param` random coordinates of every parameter in `store`.
pub fn sample_coords(store: &ParamStore<f64>, per_param: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| {
            let n = p.value.len();
            (0..per_param.min(n)).map(|_| (id, rng.gen_range(0..n))).collect::<Vec<_>>()
        })
        .collect()
}
