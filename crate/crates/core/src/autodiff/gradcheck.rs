//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

/// Trials whose base point sits this close to a ReLU or max kink are
/// redrawn before any perturbation is tried.
const MIN_KINK_MARGIN: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Builds the function under test on a fresh graph. The returned node may
/// have any shape; non-scalar outputs are reduced with a fixed random
/// projection so every output coordinate contributes.
pub trait Probe: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> Probe for F {}

struct Eval {
    loss: f64,
    pattern: u64,
    margin: f64,
}

fn evaluate(inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>, proj_seed: u64, f: &impl Probe) -> Result<(Graph<f64>, Var, Vec<Var>, Eval)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let shape = g.shape(out).to_vec();
        let r = proj.get_or_insert_with(|| {
            let mut rng = seed::rng(proj_seed);
            let n = shape.iter().product();
            Tensor { shape: shape.clone(), data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
        });
        if r.shape != shape {
            return Err(Error::shape("gradcheck: output shape changed between evaluations"));
        }
        let rv = g.constant(r.clone());
        let prod = g.mul(out, rv)?;
        g.sum(prod)
    };
    let e = Eval {
        loss: g.value(loss).data[0],
        pattern: g.activation_pattern(),
        margin: g.kink_margin(),
    };
    Ok((g, loss, vars, e))
}

/// Outcome of one trial: `None` when the point was too close to a kink to
/// be differentiable at step `h`.
pub fn check_once(inputs: &[Tensor<f64>], h: f64, proj_seed: u64, f: &impl Probe) -> Result<Option<f64>> {
    let mut proj = None;
    let (mut g, loss, vars, base) = evaluate(inputs, &mut proj, proj_seed, f)?;
    if base.margin < MIN_KINK_MARGIN {
        return Ok(None);
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|d| d.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ci in 0..inputs[ti].len() {
            let orig = inputs[ti].data[ci];
            work[ti].data[ci] = orig + h;
            let (_, _, _, plus) = evaluate(&work, &mut proj, proj_seed, f)?;
            work[ti].data[ci] = orig - h;
            let (_, _, _, minus) = evaluate(&work, &mut proj, proj_seed, f)?;
            work[ti].data[ci] = orig;
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                return Ok(None);
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * h);
            worst = worst.max(relative_error(analytic[ti][ci], numeric));
        }
    }
    Ok(Some(worst))
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Runs `trials` accepted trials. `make_inputs(rng)` draws a fresh input set
/// per attempt; attempts landing on a kink are redrawn, at most
/// `10 * trials + 20` attempts in total.
pub fn run_trials(
    name: &str,
    trials: usize,
    seed_base: u64,
    mut make_inputs: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: impl Probe,
) -> Result<CheckReport> {
    let mut accepted = 0;
    let mut rejected = 0;
    let mut worst: f64 = 0.0;
    let max_attempts = 10 * trials + 20;
    let mut attempt = 0u64;
    while accepted < trials {
        if attempt as usize >= max_attempts {
            return Err(Error::Numerical(format!(
                "gradcheck {name}: only {accepted}/{trials} trials avoided activation kinks"
            )));
        }
        let mut rng = seed::child_rng(seed_base, attempt);
        let inputs = make_inputs(&mut rng);
        match check_once(&inputs, DEFAULT_STEP, seed::mix(seed_base, attempt ^ 0xA5A5), &f)? {
            Some(e) => {
                worst = worst.max(e);
                accepted += 1;
            }
            None => rejected += 1,
        }
        attempt += 1;
    }
    Ok(CheckReport {
        name: name.to_string(),
        trials: accepted,
        rejected,
        max_rel_err: worst,
    })
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    }
}
