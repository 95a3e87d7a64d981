//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Gradients with magnitude below this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Probe at most this many coordinates per input (sampled deterministically).
    pub max_probes_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_probes_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compare the tape gradient of scalar `f` against central finite differences
/// at every (or a sampled subset of) coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::Usage(format!("epsilon {} outside [1e-7, 1e-3]", opts.epsilon)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    if !g.value(out).all_finite() {
        return Err(Error::Numerical("non-finite function value".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
        tolerance: opts.tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let idx: Vec<usize> = match opts.max_probes_per_input {
            Some(cap) if cap < t.len() => {
                let mut v = sample(&mut rng, t.len(), cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..t.len()).collect(),
        };
        for j in idx {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + opts.epsilon;
            let fp = eval(&f, &work)?;
            work[ti].data_mut()[j] = orig - opts.epsilon;
            let fm = eval(&f, &work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * opts.epsilon);
            let err = relative_error(analytic[ti].data()[j], numeric);
            if !err.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at input {ti}, element {j}"
                )));
            }
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, j));
            }
        }
    }
    Ok(report)
}
