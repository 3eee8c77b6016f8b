//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::weights::Weights;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check a random subset of this many coordinates when the model is
    /// larger; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: Some(400),
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences on the parameters of `weights`.
pub fn grad_check<F>(weights: &Weights<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let eval = |w: &Weights<f64>| -> Result<f64> {
        let mut g = Graph::new();
        g.bind(w)?;
        let out = f(&mut g)?;
        if g.value(out).len() != 1 {
            return Err(invalid("grad_check needs a scalar function"));
        }
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    g.bind(weights)?;
    let out = f(&mut g)?;
    let analytic = g.param_grads(&g.backward(out)?);

    let coords: Vec<(String, usize)> = weights
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let chosen: Vec<usize> = match opts.max_coords {
        Some(k) if k < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, coords.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..coords.len()).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = weights.clone();
    for &c in &chosen {
        let (name, i) = &coords[c];
        let orig = probe.get(name).unwrap().data()[*i];
        probe.get_mut(name).unwrap().data_mut()[*i] = orig + opts.step;
        let plus = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig - opts.step;
        let minus = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[name].data()[*i];
        let rel = relative_error(a, numeric, opts.floor);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some(Mismatch {
                param: name.clone(),
                index: *i,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}
