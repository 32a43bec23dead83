use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Graph, ParameterStore, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates probed per parameter tensor; `None` checks all of them.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            samples_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` records a forward pass over `params` and returns the scalar loss.
pub fn grad_check<F>(
    params: &ParameterStore,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(Graph, Var)>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let (graph, loss) = build(&analytic)?;
    graph.backward(loss, 1.0, &mut analytic)?;

    let eval = |p: &ParameterStore| -> Result<f64> {
        let (g, l) = build(p)?;
        g.value(l).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let numel = params.get(&name)?.numel();
        let coords: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for idx in coords {
            let orig = probe.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.grad(&name)?.data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
