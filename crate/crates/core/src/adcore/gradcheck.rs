use rand::seq::index::sample;

use super::{AdError, Graph, Stream, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per leaf; leaves at or below this size are checked exhaustively.
    pub coords_per_leaf: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coords_per_leaf: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1e-8, |a| + |n|)` over the compared coordinates.
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose `x + step` or `x - step` evaluation moved a
    /// `relu`/`abs` input across zero. The central difference there is not a
    /// derivative, so they are left out of `max_rel_err`.
    pub kink_crossings: usize,
}

/// Max relative error of [`grad_check_report`].
pub fn grad_check<B>(
    leaves: &[Tensor<f64>],
    opts: GradCheckOptions,
    build: B,
) -> Result<f64, AdError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AdError>,
{
    grad_check_report(leaves, opts, build).map(|r| r.max_rel_err)
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must construct the same scalar function every time it is called;
/// the i-th var it receives is the leaf for `leaves[i]`.
pub fn grad_check_report<B>(
    leaves: &[Tensor<f64>],
    opts: GradCheckOptions,
    build: B,
) -> Result<GradCheckReport, AdError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AdError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, Vec<bool>), AdError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g.value(out).item(), g.kink_pattern()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let pattern = g.kink_pattern();
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let root = Stream::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        kink_crossings: 0,
    };
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let coords: Vec<usize> = if leaf.len() <= opts.coords_per_leaf {
            (0..leaf.len()).collect()
        } else {
            let mut rng = root.split("coords", li as u64).rng();
            let mut c = sample(&mut rng, leaf.len(), opts.coords_per_leaf).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = leaf.data()[c];
            work[li].data_mut()[c] = orig + opts.step;
            let (plus, kp) = eval(&work)?;
            work[li].data_mut()[c] = orig - opts.step;
            let (minus, km) = eval(&work)?;
            work[li].data_mut()[c] = orig;
            if kp != pattern || km != pattern {
                report.kink_crossings += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[li].data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
