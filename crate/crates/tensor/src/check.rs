//! Central finite-difference gradient checking.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::tensor::Tensor;

/// Indexed access to a fixed list of parameter tensors.
pub trait Parameters {
    fn count(&self) -> usize;
    fn tensor(&self, i: usize) -> &Tensor;
    fn tensor_mut(&mut self, i: usize) -> &mut Tensor;
    fn name(&self, i: usize) -> String {
        format!("tensor {i}")
    }
}

impl Parameters for Vec<Tensor> {
    fn count(&self) -> usize {
        self.len()
    }
    fn tensor(&self, i: usize) -> &Tensor {
        &self[i]
    }
    fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self[i]
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Tensors with more elements than this are sampled instead of swept.
    pub exhaustive_limit: usize,
    /// Coordinates drawn (without replacement) from each sampled tensor.
    pub samples_per_tensor: usize,
    /// Denominator floor: when both gradients are smaller than this the
    /// comparison is effectively absolute.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            exhaustive_limit: 10_000,
            samples_per_tensor: 200,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub tensor: usize,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared, per tensor.
    pub checked: Vec<usize>,
    pub worst: Option<Discrepancy>,
}

impl GradCheckReport {
    pub fn total_checked(&self) -> usize {
        self.checked.iter().sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[i]` against `(f(p + eps) - f(p - eps)) / 2eps` for
/// each checked coordinate of each tensor in `params`.
///
/// `f` must be deterministic: pin any dropout RNG to a fixed seed inside it.
/// Parameters are restored exactly after each probe.
pub fn grad_check<P, F, E>(
    params: &mut P,
    analytic: &[Tensor],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> Result<f64, E>,
{
    assert_eq!(params.count(), analytic.len(), "one analytic gradient per tensor");
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (t, grad) in analytic.iter().enumerate() {
        let n = params.tensor(t).numel();
        assert_eq!(grad.numel(), n, "gradient shape for tensor {t}");
        let coords: Vec<usize> = if n <= opts.exhaustive_limit {
            (0..n).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, n, opts.samples_per_tensor.min(n)).into_vec();
            v.sort_unstable();
            v
        };
        for &i in &coords {
            let orig = params.tensor(t).data()[i];
            params.tensor_mut(t).data_mut()[i] = orig + opts.eps;
            let plus = f(params)?;
            params.tensor_mut(t).data_mut()[i] = orig - opts.eps;
            let minus = f(params)?;
            params.tensor_mut(t).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric, opts.floor);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if report.worst.as_ref().is_none_or(|w| rel >= w.rel_error) {
                    report.worst = Some(Discrepancy {
                        tensor: t,
                        name: params.name(t),
                        index: i,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
        report.checked.push(coords.len());
    }
    Ok(report)
}
