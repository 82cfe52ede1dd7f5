use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates probed per input tensor; smaller tensors are probed fully.
    pub probes: usize,
    /// Minimum distance to a kink, in multiples of `eps`.
    pub kink_margin: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// essentially zero are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            probes: 64,
            kink_margin: 10.0,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
    /// Set when the function produced a non-finite value; names the input
    /// and coordinate being perturbed.
    pub failure: Option<String>,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err <= tol
    }

    /// Worst case over several reports of the same op.
    pub fn merge(mut self, other: &GradReport) -> GradReport {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.probes += other.probes;
        if self.failure.is_none() {
            self.failure = other.failure.clone();
        }
        self
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, f64)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    Ok((loss.value().item()?, tape.kink_gap()))
}

/// Compares the tape gradient of the scalar `f` at `inputs` with central
/// differences.
pub fn gradcheck<F>(op: &str, f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut report = GradReport {
        op: op.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        probes: 0,
        failure: None,
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        report.failure = Some("non-finite output at the base point".into());
        return Ok(report);
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    drop(grads);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut point: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.probes {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.probes).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = input.data()[i];
            point[which].data_mut()[i] = orig + cfg.eps;
            let (plus, _) = eval(&f, &point)?;
            point[which].data_mut()[i] = orig - cfg.eps;
            let (minus, _) = eval(&f, &point)?;
            point[which].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                report.failure = Some(format!("non-finite output perturbing input {which} at index {i}"));
                return Ok(report);
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[which].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.probes += 1;
        }
    }
    Ok(report)
}

/// Runs [`gradcheck`] at `points` random points with inputs drawn uniformly
/// from `[-1, 1]`. A draw is rejected and redrawn when the forward pass comes
/// within `kink_margin * eps` of a non-differentiable point.
pub fn gradcheck_random<F>(op: &str, f: F, shapes: &[Shape], points: usize, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    const MAX_DRAWS: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut total: Option<GradReport> = None;
    let mut accepted = 0;
    let mut draws = 0;
    while accepted < points {
        if draws == MAX_DRAWS {
            return Err(Error::InvalidArgument(format!(
                "{op}: no kink-free point found in {MAX_DRAWS} draws"
            )));
        }
        draws += 1;
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|&s| Tensor::rand_uniform(s, -1.0, 1.0, &mut rng))
            .collect();
        let (_, gap) = eval(&f, &inputs)?;
        if gap < cfg.kink_margin * cfg.eps {
            continue;
        }
        let point_cfg = GradCheckConfig {
            seed: cfg.seed.wrapping_add(accepted as u64),
            ..cfg.clone()
        };
        let report = gradcheck(op, &f, &inputs, &point_cfg)?;
        total = Some(match total {
            None => report,
            Some(t) => t.merge(&report),
        });
        accepted += 1;
    }
    Ok(total.expect("points >= 1"))
}

/// Draws `points` random inputs for [`gradcheck`] with the same rejection
/// rule as [`gradcheck_random`], returning them for callers that build inputs
/// themselves.
pub fn kink_free_points<F>(f: &F, candidates: impl Iterator<Item = Vec<Tensor>>, points: usize, cfg: &GradCheckConfig) -> Result<Vec<Vec<Tensor>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut out = Vec::new();
    for inputs in candidates {
        if out.len() == points {
            break;
        }
        let (_, gap) = eval(f, &inputs)?;
        if gap >= cfg.kink_margin * cfg.eps {
            out.push(inputs);
        }
    }
    Ok(out)
}

/// Fixed pseudo-random values used to turn a tensor output into a scalar
/// loss. A plain sum would hide errors in ops whose gradient sums to zero
/// (softmax, normalizations).
pub fn projection_weights(shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |[n, c, h, w]| {
        let k = (n * 131 + c * 31 + h * 7 + w) as f64;
        (k * 0.618_033_988).fract() - 0.5
    })
}

/// `sum(y * projection_weights(y.shape))`.
pub fn project<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    Ok(y.mul(tape.constant(projection_weights(y.shape())))?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w)
    }

    #[test]
    fn relu_away_from_kink() {
        let cfg = GradCheckConfig::default();
        let r = gradcheck_random("relu", |_, v| Ok(v[0].relu().square().sum()), &[s(1, 2, 3, 3)], 3, &cfg).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_fn(s(1, 2, 3, 3), |[_, c, h, w]| (c * 9 + h * 3 + w) as f64 * 0.1 - 0.4);
        let cfg = GradCheckConfig::default();
        let r = gradcheck_random(
            "linear",
            move |t, v| Ok(v[0].mul(t.constant(w.clone()))?.sum()),
            &[s(1, 2, 3, 3)],
            3,
            &cfg,
        )
        .unwrap();
        assert!(r.max_abs_err < 1e-9, "{r:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::full(s(1, 1, 1, 2), 1e-6);
        let r = gradcheck("log", |_, v| Ok(v[0].ln().sum()), &[x], &GradCheckConfig::default()).unwrap();
        assert!(r.failure.is_some(), "{r:?}");
    }
}
