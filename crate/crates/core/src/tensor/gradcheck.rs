//! Central finite-difference verification of tape gradients.

use super::{Result, Rng, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled across all parameters (all of them if fewer).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), with_grad))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NotScalar(tape.shape(loss).to_vec()));
    }
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    Ok((value, grads))
}

/// Compare the tape gradient of the scalar `f(params)` with central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` on sampled coordinates.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(TensorError::InvalidArgument(format!(
            "grad_check: eps must lie in (0, 1e-2], got {}",
            opts.eps
        )));
    }
    let (_, analytic) = evaluate(&f, params, true)?;
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = Rng::new(opts.seed);
    let mut picks = rng.sample_distinct(total, opts.samples.min(total));
    picks.sort_unstable();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut coordinates = Vec::with_capacity(picks.len());
    let mut max_rel_error = 0.0f64;
    for flat in picks {
        let (mut param, mut index) = (0, flat);
        while index >= work[param].numel() {
            index -= work[param].numel();
            param += 1;
        }
        let original = work[param].data()[index];
        work[param].data_mut()[index] = original + opts.eps;
        let (plus, _) = evaluate(&f, &work, false)?;
        work[param].data_mut()[index] = original - opts.eps;
        let (minus, _) = evaluate(&f, &work, false)?;
        work[param].data_mut()[index] = original;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[param][index];
        let rel_error = relative_error(a, numeric);
        max_rel_error = max_rel_error.max(rel_error);
        coordinates.push(CoordinateCheck {
            param,
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        max_rel_error,
        coordinates,
    })
}
