//! Central finite-difference gradient checking (double precision only).
//!
//! The function under test maps leaf tensors to an output tensor; the
//! harness contracts the output against a fixed random projection so every
//! output element influences the scalar with a distinct weight (a plain sum
//! would hide adjoint permutation bugs in translation-symmetric ops), runs
//! one analytic backward, then compares against the projected central
//! difference `Σⱼ pⱼ · (f(x+h)ⱼ − f(x−h)ⱼ) / (x₊ − x₋)` per input element.
//! Each output element is differenced *before* the weighted sum and the
//! denominator uses the *realized* perturbed values, so untouched output
//! elements contribute exactly zero and an identity op reports an error of
//! exactly 0.0, not merely a small one.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::shape::Shape;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half-step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, tol: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Input index and element index of the worst deviation.
    pub worst: Option<(usize, usize)>,
    pub evals: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Run one gradient check. `f` must produce the same-shaped output for the
/// same input shapes (it is called `2 * total_elements + 1` times).
pub fn gradcheck<F>(
    name: &str,
    inputs: &[(Shape, Vec<f64>)],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<CheckReport>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let nonfinite = |what: &str| Error::numeric(name.to_string(), format!("non-finite {what}"));

    // analytic pass
    let tape = Tape::<f64>::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(shape.clone(), data.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&tape, &leaves)?;

    // fixed random projection, reused by every finite-difference evaluation
    let mut prng = rng::stream(0x6772_6164, "gradcheck-projection", out.numel() as u64);
    let proj: Vec<f64> = (0..out.numel()).map(|_| prng.gen_range(0.25..1.0)).collect();

    let p = tape.leaf(out.shape().clone(), proj.clone(), false)?;
    let loss = out.mul(&p)?.sum();
    if !loss.item()?.is_finite() {
        return Err(nonfinite("forward value"));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    // finite differences over raw output vectors
    let eval = |perturbed: &[Vec<f64>]| -> Result<Vec<f64>> {
        let tape = Tape::<f64>::new();
        let leaves: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(perturbed)
            .map(|((shape, _), data)| tape.leaf(shape.clone(), data.clone(), false))
            .collect::<Result<_>>()?;
        Ok(f(&tape, &leaves)?.value())
    };

    let mut work: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut evals = 1usize;
    for (k, (_, base)) in inputs.iter().enumerate() {
        for e in 0..base.len() {
            let x = base[e];
            let xp = x + cfg.step;
            let xm = x - cfg.step;
            work[k][e] = xp;
            let fp = eval(&work)?;
            work[k][e] = xm;
            let fm = eval(&work)?;
            work[k][e] = x;
            evals += 2;
            if fp.len() != proj.len() || fm.len() != proj.len() {
                return Err(Error::numeric(
                    name.to_string(),
                    "output size changed between evaluations".to_string(),
                ));
            }
            let mut numeric = 0.0f64;
            for j in 0..proj.len() {
                if !fp[j].is_finite() || !fm[j].is_finite() {
                    return Err(nonfinite("finite-difference evaluation"));
                }
                // difference and divide per element first: untouched outputs
                // contribute an exact 0, pass-through outputs an exact pⱼ
                numeric += proj[j] * ((fp[j] - fm[j]) / (xp - xm));
            }
            let a = analytic[k][e];
            if !a.is_finite() {
                return Err(nonfinite("analytic gradient"));
            }
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((k, e));
            }
        }
    }

    Ok(CheckReport { name: name.to_string(), max_rel_err: max_rel, tol: cfg.tol, worst, evals })
}

/// Sample random inputs for `f` until the recorded forward pass keeps every
/// rectifier input at least `margin` away from its kink (see
/// [`Tape::kink_margin`]). Deterministic: candidate seeds are `seed0`,
/// `seed0 + 1`, … and the first safe draw wins. Values are uniform in
/// `(-scale, scale)`.
pub fn find_kink_safe_inputs<F>(
    name: &str,
    shapes: &[Shape],
    scale: f64,
    margin: f64,
    seed0: u64,
    tries: u64,
    f: F,
) -> Result<Vec<(Shape, Vec<f64>)>>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for attempt in 0..tries {
        let candidate: Vec<(Shape, Vec<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut r =
                    rng::stream(seed0 + attempt, &format!("kink-safe:{name}:{k}"), k as u64);
                let data = (0..s.numel()).map(|_| r.gen_range(-scale..scale)).collect();
                (s.clone(), data)
            })
            .collect();
        let tape = Tape::<f64>::new();
        let leaves: Vec<Tensor<f64>> = candidate
            .iter()
            .map(|(shape, data)| tape.leaf(shape.clone(), data.clone(), false))
            .collect::<Result<_>>()?;
        let out = f(&tape, &leaves)?;
        if out.value().iter().all(|v| v.is_finite()) && tape.kink_margin() >= margin {
            return Ok(candidate);
        }
    }
    Err(Error::numeric(
        name.to_string(),
        format!("no kink-safe input found within {tries} seeds (margin {margin})"),
    ))
}

/// Nudge every element of `data` to be at least `margin` away from the
/// nearest kink listed in `kinks` (commonly just 0.0 for relu/abs); used to
/// sample inputs a safe distance from nondifferentiable points.
pub fn nudge_from_kinks(data: &mut [f64], kinks: &[f64], margin: f64) {
    for v in data.iter_mut() {
        for &kk in kinks {
            let d = *v - kk;
            if d.abs() < margin {
                *v = kk + if d < 0.0 { -margin } else { margin };
            }
        }
    }
}
