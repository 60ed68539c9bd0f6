//! Central finite-difference verification of analytic gradients.

use super::{Graph, OpKind, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / (|analytic| + |numeric| + 1e-12)
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose stencil came too close to an `abs` kink and were
    /// re-differenced with a smaller step.
    pub refined: Vec<usize>,
    /// Coordinates still too close to a kink at the smallest step; excluded
    /// from the error.
    pub nonsmooth: Vec<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Gradient checker configuration.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub fd_step: f64,
    /// Backward rule to negate in the analytic pass (negative control).
    pub negate: Option<OpKind>,
    /// How many times the step may be divided by 10 when a stencil comes
    /// close to a zero of an `abs` input; 0 disables kink handling.
    pub kink_refinements: u32,
    /// A stencil is too wide if some `abs` input moves by more than this
    /// fraction of its own magnitude.
    pub kink_margin: f64,
}

impl GradCheck {
    pub fn new(fd_step: f64) -> Self {
        GradCheck {
            fd_step,
            negate: None,
            kink_refinements: 3,
            kink_margin: 0.01,
        }
    }

    pub fn with_negated_backward(mut self, kind: OpKind) -> Self {
        self.negate = Some(kind);
        self
    }

    /// Compares the tape gradient of `f` at `point` with central differences.
    ///
    /// `f` receives a fresh graph and the point as a variable leaf of `shape`
    /// and must return a scalar root.
    pub fn run<F>(&self, f: F, point: &[f64], shape: &[usize]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let mut reports = self.run_many(|g, x| Ok(vec![f(g, x)?]), point, shape)?;
        Ok(reports.remove(0))
    }

    /// [`run`](Self::run) for several scalar roots built by one function; each
    /// finite-difference evaluation is shared by all roots.
    pub fn run_many<F>(&self, f: F, point: &[f64], shape: &[usize]) -> Result<Vec<GradCheckReport>>
    where
        F: Fn(&mut Graph, Var) -> Result<Vec<Var>>,
    {
        if !(self.fd_step > 0.0) {
            return Err(Error::Config(format!(
                "fd_step must be > 0, got {}",
                self.fd_step
            )));
        }
        let mut g = match self.negate {
            Some(kind) => Graph::with_negated_backward(kind),
            None => Graph::new(),
        };
        let x = g.variable(point.to_vec(), shape)?;
        let roots = f(&mut g, x)?;
        let mut analytic = Vec::with_capacity(roots.len());
        for &root in &roots {
            if !g.scalar(root).is_finite() {
                return Err(Error::NonFinite {
                    context: "grad_check base value".into(),
                    coordinate: 0,
                });
            }
            g.zero_grad();
            g.backward(root)?;
            let grad = g.grad(x).to_vec();
            if let Some(c) = grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "analytic gradient".into(),
                    coordinate: c,
                });
            }
            analytic.push(grad);
        }

        let eval = |p: Vec<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut g = Graph::new();
            let x = g.variable(p, shape)?;
            let roots = f(&mut g, x)?;
            Ok((roots.iter().map(|&r| g.scalar(r)).collect(), g.abs_inputs()))
        };
        let base_inputs = g.abs_inputs();
        let far_from_kinks = |moved: &[f64]| {
            base_inputs
                .iter()
                .zip(moved)
                .all(|(&b, &m)| (m - b).abs() <= self.kink_margin * b.abs())
        };

        let mut numeric = vec![Vec::with_capacity(point.len()); roots.len()];
        let mut refined = Vec::new();
        let mut nonsmooth = Vec::new();
        let mut work = point.to_vec();
        for c in 0..point.len() {
            let orig = work[c];
            let mut step = self.fd_step;
            let mut attempt = 0;
            loop {
                work[c] = orig + step;
                let (up, sig_up) = eval(work.clone())?;
                work[c] = orig - step;
                let (down, sig_down) = eval(work.clone())?;
                work[c] = orig;
                if up.iter().chain(&down).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "finite-difference evaluation".into(),
                        coordinate: c,
                    });
                }
                let smooth = far_from_kinks(&sig_up) && far_from_kinks(&sig_down);
                if smooth || attempt >= self.kink_refinements {
                    if !smooth && self.kink_refinements > 0 {
                        nonsmooth.push(c);
                    } else if attempt > 0 {
                        refined.push(c);
                    }
                    for (r, (u, d)) in up.iter().zip(&down).enumerate() {
                        numeric[r].push((u - d) / (2.0 * step));
                    }
                    break;
                }
                attempt += 1;
                step /= 10.0;
            }
        }

        Ok(analytic
            .into_iter()
            .zip(numeric)
            .map(|(analytic, numeric)| {
                let (worst_coordinate, max_rel_error) = analytic
                    .iter()
                    .zip(&numeric)
                    .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
                    .enumerate()
                    .filter(|(i, _)| !nonsmooth.contains(i))
                    .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
                GradCheckReport {
                    max_rel_error,
                    worst_coordinate,
                    analytic,
                    numeric,
                    refined: refined.clone(),
                    nonsmooth: nonsmooth.clone(),
                }
            })
            .collect())
    }
}

/// Maximum relative error between tape and central-difference gradients.
pub fn grad_check<F>(f: F, point: &[f64], shape: &[usize], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(GradCheck::new(fd_step).run(f, point, shape)?.max_rel_error)
}
