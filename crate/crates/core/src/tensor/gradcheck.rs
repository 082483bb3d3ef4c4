//! Central finite-difference verification of autodiff gradients (always `f64`).

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::TensorError;

/// Step and tolerance for [`gradcheck`].
#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Gradient magnitude below which errors are measured against `floor`
    /// instead of the gradient itself.
    pub floor: f64,
    /// When an element fails at `h`, retry once at `h / 10`. A central
    /// difference that straddles a relu or max kink is wrong by up to half
    /// the slope jump; a correct backward rule agrees at the smaller step.
    pub refine: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InputReport {
    pub input: usize,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements that only passed after refinement.
    pub refined: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    #[serde(skip)]
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    /// One JSON line: `{op, max_rel_err, tol, pass}`.
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("gradcheck '{op}': forward produced a non-finite value ({detail})")]
    NonFinite { op: String, detail: String },
    #[error("gradcheck '{op}': function output has shape {shape:?}, expected a scalar")]
    NotScalar { op: String, shape: Vec<usize> },
    #[error("gradcheck '{op}': {source}")]
    Tensor {
        op: String,
        #[source]
        source: TensorError,
    },
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn run<F>(
    op: &str,
    f: &mut F,
    values: &[Tensor<f64>],
    track: bool,
) -> Result<(Graph<f64>, Vec<Var>, Var), GradcheckError>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = f(&mut g, &vars).map_err(|source| GradcheckError::Tensor {
        op: op.to_string(),
        source,
    })?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(GradcheckError::NotScalar {
            op: op.to_string(),
            shape: v.shape().to_vec(),
        });
    }
    if !v.item().is_finite() {
        return Err(GradcheckError::NonFinite {
            op: op.to_string(),
            detail: format!("output {}", v.item()),
        });
    }
    Ok((g, vars, out))
}

fn central<F>(
    op: &str,
    f: &mut F,
    values: &mut [Tensor<f64>],
    input: usize,
    elem: usize,
    h: f64,
) -> Result<f64, GradcheckError>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let orig = values[input].data()[elem];
    values[input].data_mut()[elem] = orig + h;
    let plus = run(op, f, values, false).map(|(g, _, out)| g.value(out).item());
    values[input].data_mut()[elem] = orig - h;
    let minus = run(op, f, values, false).map(|(g, _, out)| g.value(out).item());
    values[input].data_mut()[elem] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares autodiff gradients of scalar `f(inputs)` with central differences.
///
/// `f` receives a fresh graph and one leaf per input, and must be
/// deterministic. Every element of every input is perturbed.
pub fn gradcheck<F>(
    op: &str,
    mut f: F,
    inputs: &[Tensor<f64>],
    cfg: GradcheckConfig,
) -> Result<GradcheckReport, GradcheckError>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let (mut g, vars, out) = run(op, &mut f, inputs, true)?;
    g.backward(out).map_err(|source| GradcheckError::Tensor {
        op: op.to_string(),
        source,
    })?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut values = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut rep = InputReport {
            input: i,
            numel: grad.numel(),
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            refined: 0,
        };
        for (j, &a) in grad.data().iter().enumerate() {
            let mut n = central(op, &mut f, &mut values, i, j, cfg.h)?;
            let mut err = rel_err(a, n, cfg.floor);
            if err > cfg.tol && cfg.refine {
                let n2 = central(op, &mut f, &mut values, i, j, cfg.h / 10.0)?;
                let err2 = rel_err(a, n2, cfg.floor);
                if err2 < err {
                    if err2 <= cfg.tol {
                        rep.refined += 1;
                    }
                    err = err2;
                    n = n2;
                }
            }
            if j == 0 || err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_element = j;
                rep.analytic = a;
                rep.numeric = n;
            }
        }
        reports.push(rep);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        op: op.to_string(),
        max_rel_err,
        tol: cfg.tol,
        pass: max_rel_err <= cfg.tol,
        inputs: reports,
    })
}
