//! Central-difference gradient checking.
//!
//! The numerical side only ever calls tape *forward* evaluation, so it is an
//! independent oracle for the analytic backward pass. Checks run in `f64`,
//! where central differences resolve gradients to ~1e-8 relative error.

use crate::tape::{Tape, Var};
use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct GradCheckCfg {
    /// Step is `eps * (1 + |theta|)` per coordinate.
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Deterministic subsample size for large tensors.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            eps: 1e-4,
            rtol: 1e-6,
            atol: 1e-9,
            max_coords_per_tensor: 64,
            seed: 0x5eed,
        }
    }
}

/// Outcome of one check: worst relative error over all compared coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` must construct the loss from scratch on every call; `params` are
/// injected as trainable leaves in the given order.
pub fn check_builder<F>(
    params: &[(&str, ArrayD<f64>)],
    build: F,
    cfg: &GradCheckCfg,
) -> Result<GradCheckReport, String>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[ArrayD<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|v| t.param(v.clone())).collect();
        let loss = build(&mut t, &vars);
        (t, vars, loss)
    };

    let base: Vec<ArrayD<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let (mut t0, vars, loss) = eval(&base);
    t0.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|&v| {
            t0.grad(v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(t0.value(v).raw_dim()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for (pi, (name, value)) in params.iter().enumerate() {
        let len = value.len();
        let coords: Vec<usize> = if len <= cfg.max_coords_per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, cfg.max_coords_per_tensor).into_vec()
        };
        for ci in coords {
            let theta = base[pi].as_slice().unwrap()[ci];
            let h = cfg.eps * (1.0 + theta.abs());

            let mut plus = base.clone();
            plus[pi].as_slice_mut().unwrap()[ci] = theta + h;
            let (tp, _, lp) = eval(&plus);
            let lp = tp.scalar_value(lp);

            let mut minus = base.clone();
            minus[pi].as_slice_mut().unwrap()[ci] = theta - h;
            let (tm, _, lm) = eval(&minus);
            let lm = tm.scalar_value(lm);

            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[pi].as_slice().unwrap()[ci];
            let diff = (a - numeric).abs();
            let tol = cfg.atol + cfg.rtol * a.abs().max(numeric.abs());
            if diff > tol {
                return Err(format!(
                    "gradient mismatch at {name}[{ci}]: analytic {a:.9e} vs numeric {numeric:.9e} (diff {diff:.3e} > tol {tol:.3e})"
                ));
            }
            let rel = diff / a.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}
