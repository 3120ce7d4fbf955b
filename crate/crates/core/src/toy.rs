//! Low-dimensional oracle tasks for validating the samplers and the
//! training loop end to end: a Gaussian-mixture ring with an analytically
//! exact noise predictor, a small trainable point denoiser, and an
//! exact-assignment 2-Wasserstein distance.

use crate::error::Result;
use crate::nn::{randn, timestep_features, Bound, Linear, ParamSet};
use crate::schedules::{ddpm_step, q_sample, NoiseSchedule, TimestepPlan};
use crate::tape::{Scalar, Tape, Var};
use crate::training::{AdamW, EmaSet, MetricRow, TrainConfig, TrainState};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Isotropic Gaussian mixture in the plane.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub means: Vec<[f64; 2]>,
    pub component_std: f64,
}

impl GaussianMixture {
    /// `n_modes` equally weighted components on a circle.
    pub fn ring(n_modes: usize, radius: f64, component_std: f64) -> Self {
        let means = (0..n_modes)
            .map(|i| {
                let ang = 2.0 * std::f64::consts::PI * i as f64 / n_modes as f64;
                [radius * ang.cos(), radius * ang.sin()]
            })
            .collect();
        GaussianMixture {
            means,
            component_std,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let k = rng.random_range(0..self.means.len());
        let m = self.means[k];
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [
            m[0] + self.component_std * z0,
            m[1] + self.component_std * z1,
        ]
    }

    pub fn sample_n(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Exact conditional expectation of the added noise given the noisy
    /// point: the optimal epsilon-predictor the denoiser is trained toward.
    pub fn exact_eps(&self, x: [f64; 2], t: usize, schedule: &NoiseSchedule) -> [f64; 2] {
        let ac = schedule.alpha_cumprod(t);
        let s2 = self.component_std * self.component_std;
        // Marginal variance of x_t per component.
        let var_t = ac * s2 + (1.0 - ac);
        // Responsibilities over components (log-sum-exp stabilized).
        let mut logw = Vec::with_capacity(self.means.len());
        for m in &self.means {
            let dx = x[0] - ac.sqrt() * m[0];
            let dy = x[1] - ac.sqrt() * m[1];
            logw.push(-(dx * dx + dy * dy) / (2.0 * var_t));
        }
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut wsum = 0.0;
        let mut post = [0.0f64; 2];
        for (m, lw) in self.means.iter().zip(&logw) {
            let w = (lw - mx).exp();
            wsum += w;
            // Per-component posterior mean of the clean point.
            let denom = (1.0 - ac) + ac * s2;
            let px = (m[0] * (1.0 - ac) + ac.sqrt() * s2 * x[0]) / denom;
            let py = (m[1] * (1.0 - ac) + ac.sqrt() * s2 * x[1]) / denom;
            post[0] += w * px;
            post[1] += w * py;
        }
        post[0] /= wsum;
        post[1] /= wsum;
        let c = (1.0 - ac).sqrt();
        [
            (x[0] - ac.sqrt() * post[0]) / c,
            (x[1] - ac.sqrt() * post[1]) / c,
        ]
    }

    pub fn nearest_mode(&self, p: [f64; 2]) -> (usize, f64) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, m) in self.means.iter().enumerate() {
            let d = (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, best_d.sqrt())
    }
}

/// Ancestral sampling chains driven by the exact noise predictor.
pub fn ddpm_sample_exact(
    mix: &GaussianMixture,
    schedule: &NoiseSchedule,
    plan: &TimestepPlan,
    n_chains: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[n_chains, 2]));
    for v in x.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    for (t, t_prev) in plan.transitions() {
        let mut eps = ArrayD::<f64>::zeros(x.raw_dim());
        for i in 0..n_chains {
            let e = mix.exact_eps([x[[i, 0]], x[[i, 1]]], t, schedule);
            eps[[i, 0]] = e[0];
            eps[[i, 1]] = e[1];
        }
        x = ddpm_step(&x, &eps, t, t_prev, schedule, &mut rng, false)?;
    }
    Ok((0..n_chains).map(|i| [x[[i, 0]], x[[i, 1]]]).collect())
}

const RING_TFEAT: usize = 16;

/// Small MLP noise predictor over 2-d points.
#[derive(Debug, Clone)]
pub struct RingDenoiser {
    pub hidden: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl RingDenoiser {
    pub fn new(hidden: usize) -> Self {
        RingDenoiser {
            hidden,
            l1: Linear::new("ring.l1", 2 + RING_TFEAT, hidden),
            l2: Linear::new("ring.l2", hidden, hidden),
            l3: Linear::new("ring.l3", hidden, 2),
        }
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        self.l1.init(&mut ps, rng, 1.0);
        self.l2.init(&mut ps, rng, 1.0);
        self.l3.init(&mut ps, rng, 0.1);
        ps
    }

    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var, ts: &[usize]) -> Var {
        let tf = t.constant(timestep_features::<T>(ts, RING_TFEAT));
        let h = t.concat(x, tf, 1);
        let h = self.l1.fwd(t, b, h);
        let h = t.silu(h);
        let h = self.l2.fwd(t, b, h);
        let h = t.silu(h);
        self.l3.fwd(t, b, h)
    }

    /// Eval-mode prediction for `[N, 2]` points.
    pub fn predict(&self, ps: &ParamSet, x: &ArrayD<f32>, ts: &[usize]) -> ArrayD<f32> {
        let mut t = Tape::<f32>::new();
        let b = ps.bind(&mut t, |_| false);
        let xv = t.constant(x.clone());
        let out = self.fwd(&mut t, &b, xv, ts);
        t.value(out).clone()
    }

    /// Simple-loss training on mixture draws.
    pub fn train(
        &self,
        state: &mut TrainState,
        mix: &GaussianMixture,
        schedule: &NoiseSchedule,
        cfg: &TrainConfig,
    ) -> Result<Vec<MetricRow>> {
        cfg.validate()?;
        let mut rows = Vec::with_capacity(cfg.max_steps);
        for _ in 0..cfg.max_steps {
            let n = cfg.batch_size;
            let mut x0 = ArrayD::<f32>::zeros(IxDyn(&[n, 2]));
            for i in 0..n {
                let p = mix.sample(&mut state.rng);
                x0[[i, 0]] = p[0] as f32;
                x0[[i, 1]] = p[1] as f32;
            }
            let ts: Vec<usize> = (0..n)
                .map(|_| state.rng.random_range(0..schedule.len()))
                .collect();
            let eps = randn(&[n, 2], 1.0, &mut state.rng);
            let mut x_t = ArrayD::<f32>::zeros(IxDyn(&[n, 2]));
            for i in 0..n {
                let xi = x0.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
                let ei = eps.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
                let noised = q_sample(&xi, ts[i], &ei, schedule)?;
                x_t.index_axis_mut(ndarray::Axis(0), i).assign(&noised);
            }

            let mut tape = Tape::<f32>::new();
            let bound = state.params.bind(&mut tape, |_| true);
            let xv = tape.constant(x_t);
            let pred = self.fwd(&mut tape, &bound, xv, &ts);
            let loss = crate::training::mse_to_const(&mut tape, pred, eps);
            tape.backward(loss);
            let grads: Vec<Option<ArrayD<f32>>> =
                bound.vars().iter().map(|&v| tape.take_grad(v)).collect();
            let loss_v = tape.scalar_value(loss) as f64;
            drop(tape);
            state.opt.step(&mut state.params, &grads);
            state.ema.update(&state.params, cfg.ema_rate, None);
            state.step += 1;
            rows.push(MetricRow {
                step: state.step,
                loss_simple: loss_v,
                loss_perc: 0.0,
                loss_adv_gen: 0.0,
                loss_adv_disc: 0.0,
                learning_rate: cfg.learning_rate,
            });
        }
        Ok(rows)
    }

    /// DDPM sampling with the trained predictor.
    pub fn sample(
        &self,
        ps: &ParamSet,
        schedule: &NoiseSchedule,
        plan: &TimestepPlan,
        n: usize,
        seed: u64,
    ) -> Result<Vec<[f64; 2]>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = randn(&[n, 2], 1.0, &mut rng);
        for (t, t_prev) in plan.transitions() {
            let ts = vec![t; n];
            let eps = self.predict(ps, &x, &ts);
            x = ddpm_step(&x, &eps, t, t_prev, schedule, &mut rng, false)?;
        }
        Ok((0..n).map(|i| [x[[i, 0]] as f64, x[[i, 1]] as f64]).collect())
    }
}

/// Fresh training state for the ring denoiser.
pub fn ring_state(model: &RingDenoiser, cfg: &TrainConfig) -> TrainState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x52494e47);
    let params = model.init_params(&mut rng);
    let opt = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);
    let ema = EmaSet::from_params(&params);
    TrainState {
        params,
        ema,
        opt,
        step: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        dropped: 0,
        seen: 0,
    }
}

// ---------------------------------------------------------------------------
// Exact-assignment 2-Wasserstein distance
// ---------------------------------------------------------------------------

/// 2-Wasserstein distance between equal-sized point sets via an optimal
/// assignment (auction algorithm with epsilon scaling on integerized costs).
pub fn wasserstein2(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    assert_eq!(a.len(), b.len(), "point sets must have equal size");
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    // Integerized benefits: maximize -cost.
    const SCALE: f64 = 1e6;
    let mut benefit = vec![0i64; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2 = (a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2);
            benefit[i * n + j] = -((d2 * SCALE).round() as i64);
        }
    }
    let assignment = auction_assignment(&benefit, n);
    let mut total = 0.0f64;
    for (i, &j) in assignment.iter().enumerate() {
        total += (a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2);
    }
    (total / n as f64).sqrt()
}

/// Forward auction with epsilon scaling; optimal for integer benefits once
/// epsilon drops below 1/(n+1).
fn auction_assignment(benefit: &[i64], n: usize) -> Vec<usize> {
    let bmax = benefit.iter().map(|&v| v.abs()).max().unwrap_or(0) as f64;
    let mut prices = vec![0.0f64; n];
    let mut owner: Vec<Option<usize>> = vec![None; n]; // object -> person
    let mut assigned: Vec<Option<usize>> = vec![None; n]; // person -> object
    let mut eps = (bmax / 4.0).max(1.0);
    let eps_final = 1.0 / (n as f64 + 1.0);
    loop {
        for o in owner.iter_mut() {
            *o = None;
        }
        for p in assigned.iter_mut() {
            *p = None;
        }
        let mut queue: Vec<usize> = (0..n).collect();
        while let Some(i) = queue.pop() {
            // Best and second-best net value for person i.
            let row = &benefit[i * n..(i + 1) * n];
            let mut best_j = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            let mut second_v = f64::NEG_INFINITY;
            for (j, &bij) in row.iter().enumerate() {
                let v = bij as f64 - prices[j];
                if v > best_v {
                    second_v = best_v;
                    best_v = v;
                    best_j = j;
                } else if v > second_v {
                    second_v = v;
                }
            }
            let bump = if second_v.is_finite() {
                best_v - second_v + eps
            } else {
                eps
            };
            prices[best_j] += bump;
            if let Some(prev) = owner[best_j].replace(i) {
                assigned[prev] = None;
                queue.push(prev);
            }
            assigned[i] = Some(best_j);
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 4.0).max(eps_final);
    }
    assigned.into_iter().map(|o| o.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{make_linear_schedule, respace};
    use crate::training::Stage;

    #[test]
    fn exact_eps_inverts_to_the_posterior_mean() {
        // Single-component mixture: the exact predictor must recover the
        // closed-form Gaussian posterior, and denoising a noised mean point
        // must come back near the mean.
        let mix = GaussianMixture {
            means: vec![[1.0, -2.0]],
            component_std: 0.1,
        };
        let s = make_linear_schedule(50, 1e-3, 0.05).unwrap();
        let t = 30;
        let ac = s.alpha_cumprod(t);
        let x = [ac.sqrt() * 1.0, ac.sqrt() * -2.0];
        let e = mix.exact_eps(x, t, &s);
        // At the scaled mean, the posterior mean equals the component mean,
        // so the predicted noise must vanish to first order.
        assert!(e[0].abs() < 1e-9 && e[1].abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn exact_score_chain_recovers_two_points() {
        // 1-D-style two-point data embedded in the plane.
        let mix = GaussianMixture {
            means: vec![[-1.0, 0.0], [1.0, 0.0]],
            component_std: 0.05,
        };
        let s = make_linear_schedule(100, 1e-3, 0.05).unwrap();
        let plan = respace(&s, 100).unwrap();
        let pts = ddpm_sample_exact(&mix, &s, &plan, 10_000, 7).unwrap();
        let mut left = 0usize;
        let mut near = 0usize;
        for p in &pts {
            let (k, d) = mix.nearest_mode(*p);
            if d < 0.3 {
                near += 1;
                if k == 0 {
                    left += 1;
                }
            }
        }
        let near_frac = near as f64 / pts.len() as f64;
        assert!(near_frac > 0.99, "only {near_frac} of samples near modes");
        let frac = left as f64 / near as f64;
        // 3-sigma binomial band around 1/2.
        let tol = 3.0 * (0.25f64 / near as f64).sqrt();
        assert!((frac - 0.5).abs() < tol, "left fraction {frac}");
    }

    #[test]
    fn wasserstein_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mix = GaussianMixture::ring(8, 1.0, 0.05);
        let a = mix.sample_n(200, &mut rng);
        assert!(wasserstein2(&a, &a) < 1e-9);
        // Shifting every point by delta moves W2 by exactly delta.
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 0.3, p[1]]).collect();
        let d = wasserstein2(&a, &b);
        assert!((d - 0.3).abs() < 1e-6, "shift distance {d}");
    }

    #[test]
    fn wasserstein_beats_greedy_on_crossing_pairs() {
        // Two pairs where greedy matching is suboptimal.
        let a = vec![[0.0, 0.0], [1.0, 0.0]];
        let b = vec![[1.1, 0.0], [-0.1, 0.0]];
        let d = wasserstein2(&a, &b);
        // Optimal assignment: 0 -> (-0.1), 1 -> 1.1: each distance 0.1.
        assert!((d - 0.1).abs() < 1e-6, "{d}");
    }

    #[test]
    fn ring_denoiser_learns_better_than_zero_predictor() {
        let mix = GaussianMixture::ring(8, 1.0, 0.1);
        let s = make_linear_schedule(50, 1e-3, 0.08).unwrap();
        let model = RingDenoiser::new(48);
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 128,
            max_steps: 400,
            ema_rate: 0.99,
            seed: 3,
            weight_decay: 0.0,
            ..TrainConfig::default_for(Stage::Pretrain)
        };
        let mut state = ring_state(&model, &cfg);
        let rows = model.train(&mut state, &mix, &s, &cfg).unwrap();
        assert!(rows[0].loss_simple > 0.5, "fresh loss {}", rows[0].loss_simple);

        // Held-out pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 512;
        let mut x0 = ArrayD::<f32>::zeros(IxDyn(&[n, 2]));
        for i in 0..n {
            let p = mix.sample(&mut rng);
            x0[[i, 0]] = p[0] as f32;
            x0[[i, 1]] = p[1] as f32;
        }
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..s.len())).collect();
        let eps = randn(&[n, 2], 1.0, &mut rng);
        let mut x_t = ArrayD::<f32>::zeros(IxDyn(&[n, 2]));
        for i in 0..n {
            let xi = x0.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
            let ei = eps.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
            x_t.index_axis_mut(ndarray::Axis(0), i)
                .assign(&q_sample(&xi, ts[i], &ei, &s).unwrap());
        }
        let ema_ps = state.ema_params();
        let pred = model.predict(&ema_ps, &x_t, &ts);
        let mse: f64 = pred
            .iter()
            .zip(eps.iter())
            .map(|(&p, &e)| ((p - e) as f64).powi(2))
            .sum::<f64>()
            / (2 * n) as f64;
        assert!(mse < 1.0, "held-out mse {mse} should beat the zero predictor");
        assert!(mse < rows[0].loss_simple, "training must reduce the loss");
    }
}
