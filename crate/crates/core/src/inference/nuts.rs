//! Multinomial no-U-turn sampler with a diagonal metric.
//!
//! Trajectories are built by recursive doubling with the generalized U-turn
//! criterion, checked across merged subtrees as well as within them. Warm-up
//! follows the usual windowed scheme: a fast initial buffer for the step
//! size, slow windows of doubling length for the inverse metric, and a final
//! buffer where only the step size adapts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::optimize::minimize_bfgs;
use crate::likelihood::Posterior;
use crate::scalar::{log_add_exp, Scalar};

/// Energy error above which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

/// Number of initialization attempts before giving up.
pub const MAX_INIT_ATTEMPTS: usize = 100;

/// Random starting points drawn per chain; warm-up begins from the best one
/// after a short ascent from each.
pub const INIT_CANDIDATES: usize = 8;

/// BFGS iterations spent climbing the log density from each candidate.
pub const INIT_ASCENT_ITERATIONS: usize = 200;

/// A differentiable log density on `R^dim`.
pub trait LogDensity<T> {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density, which may
    /// be `-inf` outside the support.
    fn log_density_gradient(&self, z: &[T], grad: &mut [T]) -> Result<T>;
}

impl<T: Scalar> LogDensity<T> for Posterior<T> {
    fn dim(&self) -> usize {
        Posterior::dim(self)
    }

    fn log_density_gradient(&self, z: &[T], grad: &mut [T]) -> Result<T> {
        Posterior::log_density_gradient(self, z, grad)
    }
}

/// Sampler settings for one chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutsSettings {
    pub n_iter: usize,
    pub n_warmup: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub max_depth: usize,
}

/// Per-chain sampler statistics, post-warm-up unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ChainStats {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub mean_accept_stat: f64,
    pub n_divergent: usize,
    pub n_divergent_warmup: usize,
    pub n_max_depth: usize,
    pub mean_tree_depth: f64,
    pub n_leapfrog: usize,
    pub n_sampling_iterations: usize,
}

impl ChainStats {
    pub fn divergence_rate(&self) -> f64 {
        if self.n_sampling_iterations == 0 {
            return 0.0;
        }
        self.n_divergent as f64 / self.n_sampling_iterations as f64
    }
}

/// Retained unconstrained draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput<T> {
    pub draws: Vec<Vec<T>>,
    pub stats: ChainStats,
}

#[derive(Debug, Clone)]
struct Point<T> {
    q: Vec<T>,
    p: Vec<T>,
    grad: Vec<T>,
    logp: T,
}

#[derive(Debug, Clone, Copy)]
struct TransitionStats<T> {
    accept_stat: T,
    depth: usize,
    n_leapfrog: usize,
    divergent: bool,
}

struct Nuts<'a, D, T> {
    target: &'a D,
    inv_metric: Vec<T>,
    step_size: T,
    max_depth: usize,
    rng: ChaCha8Rng,
    n_leapfrog: usize,
    sum_metro_prob: T,
    divergent: bool,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn generalized_no_u_turn<T: Scalar>(p_sharp_minus: &[T], p_sharp_plus: &[T], rho: &[T]) -> bool {
    dot(p_sharp_plus, rho) > T::zero() && dot(p_sharp_minus, rho) > T::zero()
}

impl<'a, D: LogDensity<T>, T: Scalar> Nuts<'a, D, T> {
    fn evaluate(&self, q: &[T], grad: &mut [T]) -> T {
        match self.target.log_density_gradient(q, grad) {
            Ok(v) if v.is_nan() => T::neg_infinity(),
            Ok(v) => v,
            Err(_) => T::neg_infinity(),
        }
    }

    fn sample_momentum(&mut self, p: &mut [T]) {
        for (pi, &m) in p.iter_mut().zip(&self.inv_metric) {
            let e: f64 = self.rng.sample(StandardNormal);
            *pi = T::lit(e) / m.sqrt();
        }
    }

    fn hamiltonian(&self, z: &Point<T>) -> T {
        let kinetic: T = z.p.iter().zip(&self.inv_metric).map(|(p, m)| *p * *p * *m).sum();
        let h = -z.logp + T::lit(0.5) * kinetic;
        if h.is_nan() {
            T::infinity()
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[T], out: &mut [T]) {
        for ((o, &pi), &m) in out.iter_mut().zip(p).zip(&self.inv_metric) {
            *o = pi * m;
        }
    }

    fn leapfrog(&self, z: &mut Point<T>, eps: T) {
        let half = eps * T::lit(0.5);
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * *g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * *m * *p;
        }
        let mut grad = std::mem::take(&mut z.grad);
        z.logp = self.evaluate(&z.q, &mut grad);
        z.grad = grad;
        if z.logp.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += half * *g;
            }
        }
    }

    /// Re-selects the step size so that one leapfrog step from `z` has an
    /// acceptance probability near 0.8.
    fn init_step_size(&mut self, z: &Point<T>) {
        let threshold = T::lit(0.8f64.ln());
        let mut probe = z.clone();
        let mut trial = |nuts: &mut Self| {
            probe.clone_from(z);
            nuts.sample_momentum(&mut probe.p);
            let h0 = nuts.hamiltonian(&probe);
            nuts.leapfrog(&mut probe, nuts.step_size);
            h0 - nuts.hamiltonian(&probe)
        };
        let delta_h = trial(self);
        let increase = delta_h > threshold;
        loop {
            let delta_h = trial(self);
            if increase && !(delta_h > threshold) {
                break;
            }
            if !increase && !(delta_h < threshold) {
                break;
            }
            self.step_size = if increase {
                self.step_size * T::lit(2.0)
            } else {
                self.step_size * T::lit(0.5)
            };
            if self.step_size > T::lit(1e7) || self.step_size < T::lit(1e-12) {
                break;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point<T>,
        z_propose: &mut Point<T>,
        p_sharp_beg: &mut [T],
        p_sharp_end: &mut [T],
        rho: &mut [T],
        p_beg: &mut [T],
        p_end: &mut [T],
        h0: T,
        sign: T,
        log_sum_weight: &mut T,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step_size);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > T::lit(MAX_DELTA_H) {
                self.divergent = true;
            }
            *log_sum_weight = log_add_exp(*log_sum_weight, h0 - h);
            self.sum_metro_prob += if h0 - h > T::zero() { T::one() } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            self.p_sharp(&z.p, p_sharp_beg);
            p_sharp_end.copy_from_slice(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += *p;
            }
            p_beg.copy_from_slice(&z.p);
            p_end.copy_from_slice(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let zero = || vec![T::zero(); dim];

        let mut log_sum_weight_init = T::neg_infinity();
        let mut p_init_end = zero();
        let mut p_sharp_init_end = zero();
        let mut rho_init = zero();
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut log_sum_weight_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut log_sum_weight_final = T::neg_infinity();
        let mut p_final_beg = zero();
        let mut p_sharp_final_beg = zero();
        let mut rho_final = zero();
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut log_sum_weight_final,
        ) {
            return false;
        }

        let log_sum_weight_subtree = log_add_exp(log_sum_weight_init, log_sum_weight_final);
        *log_sum_weight = log_add_exp(*log_sum_weight, log_sum_weight_subtree);
        if log_sum_weight_final > log_sum_weight_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (log_sum_weight_final - log_sum_weight_subtree).exp();
            if T::lit(self.rng.gen::<f64>()) < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree: Vec<T> = rho_init.iter().zip(&rho_final).map(|(a, b)| *a + *b).collect();
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += *s;
        }
        let mut persist = generalized_no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_extended: Vec<T> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| *a + *b).collect();
        persist &= generalized_no_u_turn(p_sharp_beg, &p_sharp_final_beg, &rho_extended);
        let rho_extended: Vec<T> = rho_final.iter().zip(&p_init_end).map(|(a, b)| *a + *b).collect();
        persist &= generalized_no_u_turn(&p_sharp_init_end, p_sharp_end, &rho_extended);
        persist
    }

    fn transition(&mut self, z: &mut Point<T>) -> TransitionStats<T> {
        self.sample_momentum(&mut z.p);
        self.n_leapfrog = 0;
        self.sum_metro_prob = T::zero();
        self.divergent = false;
        let h0 = self.hamiltonian(z);
        let dim = z.q.len();

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let mut p_sharp = vec![T::zero(); dim];
        self.p_sharp(&z.p, &mut p_sharp);
        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = p_sharp.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp;

        let mut rho = z.p.clone();
        let mut log_sum_weight = T::zero();
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![T::zero(); dim];
            let mut rho_bck = vec![T::zero(); dim];
            let mut log_sum_weight_subtree = T::neg_infinity();
            let valid = if self.rng.gen::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.copy_from_slice(&p_fwd_bck);
                p_sharp_bck_fwd.copy_from_slice(&p_sharp_fwd_bck);
                let mut cur = z_fwd.clone();
                let ok = self.build_tree(
                    depth,
                    &mut cur,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    T::one(),
                    &mut log_sum_weight_subtree,
                );
                z_fwd = cur;
                ok
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.copy_from_slice(&p_bck_fwd);
                p_sharp_fwd_bck.copy_from_slice(&p_sharp_bck_fwd);
                let mut cur = z_bck.clone();
                let ok = self.build_tree(
                    depth,
                    &mut cur,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -T::one(),
                    &mut log_sum_weight_subtree,
                );
                z_bck = cur;
                ok
            };
            if !valid {
                break;
            }
            depth += 1;

            if log_sum_weight_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (log_sum_weight_subtree - log_sum_weight).exp();
                if T::lit(self.rng.gen::<f64>()) < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_add_exp(log_sum_weight, log_sum_weight_subtree);

            for ((r, b), f) in rho.iter_mut().zip(&rho_bck).zip(&rho_fwd) {
                *r = *b + *f;
            }
            let mut persist = generalized_no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_extended: Vec<T> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| *a + *b).collect();
            persist &= generalized_no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_extended);
            let rho_extended: Vec<T> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| *a + *b).collect();
            persist &= generalized_no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_extended);
            if !persist {
                break;
            }
        }

        *z = z_sample;
        TransitionStats {
            accept_stat: if self.n_leapfrog > 0 {
                self.sum_metro_prob / T::lit(self.n_leapfrog as f64)
            } else {
                T::zero()
            },
            depth,
            n_leapfrog: self.n_leapfrog,
            divergent: self.divergent,
        }
    }
}

/// Dual-averaging step-size adaptation.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    target: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(target: f64, step_size: f64) -> Self {
        Self {
            mu: (10.0 * step_size).ln(),
            target,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Slow-window schedule for metric adaptation.
#[derive(Debug, Clone)]
struct MetricWindows {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MetricWindows {
    fn new(n_warmup: usize, dim: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut window_size) = (75, 50, 25);
        let enabled = n_warmup >= 20;
        if enabled && init_buffer + term_buffer + window_size > n_warmup {
            init_buffer = (0.15 * n_warmup as f64) as usize;
            term_buffer = (0.1 * n_warmup as f64) as usize;
            window_size = n_warmup - (init_buffer + term_buffer);
        }
        Self {
            n_warmup,
            init_buffer,
            term_buffer,
            window_size,
            next_window: (init_buffer + window_size).saturating_sub(1),
            counter: 0,
            enabled,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer && self.counter < self.n_warmup - self.term_buffer && self.counter != self.n_warmup
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window && self.counter != self.n_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.n_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.n_warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Adds `q` to the current window; returns the regularized variance when
    /// a window closes.
    fn learn(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        if !self.enabled {
            return None;
        }
        if self.in_window() {
            self.n += 1;
            for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
                let d = x - *m;
                *m += d / self.n as f64;
                *s += d * (x - *m);
            }
        }
        if self.end_of_window() {
            let n = self.n as f64;
            let var = self
                .m2
                .iter()
                .map(|s| {
                    let v = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                    (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))
                })
                .collect();
            self.n = 0;
            self.mean.iter_mut().for_each(|v| *v = 0.0);
            self.m2.iter_mut().for_each(|v| *v = 0.0);
            self.compute_next_window();
            self.counter += 1;
            return Some(var);
        }
        self.counter += 1;
        None
    }
}

fn evaluate<D: LogDensity<T>, T: Scalar>(target: &D, q: Vec<T>) -> Option<Point<T>> {
    let mut grad = vec![T::zero(); q.len()];
    match target.log_density_gradient(&q, &mut grad) {
        Ok(logp) if logp.is_finite() && grad.iter().all(|g| g.is_finite()) => Some(Point {
            p: vec![T::zero(); q.len()],
            q,
            grad,
            logp,
        }),
        _ => None,
    }
}

fn random_point<D: LogDensity<T>, T: Scalar>(target: &D, rng: &mut ChaCha8Rng) -> Result<Point<T>> {
    let dim = target.dim();
    for _ in 0..MAX_INIT_ATTEMPTS {
        let q: Vec<T> = (0..dim)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                T::lit(2.0 * e)
            })
            .collect();
        if let Some(z) = evaluate(target, q) {
            return Ok(z);
        }
    }
    Err(Error::Initialization {
        attempts: MAX_INIT_ATTEMPTS,
    })
}

/// Climbs the log density from `start`, returning `start` if the ascent
/// does not end at a better finite point.
fn ascend<D: LogDensity<T>, T: Scalar>(target: &D, start: Point<T>) -> Result<Point<T>> {
    let neg = |q: &[T], grad: &mut [T]| -> Result<T> {
        match target.log_density_gradient(q, grad) {
            Ok(logp) if logp.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                grad.iter_mut().for_each(|g| *g = -*g);
                Ok(-logp)
            }
            _ => Ok(T::infinity()),
        }
    };
    let out = minimize_bfgs(neg, start.q.clone(), INIT_ASCENT_ITERATIONS, 1e-3)?;
    Ok(match evaluate(target, out.w) {
        Some(p) if p.logp > start.logp => p,
        _ => start,
    })
}

fn initial_point<D: LogDensity<T>, T: Scalar>(target: &D, rng: &mut ChaCha8Rng) -> Result<Point<T>> {
    let mut best: Option<Point<T>> = None;
    for _ in 0..INIT_CANDIDATES {
        let z = ascend(target, random_point(target, rng)?)?;
        if best.as_ref().is_none_or(|b| z.logp > b.logp) {
            best = Some(z);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Runs one chain: warm-up with adaptation followed by sampling. Draws
/// `n_warmup, n_warmup + thin, ...` are retained.
pub fn sample_chain<D: LogDensity<T>, T: Scalar>(
    target: &D,
    settings: &NutsSettings,
    seed: u64,
    chain: u64,
) -> Result<ChainOutput<T>> {
    if settings.n_warmup >= settings.n_iter {
        return Err(Error::Argument("n_warmup must be less than n_iter".into()));
    }
    if settings.thin == 0 {
        return Err(Error::Argument("thin must be at least 1".into()));
    }
    if !(settings.target_accept > 0.0 && settings.target_accept < 1.0) {
        return Err(Error::Argument("target_accept must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    let mut z = initial_point(target, &mut rng)?;
    let dim = target.dim();
    let mut nuts = Nuts {
        target,
        inv_metric: vec![T::one(); dim],
        step_size: T::one(),
        max_depth: settings.max_depth.max(1),
        rng,
        n_leapfrog: 0,
        sum_metro_prob: T::zero(),
        divergent: false,
    };
    nuts.init_step_size(&z);
    let mut dual = DualAveraging::new(settings.target_accept, nuts.step_size.as_f64());
    let mut windows = MetricWindows::new(settings.n_warmup, dim);

    let mut stats = ChainStats::default();
    let mut draws = Vec::new();
    let mut accept_sum = 0.0;
    let mut depth_sum = 0.0;
    let mut q64 = vec![0.0; dim];
    for it in 0..settings.n_iter {
        let t = nuts.transition(&mut z);
        if it < settings.n_warmup {
            stats.n_divergent_warmup += t.divergent as usize;
            nuts.step_size = T::lit(dual.learn(t.accept_stat.as_f64()));
            for (d, q) in q64.iter_mut().zip(&z.q) {
                *d = q.as_f64();
            }
            if let Some(var) = windows.learn(&q64) {
                nuts.inv_metric = var.into_iter().map(T::lit).collect();
                nuts.init_step_size(&z);
                dual.restart(nuts.step_size.as_f64());
            }
            if it + 1 == settings.n_warmup {
                nuts.step_size = T::lit(dual.final_step_size());
            }
            continue;
        }
        stats.n_sampling_iterations += 1;
        stats.n_divergent += t.divergent as usize;
        stats.n_max_depth += (t.depth >= nuts.max_depth) as usize;
        stats.n_leapfrog += t.n_leapfrog;
        accept_sum += t.accept_stat.as_f64();
        depth_sum += t.depth as f64;
        if (it - settings.n_warmup).is_multiple_of(settings.thin) {
            draws.push(z.q.clone());
        }
    }
    let n = stats.n_sampling_iterations as f64;
    stats.mean_accept_stat = accept_sum / n;
    stats.mean_tree_depth = depth_sum / n;
    stats.step_size = nuts.step_size.as_f64();
    stats.inv_metric = nuts.inv_metric.iter().map(|v| v.as_f64()).collect();
    Ok(ChainOutput { draws, stats })
}
