//! Limit laws of the normalized score sums: the infinitely divisible laws of
//! the fixed and intermediate regimes, the Gaussian regime, and the
//! combination that gives the QTE limit.
//!
//! Both non-Gaussian laws are fully compensated,
//! `E exp(i<a, Z>) = exp{ i<a, m> + int (e^{i<a,x>} - 1 - i<a,x>) nu(dx) }`.
//! Samplers split `nu` into a compound-Poisson part of large jumps and a
//! Gaussian stand-in for the compensated small jumps.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma as gamma_fn;

use crate::error::{Error, Result};
use crate::numerics::{integrate, pairwise_sum, stream_rng};
use crate::tail_scaling::Regime;

/// Draws per parallel batch; batch `j` uses RNG stream `j` under the seed.
pub const BATCH_SIZE: usize = 4096;

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 1.0 && gamma < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("gamma = {gamma} must lie in (1, 2)")))
    }
}

/// Runs `fill(rng, slot)` for `count` slots, batched over independent streams.
fn batched<T: Send, F>(count: usize, seed: u64, fill: F) -> Vec<T>
where
    F: Fn(&mut ChaCha8Rng) -> T + Sync,
{
    let batches = count.div_ceil(BATCH_SIZE);
    (0..batches)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let len = BATCH_SIZE.min(count - b * BATCH_SIZE);
            (0..len).map(|_| fill(&mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

/// Limit of the normalized score process at `k` fixed quantile levels.
///
/// `p0[j]` is the mass the boundary conditional law `G_0` puts on
/// `(-inf, q(tau_j)]`; only these partition probabilities enter the law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedLimitSpec {
    pub gamma: f64,
    pub theta: f64,
    pub taus: Vec<f64>,
    pub p0: Vec<f64>,
}

impl FixedLimitSpec {
    pub fn new(gamma: f64, theta: f64, taus: Vec<f64>, p0: Vec<f64>) -> Result<Self> {
        let spec = Self { gamma, theta, taus, p0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "theta = {} must be finite and >= 0",
                self.theta
            )));
        }
        if self.taus.is_empty() {
            return Err(Error::InvalidSpec("at least one tau is required".into()));
        }
        if self.taus.len() != self.p0.len() {
            return Err(Error::InvalidSpec("taus and p0 differ in length".into()));
        }
        if self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidSpec("taus must lie in (0, 1)".into()));
        }
        if self.p0.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidSpec("p0 values must lie in [0, 1]".into()));
        }
        if self.taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("taus must be strictly increasing".into()));
        }
        if self.p0.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidSpec("p0 must be nondecreasing in tau".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.taus.len()
    }

    /// `m_j = -(theta^{gamma-1} / gamma)(tau_j - p0_j)`, zero when `theta = 0`.
    pub fn drift(&self) -> Vec<f64> {
        if self.theta == 0.0 {
            return vec![0.0; self.k()];
        }
        let c = self.theta.powf(self.gamma - 1.0) / self.gamma;
        self.taus.iter().zip(&self.p0).map(|(t, p)| -c * (t - p)).collect()
    }

    /// Probabilities of the `k + 1` cells `(-inf, q_1], (q_1, q_2], ..., (q_k, inf)`.
    pub fn cell_probabilities(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k() + 1);
        let mut prev = 0.0;
        for &p in &self.p0 {
            out.push(p - prev);
            prev = p;
        }
        out.push(1.0 - prev);
        out
    }

    /// Tail masses `(nu(x_j > s), nu(x_j < -s))` of coordinate `j` for
    /// `s` below the largest jump size.
    pub fn coordinate_tails(&self, j: usize, s: f64) -> (f64, f64) {
        let g = self.gamma;
        let radial = |r: f64| -> f64 {
            // nu_x((0, r)) pushed forward through max(x, theta)
            if r <= self.theta {
                0.0
            } else {
                (g - 1.0) / g * r.powf(g)
            }
        };
        let tau = self.taus[j];
        let p0 = self.p0[j];
        ((1.0 - p0) * radial(tau / s), p0 * radial((1.0 - tau) / s))
    }
}

/// Largest expected number of explicit jumps per draw accepted by the
/// fixed-regime sampler.
pub const MAX_JUMP_RATE: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct FixedSamplerOptions {
    /// Expected number of explicitly simulated jumps per draw.
    pub large_jump_rate: f64,
}

impl Default for FixedSamplerOptions {
    fn default() -> Self {
        Self { large_jump_rate: 200.0 }
    }
}

/// Prepared sampler for a [`FixedLimitSpec`].
///
/// Radial points with `x < x_cut` (jumps larger than `|v| / x_cut`) are drawn
/// as a Poisson number of explicit jumps, at rate
/// `((gamma-1)/gamma) x_cut^gamma`, with `x = x_cut U^{1/gamma}` mapped
/// through `max(x, theta)`. Points beyond `x_cut` are replaced by a centred
/// Gaussian with covariance `(gamma-1) x_cut^{gamma-2} / (2-gamma) E[v v^T]`.
#[derive(Debug, Clone)]
pub struct FixedLimitSampler {
    spec: FixedLimitSpec,
    x_cut: f64,
    rate: f64,
    cell_cum: Vec<f64>,
    cell_vectors: Vec<Vec<f64>>,
    cell_sd: Vec<f64>,
    small_scale: f64,
    /// Drift minus the compensator of the explicit jumps.
    offset: Vec<f64>,
    poisson: Poisson<f64>,
}

impl FixedLimitSampler {
    pub fn new(spec: &FixedLimitSpec, options: &FixedSamplerOptions) -> Result<Self> {
        spec.validate()?;
        let g = spec.gamma;
        if !(options.large_jump_rate > 0.0 && options.large_jump_rate.is_finite()) {
            return Err(Error::InvalidSpec("large_jump_rate must be positive".into()));
        }
        let x_cut = (options.large_jump_rate * g / (g - 1.0))
            .powf(1.0 / g)
            .max(2.0 * spec.theta);
        let rate = (g - 1.0) / g * x_cut.powf(g);
        if !(rate <= MAX_JUMP_RATE) {
            return Err(Error::InvalidSpec(format!(
                "theta = {} needs {rate:e} explicit jumps per draw",
                spec.theta
            )));
        }
        let cells = spec.cell_probabilities();
        let k = spec.k();
        let cell_vectors: Vec<Vec<f64>> = (0..=k)
            .map(|c| (0..k).map(|j| spec.taus[j] - if c <= j { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut cell_cum = Vec::with_capacity(k + 1);
        let mut acc = 0.0;
        for p in &cells {
            acc += p;
            cell_cum.push(acc);
        }
        let mean_inverse = if spec.theta > 0.0 {
            x_cut.powf(g - 1.0) - spec.theta.powf(g - 1.0) / g
        } else {
            x_cut.powf(g - 1.0)
        };
        let drift = spec.drift();
        let offset = (0..k)
            .map(|j| drift[j] - mean_inverse * (spec.taus[j] - spec.p0[j]))
            .collect();
        let small_var = (g - 1.0) * x_cut.powf(g - 2.0) / (2.0 - g);
        Ok(Self {
            spec: spec.clone(),
            x_cut,
            rate,
            cell_cum,
            cell_vectors,
            cell_sd: cells.iter().map(|p| p.max(0.0).sqrt()).collect(),
            small_scale: small_var.sqrt(),
            offset,
            poisson: Poisson::new(rate).map_err(|e| Error::InvalidSpec(e.to_string()))?,
        })
    }

    pub fn spec(&self) -> &FixedLimitSpec {
        &self.spec
    }

    pub fn x_cut(&self) -> f64 {
        self.x_cut
    }

    /// Expected number of explicit jumps per draw.
    pub fn large_jump_rate(&self) -> f64 {
        self.rate
    }

    fn cell<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cell_cum
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cell_cum.len() - 1)
    }

    /// One explicit jump vector.
    pub fn jump<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.k()];
        self.add_jump(rng, &mut out);
        out
    }

    fn add_jump<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let x = (self.x_cut * u.powf(1.0 / self.spec.gamma)).max(self.spec.theta);
        let v = &self.cell_vectors[self.cell(rng)];
        for (o, vj) in out.iter_mut().zip(v) {
            *o += vj / x;
        }
    }

    /// One draw of the limit vector.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = self.offset.clone();
        let jumps = self.poisson.sample(rng) as u64;
        for _ in 0..jumps {
            self.add_jump(rng, &mut out);
        }
        for (v, sd) in self.cell_vectors.iter().zip(&self.cell_sd) {
            let xi: f64 = rng.sample(StandardNormal);
            let w = self.small_scale * sd * xi;
            for (o, vj) in out.iter_mut().zip(v) {
                *o += w * vj;
            }
        }
        out
    }
}

/// `count` draws of the fixed-quantile limit, each a vector over `spec.taus`.
pub fn sample_fixed_limit(spec: &FixedLimitSpec, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_fixed_limit_with(spec, count, seed, &FixedSamplerOptions::default())
}

pub fn sample_fixed_limit_with(
    spec: &FixedLimitSpec,
    count: usize,
    seed: u64,
    options: &FixedSamplerOptions,
) -> Result<Vec<Vec<f64>>> {
    let sampler = FixedLimitSampler::new(spec, options)?;
    Ok(batched(count, seed, |rng| sampler.draw(rng)))
}

/// Stable parameters `(alpha, skewness, scale)` of the one-dimensional
/// fixed limit with `theta = 0`. Its Levy tails are
/// `nu((s, inf)) = (1-p0)((gamma-1)/gamma) tau^gamma s^{-gamma}` and
/// `nu((-inf, -s)) = p0((gamma-1)/gamma)(1-tau)^gamma s^{-gamma}`.
pub fn stable_parameters(spec: &FixedLimitSpec) -> Result<(f64, f64, f64)> {
    spec.validate()?;
    if spec.k() != 1 || spec.theta != 0.0 {
        return Err(Error::InvalidSpec("stable form needs k = 1 and theta = 0".into()));
    }
    let g = spec.gamma;
    let (tau, p0) = (spec.taus[0], spec.p0[0]);
    let c_plus = (1.0 - p0) * (g - 1.0) / g * tau.powf(g);
    let c_minus = p0 * (g - 1.0) / g * (1.0 - tau).powf(g);
    let total = c_plus + c_minus;
    if total <= 0.0 {
        return Err(Error::InvalidSpec("Levy measure vanishes".into()));
    }
    let skew = (c_plus - c_minus) / total;
    let scale = (total * gamma_fn(1.0 - g) * (std::f64::consts::FRAC_PI_2 * g).cos()).powf(1.0 / g);
    Ok((g, skew, scale))
}

/// Chambers–Mallows–Stuck draws from the stable law with characteristic
/// exponent `-scale^alpha |a|^alpha (1 - i skew sign(a) tan(pi alpha / 2))`,
/// `alpha` in `(0, 2]`, `alpha != 1`.
pub fn sample_stable(alpha: f64, skew: f64, scale: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 2.0 && alpha != 1.0) {
        return Err(Error::InvalidSpec(format!("alpha = {alpha} unsupported")));
    }
    if !(-1.0..=1.0).contains(&skew) || !(scale > 0.0) {
        return Err(Error::InvalidSpec(
            "skewness must lie in [-1, 1] and scale be positive".into(),
        ));
    }
    let t = skew * (std::f64::consts::FRAC_PI_2 * alpha).tan();
    let b = t.atan() / alpha;
    let s = (1.0 + t * t).powf(1.0 / (2.0 * alpha));
    Ok(batched(count, seed, |rng| {
        let v = std::f64::consts::PI * (rng.random::<f64>() - 0.5);
        let w: f64 = rng.sample(Exp1);
        let x = s * (alpha * (v + b)).sin() / v.cos().powf(1.0 / alpha)
            * ((v - alpha * (v + b)).cos() / w).powf((1.0 - alpha) / alpha);
        scale * x
    }))
}

/// Limit of the normalized score sum at an intermediate level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntermediateLimitSpec {
    pub gamma: f64,
    pub theta: f64,
    pub beta: f64,
}

impl IntermediateLimitSpec {
    pub fn new(gamma: f64, theta: f64, beta: f64) -> Result<Self> {
        let spec = Self { gamma, theta, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.theta == 0.0 {
            return Err(Error::ThetaRequiredPositive);
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidSpec(format!("theta = {} must be positive", self.theta)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidSpec(format!("beta = {} must be positive", self.beta)));
        }
        Ok(())
    }

    /// `m = (beta - 1) theta^gamma / gamma`
    pub fn drift(&self) -> f64 {
        (self.beta - 1.0) * self.theta.powf(self.gamma) / self.gamma
    }

    /// Mass of the atom at `-1/theta`.
    pub fn atom_mass(&self) -> f64 {
        self.beta * (self.gamma - 1.0) / self.gamma * self.theta.powf(self.gamma)
    }

    pub fn atom_location(&self) -> f64 {
        -1.0 / self.theta
    }

    /// Levy density `beta (gamma - 1) |x|^{-(gamma+1)}` on `(-1/theta, 0)`.
    pub fn density(&self, x: f64) -> f64 {
        if x < 0.0 && x > -1.0 / self.theta {
            self.beta * (self.gamma - 1.0) * (-x).powf(-self.gamma - 1.0)
        } else {
            0.0
        }
    }

    /// Variance of the compensated jumps smaller than `eps` in size.
    pub fn small_jump_variance(&self, eps: f64) -> f64 {
        self.beta * (self.gamma - 1.0) * eps.powf(2.0 - self.gamma) / (2.0 - self.gamma)
    }

    /// Rate of jumps with size at least `eps`, atom included.
    pub fn large_jump_rate(&self, eps: f64) -> f64 {
        self.beta * (self.gamma - 1.0) / self.gamma * eps.powf(-self.gamma)
    }
}

/// `(e^{-ias} - 1 + ias) / s^2` split into real and imaginary parts.
fn kernel_over_s2(a: f64, s: f64) -> (f64, f64) {
    let z = a * s;
    if z.abs() < 1e-3 {
        let z2 = z * z;
        let re = -a * a / 2.0 * (1.0 - z2 / 12.0 + z2 * z2 / 360.0);
        let im = a * a * a * s / 6.0 * (1.0 - z2 / 20.0 + z2 * z2 / 840.0);
        (re, im)
    } else {
        let s2 = s * s;
        ((z.cos() - 1.0) / s2, (z - z.sin()) / s2)
    }
}

const CF_REL_TOL: f64 = 1e-8;

/// `int_lo^hi (e^{-ias} - 1 + ias) s^{-gamma-1} ds` via `s = v^{1/(2-gamma)}`,
/// which turns the weight into `s^{-2} / (2 - gamma)`.
fn jump_integral(gamma: f64, a: f64, lo: f64, hi: f64) -> Result<Complex64> {
    let p = 2.0 - gamma;
    let (vlo, vhi) = (lo.powf(p), hi.powf(p));
    let s_of = move |v: f64| v.powf(1.0 / p);
    let re = integrate(|v| kernel_over_s2(a, s_of(v)).0, vlo, vhi, CF_REL_TOL, 1e-15)?;
    let im = integrate(|v| kernel_over_s2(a, s_of(v)).1, vlo, vhi, CF_REL_TOL, 1e-15)?;
    Ok(Complex64::new(re, im) / p)
}

fn atom_term(spec: &IntermediateLimitSpec, a: f64) -> Complex64 {
    let x = spec.atom_location();
    let z = Complex64::new(0.0, a * x);
    spec.atom_mass() * (z.exp() - 1.0 - z)
}

/// Characteristic function of the intermediate limit at `a`.
pub fn eval_cf_intermediate(spec: &IntermediateLimitSpec, a: f64) -> Result<Complex64> {
    spec.validate()?;
    if a == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let dens = spec.beta * (spec.gamma - 1.0) * jump_integral(spec.gamma, a, 0.0, 1.0 / spec.theta)?;
    let exponent = Complex64::new(0.0, a * spec.drift()) + atom_term(spec, a) + dens;
    Ok(exponent.exp())
}

/// Characteristic function of the law actually sampled with cutoff `eps`:
/// exact jumps of size at least `eps`, a Gaussian for the rest.
pub fn eval_cf_intermediate_approx(spec: &IntermediateLimitSpec, eps: f64, a: f64) -> Result<Complex64> {
    spec.validate()?;
    if a == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let hi = 1.0 / spec.theta;
    let e = eps.min(hi);
    let dens = spec.beta * (spec.gamma - 1.0) * jump_integral(spec.gamma, a, e, hi)?;
    let gauss = -0.5 * spec.small_jump_variance(e) * a * a;
    let exponent = Complex64::new(gauss, a * spec.drift()) + atom_term(spec, a) + dens;
    Ok(exponent.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateSamplerOptions {
    /// Fixed small-jump cutoff; chosen adaptively when absent.
    pub epsilon: Option<f64>,
    /// Largest allowed `|cf - cf_approx|` over the check grid.
    pub cf_tolerance: f64,
    /// The check grid is `a = 0.5, 1, ..., a_max`.
    pub a_max: f64,
}

impl Default for IntermediateSamplerOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            cf_tolerance: 1e-3,
            a_max: 5.0,
        }
    }
}

/// Largest `eps = 2^{-j} / (10 theta)` whose sampled law stays within
/// `cf_tolerance` of the exact characteristic function on the check grid.
pub fn choose_epsilon(spec: &IntermediateLimitSpec, options: &IntermediateSamplerOptions) -> Result<f64> {
    spec.validate()?;
    if let Some(eps) = options.epsilon {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidSpec(format!("epsilon = {eps} must be positive")));
        }
        return Ok(eps);
    }
    let steps = (options.a_max / 0.5).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (1..=steps).map(|i| (0.5 * i as f64).min(options.a_max)).collect();
    let exact = grid
        .iter()
        .map(|&a| eval_cf_intermediate(spec, a))
        .collect::<Result<Vec<_>>>()?;
    let mut eps = 0.1 / spec.theta;
    for _ in 0..40 {
        let mut worst: f64 = 0.0;
        for (&a, cf) in grid.iter().zip(&exact) {
            worst = worst.max((eval_cf_intermediate_approx(spec, eps, a)? - cf).norm());
        }
        if worst < options.cf_tolerance {
            return Ok(eps);
        }
        eps /= 2.0;
    }
    Err(Error::QuadratureFailure {
        tolerance: options.cf_tolerance,
        estimate: eps,
    })
}

pub fn sample_intermediate_limit(spec: &IntermediateLimitSpec, count: usize, seed: u64) -> Result<Vec<f64>> {
    sample_intermediate_limit_with(spec, count, seed, &IntermediateSamplerOptions::default())
}

/// Compound-Poisson jumps `-min(eps U^{-1/gamma}, 1/theta)` at rate
/// `beta((gamma-1)/gamma) eps^{-gamma}` (the cap reproduces the atom at
/// `-1/theta`), compensated, plus a Gaussian for smaller jumps and the drift.
pub fn sample_intermediate_limit_with(
    spec: &IntermediateLimitSpec,
    count: usize,
    seed: u64,
    options: &IntermediateSamplerOptions,
) -> Result<Vec<f64>> {
    let eps = choose_epsilon(spec, options)?.min(1.0 / spec.theta);
    let g = spec.gamma;
    let rate = spec.large_jump_rate(eps);
    let compensator = -spec.beta * (eps.powf(1.0 - g) - spec.theta.powf(g - 1.0) / g);
    let offset = spec.drift() - compensator;
    let sd = spec.small_jump_variance(eps).sqrt();
    let cap = 1.0 / spec.theta;
    let poisson = Poisson::new(rate).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    Ok(batched(count, seed, |rng| {
        let jumps = poisson.sample(rng) as u64;
        let mut sum = 0.0;
        for _ in 0..jumps {
            let u: f64 = 1.0 - rng.random::<f64>();
            sum -= (eps * u.powf(-1.0 / g)).min(cap);
        }
        let xi: f64 = rng.sample(StandardNormal);
        offset + sum + sd * xi
    }))
}

/// Empirical characteristic function of `draws` at `a`.
pub fn empirical_cf(draws: &[f64], a: f64) -> Complex64 {
    let re: Vec<f64> = draws.iter().map(|x| (a * x).cos()).collect();
    let im: Vec<f64> = draws.iter().map(|x| (a * x).sin()).collect();
    let m = draws.len() as f64;
    Complex64::new(pairwise_sum(&re) / m, pairwise_sum(&im) / m)
}

/// Covariance of the Gaussian limit over `taus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLimitSpec {
    pub taus: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Monte-Carlo estimate of `E[(1/e)(tau_a - 1(Y <= q_a))(tau_b - 1(Y <= q_b))]`.
/// `sampler` returns one `(Y(1), e)` pair per call.
pub fn gaussian_limit_cov<S>(
    sampler: S,
    taus: &[f64],
    quantiles: &[f64],
    mc_count: usize,
    seed: u64,
) -> Result<GaussianLimitSpec>
where
    S: Fn(&mut ChaCha8Rng) -> (f64, f64) + Sync,
{
    let k = taus.len();
    if k == 0 || quantiles.len() != k {
        return Err(Error::InvalidSpec(
            "taus and quantiles must be nonempty and aligned".into(),
        ));
    }
    if mc_count == 0 {
        return Err(Error::InvalidSpec("mc_count must be positive".into()));
    }
    let draws = batched(mc_count, seed, |rng| sampler(rng));
    let mut covariance = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let terms: Vec<f64> = draws
                .iter()
                .map(|&(y, e)| {
                    let va = taus[a] - if y <= quantiles[a] { 1.0 } else { 0.0 };
                    let vb = taus[b] - if y <= quantiles[b] { 1.0 } else { 0.0 };
                    va * vb / e
                })
                .collect();
            let v = pairwise_sum(&terms) / mc_count as f64;
            covariance[a][b] = v;
            covariance[b][a] = v;
        }
    }
    Ok(GaussianLimitSpec {
        taus: taus.to_vec(),
        covariance,
    })
}

/// Constants combining the two arm limits into the QTE limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QteCombination {
    /// Balance constant `lim P(1 - e <= t) / P(e <= t)`, possibly infinite.
    pub c: f64,
    pub gamma1: f64,
    /// Limiting density ratio (intermediate regime).
    pub rho: f64,
    pub g1: f64,
    pub g0: f64,
    pub regime: Regime,
}

/// Fixed regime: `Z1/g1 - c^{-1/gamma1} Z0/g0`.
/// Intermediate regime: `Z1 - c^{-1/gamma1} rho Z0`.
pub fn qte_limit_combine(z1: &[f64], z0: &[f64], params: &QteCombination) -> Result<Vec<f64>> {
    if !(params.c > 0.0) {
        return Err(Error::InvalidBalanceConstant(params.c));
    }
    if z1.len() != z0.len() {
        return Err(Error::InvalidSpec("draw streams differ in length".into()));
    }
    let coef = if params.c.is_infinite() {
        0.0
    } else {
        params.c.powf(-1.0 / params.gamma1)
    };
    match params.regime {
        Regime::Fixed => {
            if !(params.g1 > 0.0 && params.g0 > 0.0) {
                return Err(Error::InvalidSpec("densities must be positive".into()));
            }
            Ok(z1
                .iter()
                .zip(z0)
                .map(|(a, b)| {
                    let second = if coef == 0.0 { 0.0 } else { coef * b / params.g0 };
                    a / params.g1 - second
                })
                .collect())
        }
        Regime::Intermediate => {
            if !(params.rho >= 0.0) {
                return Err(Error::InvalidSpec("rho must be nonnegative".into()));
            }
            let w = coef * params.rho;
            Ok(z1
                .iter()
                .zip(z0)
                .map(|(a, b)| if w == 0.0 { *a } else { a - w * b })
                .collect())
        }
    }
}

/// Any of the limit specifications, tagged by `kind` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LimitSpec {
    Fixed(FixedLimitSpec),
    Intermediate(IntermediateLimitSpec),
    Gaussian(GaussianLimitSpec),
}

impl LimitSpec {
    /// Parses and validates a JSON specification.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: LimitSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LimitSpec::Fixed(s) => s.validate(),
            LimitSpec::Intermediate(s) => s.validate(),
            LimitSpec::Gaussian(s) => {
                let k = s.taus.len();
                if k == 0 || s.covariance.len() != k || s.covariance.iter().any(|r| r.len() != k) {
                    return Err(Error::InvalidSpec("covariance must be k x k".into()));
                }
                for a in 0..k {
                    if !(s.covariance[a][a] >= 0.0) {
                        return Err(Error::InvalidSpec("negative variance".into()));
                    }
                    for b in 0..a {
                        let (x, y) = (s.covariance[a][b], s.covariance[b][a]);
                        if !x.is_finite() || (x - y).abs() > 1e-12 * (1.0 + x.abs()) {
                            return Err(Error::InvalidSpec("covariance is not symmetric".into()));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_spec_validation() {
        assert!(FixedLimitSpec::new(1.5, 0.0, vec![0.5], vec![0.5]).is_ok());
        assert!(FixedLimitSpec::new(2.5, 0.0, vec![0.5], vec![0.5]).is_err());
        assert!(FixedLimitSpec::new(1.5, 0.0, vec![0.7, 0.3], vec![0.2, 0.5]).is_err());
        assert!(FixedLimitSpec::new(1.5, 0.0, vec![0.3, 0.7], vec![0.5, 0.2]).is_err());
        assert!(FixedLimitSpec::new(1.5, -1.0, vec![0.5], vec![0.5]).is_err());
        let s = FixedLimitSpec::new(1.5, 1.0, vec![0.3, 0.7], vec![0.2, 0.5]).unwrap();
        let cells = s.cell_probabilities();
        assert_eq!(cells.len(), 3);
        assert!((cells.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(
            FixedLimitSpec::new(1.5, 0.0, vec![0.3], vec![0.1]).unwrap().drift(),
            vec![0.0]
        );
    }

    #[test]
    fn intermediate_constants() {
        let s = IntermediateLimitSpec::new(1.5, 1.0, 1.0).unwrap();
        assert!((s.atom_mass() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.drift(), 0.0);
        assert!(matches!(
            IntermediateLimitSpec::new(1.5, 0.0, 1.0),
            Err(Error::ThetaRequiredPositive)
        ));
    }

    #[test]
    fn cf_basic_symmetries() {
        let s = IntermediateLimitSpec::new(1.5, 1.0, 1.0).unwrap();
        assert_eq!(eval_cf_intermediate(&s, 0.0).unwrap(), Complex64::new(1.0, 0.0));
        for a in [0.3, 1.0, 4.0] {
            let p = eval_cf_intermediate(&s, a).unwrap();
            let m = eval_cf_intermediate(&s, -a).unwrap();
            assert!((p - m.conj()).norm() < 1e-10);
            assert!(p.norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn approx_cf_converges_to_exact() {
        let s = IntermediateLimitSpec::new(1.5, 1.0, 1.0).unwrap();
        let exact = eval_cf_intermediate(&s, 2.0).unwrap();
        let d1 = (eval_cf_intermediate_approx(&s, 0.05, 2.0).unwrap() - exact).norm();
        let d2 = (eval_cf_intermediate_approx(&s, 0.005, 2.0).unwrap() - exact).norm();
        assert!(d2 < d1 && d2 < 1e-3, "{d1} {d2}");
    }

    #[test]
    fn intermediate_draws_respect_support_and_mean() {
        let s = IntermediateLimitSpec::new(1.5, 2.0, 1.7).unwrap();
        let draws = sample_intermediate_limit(&s, 20_000, 11).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!(
            (mean - s.drift()).abs() < 5.0 * sd / (draws.len() as f64).sqrt(),
            "{mean}"
        );
    }

    #[test]
    fn jump_vectors_follow_single_outcome() {
        let spec = FixedLimitSpec::new(1.4, 0.5, vec![0.2, 0.5, 0.8], vec![0.1, 0.4, 0.9]).unwrap();
        let sampler = FixedLimitSampler::new(&spec, &FixedSamplerOptions::default()).unwrap();
        let mut rng = stream_rng(1, 0);
        for _ in 0..10_000 {
            let j = sampler.jump(&mut rng);
            // negative coordinates form a suffix, and |jump| <= 1/theta
            let first_neg = j.iter().position(|&v| v < 0.0).unwrap_or(j.len());
            assert!(j[first_neg..].iter().all(|&v| v < 0.0));
            assert!(j.iter().all(|v| v.abs() <= 1.0 / 0.5 + 1e-12));
        }
    }

    #[test]
    fn fixed_draws_are_deterministic() {
        let spec = FixedLimitSpec::new(1.5, 0.0, vec![0.5], vec![0.5]).unwrap();
        let a = sample_fixed_limit(&spec, 5000, 3).unwrap();
        let b = sample_fixed_limit(&spec, 5000, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_fixed_limit(&spec, 5000, 4).unwrap());
    }

    #[test]
    fn qte_combination_cases() {
        let z1 = [1.0, 2.0, -3.0];
        let z0 = [0.5, -1.0, 4.0];
        let mut p = QteCombination {
            c: f64::INFINITY,
            gamma1: 1.5,
            rho: 1.0,
            g1: 2.0,
            g0: 1.0,
            regime: Regime::Fixed,
        };
        assert_eq!(qte_limit_combine(&z1, &z0, &p).unwrap(), vec![0.5, 1.0, -1.5]);
        p.c = 1.0;
        p.g1 = 1.0;
        assert_eq!(qte_limit_combine(&z1, &z0, &p).unwrap(), vec![0.5, 3.0, -7.0]);
        p.regime = Regime::Intermediate;
        p.rho = 0.0;
        assert_eq!(qte_limit_combine(&z1, &z0, &p).unwrap(), z1.to_vec());
        p.c = 0.0;
        assert!(matches!(
            qte_limit_combine(&z1, &z0, &p),
            Err(Error::InvalidBalanceConstant(_))
        ));
    }

    #[test]
    fn limit_spec_json_round_trip() {
        let text = r#"{"kind":"fixed","gamma":1.5,"theta":0.0,"taus":[0.5],"p0":[0.5]}"#;
        let spec = LimitSpec::from_json(text).unwrap();
        let back = serde_json::to_string(&spec).unwrap();
        assert_eq!(LimitSpec::from_json(&back).unwrap(), spec);
        assert!(LimitSpec::from_json(r#"{"kind":"intermediate","gamma":1.5,"theta":0.0,"beta":1.0}"#).is_err());
    }
}
