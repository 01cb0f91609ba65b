//! Entropic optimal transport by Sinkhorn scaling.
//!
//! The plan is computed on the cost divided by a normaliser (its largest
//! entry unless overridden), so `eps` is relative to the largest distance.
//! Scalings that grow past a threshold are absorbed into log-domain dual
//! potentials and the kernel is rebuilt. With `eps_scaling` the entropic
//! weight is halved stage by stage from about 1 down to `eps`, each stage
//! warm-started from the previous potentials.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{CostMatrix, TransportPlan};
use crate::geometry::PointCloud;
use crate::precision::{self, Precision};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic weight relative to the normalised cost.
    pub eps: f64,
    pub max_iters: usize,
    /// Marginal tolerance; the precision default when absent.
    pub tol: Option<f64>,
    /// Arithmetic of the iteration; the global mode when absent.
    pub precision: Option<Precision>,
    /// Cost normaliser; the largest cost entry when absent.
    pub cost_scale: Option<f64>,
    pub eps_scaling: bool,
    /// Over-relaxation exponent of the scaling updates; 1 is plain Sinkhorn.
    pub relaxation: f64,
    /// Finish with Newton steps on the dual once the scaling iteration is
    /// close; plain scaling converges too slowly at small `eps` to reach
    /// tight marginal tolerances.
    pub newton: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            eps: 0.002,
            max_iters: 100_000,
            tol: None,
            precision: None,
            cost_scale: None,
            eps_scaling: true,
            relaxation: 1.0,
            newton: true,
        }
    }
}

impl SinkhornConfig {
    /// Looser settings for inner loops of training.
    pub fn training() -> Self {
        SinkhornConfig {
            max_iters: 300,
            tol: Some(1e-5),
            newton: false,
            ..Self::default()
        }
    }
}

/// Sinkhorn distance on positions, `⟨γ, M⟩` on the unnormalised cost.
pub fn sinkhorn(
    a: &PointCloud,
    b: &PointCloud,
    cfg: &SinkhornConfig,
) -> Result<(f64, TransportPlan)> {
    let cost = CostMatrix::euclidean(a, b)?;
    let plan = sinkhorn_plan(&cost, cfg)?;
    Ok((plan.cost, plan))
}

pub fn sinkhorn_plan(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let m = cost.require_square()?;
    let prec = cfg.precision.unwrap_or_else(precision::current);
    let floor = prec.sinkhorn_floor();
    if !(cfg.eps >= floor) {
        return Err(Error::PrecisionFloor {
            eps: cfg.eps,
            floor,
            precision: prec,
        });
    }
    let tol = cfg.tol.unwrap_or_else(|| prec.sinkhorn_tol());
    let scale = match cfg.cost_scale {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => {
            return Err(Error::invalid(format!(
                "cost scale must be positive, got {s}"
            )))
        }
        None => cost.max(),
    };
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let normalized: Vec<f64> = cost.data().iter().map(|c| c / scale).collect();
    let schedule = eps_schedule(cfg.eps, cfg.eps_scaling);
    let solved = match prec {
        Precision::Single => solve::<f32>(
            &normalized,
            m,
            &schedule,
            tol,
            cfg.max_iters,
            cfg.relaxation,
            cfg.newton,
            prec,
        )?,
        Precision::Double => solve::<f64>(
            &normalized,
            m,
            &schedule,
            tol,
            cfg.max_iters,
            cfg.relaxation,
            cfg.newton,
            prec,
        )?,
    };
    let mut plan =
        TransportPlan::from_gamma(cost, solved.gamma, solved.iterations, solved.converged);
    plan.dual = Some(solved.dual * scale);
    Ok(plan)
}

fn eps_schedule(eps: f64, scaling: bool) -> Vec<f64> {
    let mut stages = vec![eps];
    if scaling {
        let mut e = eps;
        while e * 2.0 <= 1.0 {
            e *= 2.0;
            stages.push(e);
        }
        stages.reverse();
    }
    stages
}

struct Solved {
    gamma: Vec<f64>,
    /// `⟨a, f⟩ + ⟨b, g⟩ − ε Σ γ` on the normalised cost.
    dual: f64,
    iterations: usize,
    converged: bool,
}

/// Iterations allowed in each warm-up stage.
const STAGE_ITERS: usize = 200;

/// Scalings `u`, `v` of the kernel built from potentials `f`, `g`.
struct Scaling<T> {
    f: Vec<T>,
    g: Vec<T>,
    k: Vec<T>,
    u: Vec<T>,
    v: Vec<T>,
    kv: Vec<T>,
    ktu: Vec<T>,
    m: usize,
}

impl<T: Float> Scaling<T> {
    fn new(m: usize) -> Self {
        Scaling {
            f: vec![T::zero(); m],
            g: vec![T::zero(); m],
            k: vec![T::zero(); m * m],
            u: vec![T::one(); m],
            v: vec![T::one(); m],
            kv: vec![T::zero(); m],
            ktu: vec![T::zero(); m],
            m,
        }
    }

    fn rebuild(&mut self, c: &[T], eps: T) {
        build_kernel(&mut self.k, c, &self.f, &self.g, eps, self.m);
        self.u.fill(T::one());
        self.v.fill(T::one());
    }

    fn absorb(&mut self, eps: T) {
        absorb(&mut self.f, &mut self.u, eps);
        absorb(&mut self.g, &mut self.v, eps);
    }

    /// Scaling iterations until the row residual reaches `tol` or `budget`
    /// runs out; returns the iterations used and the final residual.
    #[allow(clippy::too_many_arguments)]
    fn iterate(
        &mut self,
        c: &[T],
        eps: T,
        tol: T,
        budget: usize,
        omega: T,
        plain: bool,
        prec: Precision,
        done_before: usize,
    ) -> Result<(usize, T)> {
        let m = self.m;
        let a = T::one() / T::from(m).unwrap();
        let big = T::max_value().powf(T::from(0.25).unwrap());
        let tiny = big.recip();
        let mut it = 0;
        loop {
            matvec(&self.k, &self.v, &mut self.kv, m);
            let residual = self
                .u
                .iter()
                .zip(&self.kv)
                .fold(T::zero(), |r, (&ui, &kvi)| r.max((ui * kvi - a).abs()));
            if residual <= tol || it == budget {
                return Ok((it, residual));
            }
            relaxed_update(&mut self.u, &self.kv, a, omega, plain);
            matvec_t(&self.k, &self.u, &mut self.ktu, m);
            relaxed_update(&mut self.v, &self.ktu, a, omega, plain);
            it += 1;
            if self.u.iter().chain(&self.v).any(|x| !x.is_finite()) {
                return Err(Error::SinkhornOverflow {
                    precision: prec,
                    iteration: done_before + it,
                });
            }
            if self.u.iter().chain(&self.v).any(|&x| x > big || x < tiny) {
                self.absorb(eps);
                build_kernel(&mut self.k, c, &self.f, &self.g, eps, m);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn solve<T: Float>(
    cost: &[f64],
    m: usize,
    schedule: &[f64],
    tol: f64,
    max_iters: usize,
    relaxation: f64,
    newton: bool,
    prec: Precision,
) -> Result<Solved> {
    let omega = T::from(relaxation).unwrap();
    let plain = relaxation == 1.0;
    let c: Vec<T> = cost.iter().map(|&x| T::from(x).unwrap()).collect();
    let mut s = Scaling::<T>::new(m);
    let mut total = 0usize;
    let (last_stage, warmup) = schedule.split_last().expect("schedule is never empty");
    for &eps_f in warmup {
        let eps = T::from(eps_f).unwrap();
        s.rebuild(&c, eps);
        let stage_tol = T::from(tol.max(1e-2 / m as f64)).unwrap();
        total += s
            .iterate(&c, eps, stage_tol, STAGE_ITERS, omega, plain, prec, total)?
            .0;
        s.absorb(eps);
    }
    let eps_f = *last_stage;
    let eps = T::from(eps_f).unwrap();
    let target = T::from(tol).unwrap();
    s.rebuild(&c, eps);
    let switch = if newton {
        tol.max(NEWTON_SWITCH / m as f64)
    } else {
        tol
    };
    let (used, mut residual) = s.iterate(
        &c,
        eps,
        T::from(switch).unwrap(),
        max_iters,
        omega,
        plain,
        prec,
        total,
    )?;
    total += used;
    if newton && residual > target {
        s.absorb(eps);
        let (steps, _) = newton_polish(&c, &mut s.f, &mut s.g, eps, target, m);
        total += steps;
        s.rebuild(&c, eps);
        // Newton stalls when the plan is nearly a permutation; plain scaling
        // finishes from wherever it stopped.
        let budget = max_iters.saturating_sub(used);
        let (more, r) = s.iterate(&c, eps, target, budget, omega, plain, prec, total)?;
        total += more;
        residual = r;
    }
    let converged = residual <= target;
    let Scaling { f, g, k, u, v, .. } = &s;
    let mut gamma = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            gamma.push((u[i] * k[i * m + j] * v[j]).to_f64().unwrap());
        }
    }
    if gamma.iter().any(|x| !x.is_finite()) {
        return Err(Error::SinkhornOverflow {
            precision: prec,
            iteration: total,
        });
    }
    let mass: f64 = gamma.iter().sum();
    let mut potentials = 0.0;
    for i in 0..m {
        potentials +=
            (f[i] + eps * u[i].ln()).to_f64().unwrap() + (g[i] + eps * v[i].ln()).to_f64().unwrap();
    }
    let dual = potentials / m as f64 - eps_f * mass;
    Ok(Solved {
        gamma,
        dual,
        iterations: total,
        converged,
    })
}

/// Relative marginal residual below which Newton polishing takes over.
const NEWTON_SWITCH: f64 = 1e-3;
const NEWTON_STEPS: usize = 50;

fn marginals<T: Float>(
    c: &[T],
    f: &[T],
    g: &[T],
    eps: T,
    m: usize,
    gamma: &mut [T],
    r: &mut [T],
    s: &mut [T],
) -> T {
    build_kernel(gamma, c, f, g, eps, m);
    r.fill(T::zero());
    s.fill(T::zero());
    for i in 0..m {
        for j in 0..m {
            let x = gamma[i * m + j];
            r[i] = r[i] + x;
            s[j] = s[j] + x;
        }
    }
    let a = T::one() / T::from(m).unwrap();
    r.iter()
        .chain(s.iter())
        .fold(T::zero(), |acc, &x| acc.max((x - a).abs()))
}

/// Newton's method on the dual potentials with backtracking on the
/// marginal residual. The potentials are shifted in place; returns the number
/// of steps and whether `tol` was reached.
fn newton_polish<T: Float>(
    c: &[T],
    f: &mut [T],
    g: &mut [T],
    eps: T,
    tol: T,
    m: usize,
) -> (usize, bool) {
    let a = T::one() / T::from(m).unwrap();
    let mut gamma = vec![T::zero(); m * m];
    let (mut r, mut s) = (vec![T::zero(); m], vec![T::zero(); m]);
    let mut residual = marginals(c, f, g, eps, m, &mut gamma, &mut r, &mut s);
    let mut schur = vec![T::zero(); m * m];
    let mut rhs = vec![T::zero(); m];
    let mut dx = vec![T::zero(); m];
    let (mut ft, mut gt) = (vec![T::zero(); m], vec![T::zero(); m]);
    for step in 0..NEWTON_STEPS {
        if residual <= tol {
            return (step, true);
        }
        // S = D_s − Γᵀ D_r⁻¹ Γ is the Laplacian of the weights
        // w_pq = Σ_i γ_ip γ_iq / r_i, singular along the constant vector.
        // Its diagonal is summed from off-diagonal weights: subtracting from
        // s_p cancels catastrophically once the plan is nearly a permutation.
        let mut diag_mean = T::zero();
        for p in 0..m {
            let mut degree = T::zero();
            for q in 0..m {
                if q == p {
                    continue;
                }
                let mut acc = T::zero();
                for i in 0..m {
                    acc = acc + gamma[i * m + p] * gamma[i * m + q] / r[i];
                }
                schur[p * m + q] = -acc;
                degree = degree + acc;
            }
            schur[p * m + p] = degree;
            diag_mean = diag_mean + s[p];
        }
        diag_mean = diag_mean / T::from(m).unwrap();
        for x in schur.iter_mut() {
            *x = *x + diag_mean;
        }
        for (q, out) in rhs.iter_mut().enumerate() {
            let mut acc = T::zero();
            for i in 0..m {
                acc = acc + gamma[i * m + q] * (r[i] - a) / r[i];
            }
            *out = eps * (acc - (s[q] - a));
        }
        // Near-permutation plans leave S numerically singular; retry with
        // growing diagonal damping and let the line search judge the step.
        let (base, target) = (schur.clone(), rhs.clone());
        let mut damping = T::zero();
        let mut solved = false;
        for _ in 0..8 {
            schur.copy_from_slice(&base);
            rhs.copy_from_slice(&target);
            for p in 0..m {
                schur[p * m + p] = schur[p * m + p] + damping;
            }
            if cholesky_solve(&mut schur, &mut rhs, m) {
                solved = true;
                break;
            }
            damping = if damping == T::zero() {
                diag_mean * T::from(1e-14).unwrap()
            } else {
                damping * T::from(100.0).unwrap()
            };
        }
        if !solved {
            return (step, false);
        }
        let dy = &rhs;
        for (i, d) in dx.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..m {
                acc = acc + gamma[i * m + j] * dy[j];
            }
            *d = (-eps * (r[i] - a) - acc) / r[i];
        }
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..m {
                ft[i] = f[i] + t * dx[i];
                gt[i] = g[i] + t * dy[i];
            }
            let trial = marginals(c, &ft, &gt, eps, m, &mut gamma, &mut r, &mut s);
            if trial < residual {
                residual = trial;
                f.copy_from_slice(&ft);
                g.copy_from_slice(&gt);
                accepted = true;
                break;
            }
            t = t / T::from(2.0).unwrap();
        }
        if !accepted {
            marginals(c, f, g, eps, m, &mut gamma, &mut r, &mut s);
            return (step + 1, residual <= tol);
        }
    }
    (NEWTON_STEPS, residual <= tol)
}

/// Solves `A x = b` in place for symmetric positive definite `A`; `b` becomes `x`.
fn cholesky_solve<T: Float>(a: &mut [T], b: &mut [T], m: usize) -> bool {
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d = d - a[j * m + k] * a[j * m + k];
        }
        if !(d > T::zero()) {
            return false;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in j + 1..m {
            let mut x = a[i * m + j];
            for k in 0..j {
                x = x - a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = x / d;
        }
    }
    for i in 0..m {
        let mut x = b[i];
        for k in 0..i {
            x = x - a[i * m + k] * b[k];
        }
        b[i] = x / a[i * m + i];
    }
    for i in (0..m).rev() {
        let mut x = b[i];
        for k in i + 1..m {
            x = x - a[k * m + i] * b[k];
        }
        b[i] = x / a[i * m + i];
    }
    true
}

/// `s ← s^(1−ω) (a / k)^ω`.
fn relaxed_update<T: Float>(s: &mut [T], k: &[T], a: T, omega: T, plain: bool) {
    for (si, &ki) in s.iter_mut().zip(k) {
        let full = a / ki;
        *si = if plain {
            full
        } else {
            si.powf(T::one() - omega) * full.powf(omega)
        };
    }
}

fn absorb<T: Float>(potential: &mut [T], scaling: &mut [T], eps: T) {
    for (p, s) in potential.iter_mut().zip(scaling.iter_mut()) {
        *p = *p + eps * s.ln();
        *s = T::one();
    }
}

fn build_kernel<T: Float>(k: &mut [T], c: &[T], f: &[T], g: &[T], eps: T, m: usize) {
    for i in 0..m {
        for j in 0..m {
            k[i * m + j] = ((f[i] + g[j] - c[i * m + j]) / eps).exp();
        }
    }
}

fn matvec<T: Float>(k: &[T], x: &[T], out: &mut [T], m: usize) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = k[i * m..(i + 1) * m]
            .iter()
            .zip(x)
            .fold(T::zero(), |s, (&kij, &xj)| s + kij * xj);
    }
}

fn matvec_t<T: Float>(k: &[T], x: &[T], out: &mut [T], m: usize) {
    out.fill(T::zero());
    for i in 0..m {
        let xi = x[i];
        for (o, &kij) in out.iter_mut().zip(&k[i * m..(i + 1) * m]) {
            *o = *o + kij * xi;
        }
    }
}
