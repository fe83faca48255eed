//! The finitely iterated Newton scheme.
//!
//! Each sweep solves the P-equations off the resonant set,
//!   Δû^{(k)} = −T_N^{-1} F(û^{(k−1)})|_{off S},
//! with the resonant amplitudes held fixed, then solves the Q-equations for
//! the frequencies,
//!   ω_j^{(k)} = j² + (δ/a_j) (û∗v̂)^{∗p}∗û |_{(−e_j, j)}.
//! Starting data are û^{(0)} = a_j on S and ω^{(0)} = { j² }. The scheme
//! stops after K sweeps or once the residual norm drops below |δ|^r.
//!
//! Residuals are measured on the working box (the Galerkin residual of the
//! banded equations); the convolution mass that leaves the box is tracked
//! separately as `tail_norm`.

use std::collections::HashSet;
use std::sync::Arc;

use num_complex::Complex64;
use serde::Serialize;

use crate::field::{
    analytic_norm, conjugate_field, initial_field, FieldError, FourierField, ModeData, ProblemSpec,
};
use crate::lattice::{
    build_site_index_dims, resonant_set, LatticeError, ModeSet, ResonantSet, SiteIndex,
    TruncationSpec, DEFAULT_SITE_BUDGET,
};
use crate::linop::{
    assemble_t_n, assemble_t_n_on, support_closure, LinopError, SolveOptions, SolveReport,
};
use crate::nonlinear::{convolve_trunc, evaluate_f, nonlinear_term, FieldPair, FrequencyVector};

#[derive(Debug, thiserror::Error)]
pub enum NewtonError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error("zero amplitude at mode {mode}; use the vanishing-amplitude limit path")]
    ZeroAmplitude { mode: usize },
    #[error("residual diverged at sweep {sweep}: {previous:.3e} → {current:.3e}")]
    Diverged {
        sweep: usize,
        previous: f64,
        current: f64,
    },
    #[error("no convergence in {sweeps} sweeps: residual {achieved:.3e} > target {target:.3e}")]
    NoConvergence {
        sweeps: usize,
        achieved: f64,
        target: f64,
    },
    #[error("scheme left the initial approximation: ‖u − u⁰‖ = {distance:.3e} > {bound:.3e}")]
    ClosenessViolated { distance: f64, bound: f64 },
    #[error("frequency update produced imaginary part {imag:.3e} at mode {mode}")]
    ComplexFrequency { mode: usize, imag: f64 },
}

/// Domain of each linear solve.
#[derive(Clone, Debug)]
pub enum SolveDomain {
    /// The whole banded box off S.
    Full,
    /// Full while the retained count stays under `cap`; otherwise restrict
    /// to the hop-closure of the right-hand side support. Couplings into
    /// the dropped complement are O(δ^{hops+1}).
    Auto { cap: usize, hops: usize },
    /// An explicit ordinal whitelist (kept fixed across perturbed runs so
    /// finite differences stay smooth).
    Fixed(Arc<HashSet<usize>>),
}

#[derive(Clone, Debug)]
pub struct SchemeOptions {
    pub solve: SolveOptions,
    pub domain: SolveDomain,
    /// Abort when the post-sweep residual exceeds this multiple of the
    /// previous one.
    pub divergence_factor: f64,
    /// Stop early once the residual target |δ|^r is met.
    pub stop_at_target: bool,
    /// Error if the target is still unmet after K sweeps.
    pub require_target: bool,
    /// Constant C in the closeness check ‖u − u⁰‖_β ≤ C·|δ|; None skips it.
    pub closeness_constant: Option<f64>,
    /// Also measure the residual mass falling outside the working box.
    pub measure_tail: bool,
    pub site_budget: u64,
}

impl SchemeOptions {
    pub fn for_spec(spec: &ProblemSpec) -> Self {
        Self {
            solve: SolveOptions::excision(spec),
            domain: SolveDomain::Auto {
                cap: 30_000,
                hops: 3,
            },
            divergence_factor: 2.0,
            stop_at_target: true,
            require_target: true,
            closeness_constant: Some(50.0),
            measure_tail: true,
            site_budget: DEFAULT_SITE_BUDGET,
        }
    }

    /// Fixed-iteration variant used by finite-difference probes: no early
    /// exit, no target requirement.
    pub fn probe(spec: &ProblemSpec) -> Self {
        Self {
            stop_at_target: false,
            require_target: false,
            closeness_constant: None,
            ..Self::for_spec(spec)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    /// Off-S residual at β′ right after the P-step, before the Q-update
    /// (the quantity the first-step gain estimate speaks about).
    pub p_residual_beta_prime: f64,
    /// Full residual at β after the Q-update.
    pub residual_beta: f64,
    /// Full residual at β′ after the Q-update.
    pub residual_beta_prime: f64,
    pub omega: Vec<f64>,
    pub tail_norm: f64,
    pub sigma_min_est: f64,
    pub norm_ratio: f64,
}

/// Output of the construction: the solution pair, its frequencies and the
/// residual bookkeeping.
#[derive(Clone, Debug)]
pub struct ApproximateSolution {
    pub u_hat: FourierField,
    pub v_hat: FourierField,
    pub omega: FrequencyVector,
    pub mode_data: ModeData,
    pub modes: ModeSet,
    pub trunc: TruncationSpec,
    /// Residual field ξ̂ (u-block of F at the final iterate).
    pub xi_hat: FourierField,
    /// analytic_norm of the residual pair at β′.
    pub residual_norm: f64,
    pub residual_norm_beta: f64,
    /// Residual mass outside the working box, measured at β′.
    pub tail_norm: f64,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
}

impl ApproximateSolution {
    pub fn pair(&self) -> FieldPair {
        FieldPair {
            u: self.u_hat.clone(),
            v: self.v_hat.clone(),
        }
    }
}

fn remove_sites(f: &FourierField, sites: &ResonantSet) -> FourierField {
    let mut out = FourierField::zero(f.b(), f.d(), f.trunc());
    for (s, a) in f.iter() {
        if !sites.contains(s) {
            out.accumulate(s.clone(), *a);
        }
    }
    out
}

/// ξ = F(u, v; ω) on the working box, with norms at β and β′ and the
/// out-of-box tail at β′.
pub struct ResidualInfo {
    pub xi: FieldPair,
    pub norm_beta: f64,
    pub norm_beta_prime: f64,
    pub tail_norm: f64,
}

pub fn residual(
    u: &FourierField,
    v: &FourierField,
    omega: &FrequencyVector,
    spec: &ProblemSpec,
    modes: &ModeSet,
    measure_tail: bool,
) -> Result<ResidualInfo, NewtonError> {
    let band = u.trunc();
    let xi = evaluate_f(u, v, omega, spec, band)?;
    let norm_beta = xi.analytic_norm(spec.weight_beta);
    let norm_beta_prime = xi.analytic_norm(spec.weight_beta_prime);
    let tail_norm = if measure_tail {
        let wide = TruncationSpec {
            n_max: band.n_max * (2 * spec.power as i32 + 1),
            j_max: band.j_max + 2 * spec.power as i32 * modes.max_mode_radius(),
            newton_iters: band.newton_iters,
        };
        let xi_wide = evaluate_f(u, v, omega, spec, wide)?;
        let mut tail = 0.0;
        for (s, a) in xi_wide.u.iter().chain(xi_wide.v.iter()) {
            if !band.contains(s) {
                tail += (spec.weight_beta_prime * s.j_euclid()).exp() * a.norm();
            }
        }
        tail
    } else {
        0.0
    };
    Ok(ResidualInfo {
        xi,
        norm_beta,
        norm_beta_prime,
        tail_norm,
    })
}

/// One P-step at fixed ω: u ← u − T_N^{-1} F(u)|_{off S}; S-entries and the
/// conjugation symmetry are preserved exactly.
pub fn newton_step(
    u: &FourierField,
    v: &FourierField,
    omega: &FrequencyVector,
    spec: &ProblemSpec,
    res: &ResonantSet,
    index: &SiteIndex,
    opts: &SchemeOptions,
    solve_opts: &SolveOptions,
) -> Result<(FourierField, FourierField, SolveReport), NewtonError> {
    let band = index.trunc();
    let f_all = evaluate_f(u, v, omega, spec, band)?;
    let rhs = FieldPair {
        u: remove_sites(&f_all.u, res),
        v: remove_sites(&f_all.v, res),
    };
    if rhs.u.is_empty() && rhs.v.is_empty() {
        return Ok((
            u.clone(),
            v.clone(),
            SolveReport {
                sigma_min_est: f64::INFINITY,
                norm_ratio: 0.0,
                residual_rel: 0.0,
                retained: 0,
            },
        ));
    }

    let full_retained = 2 * index
        .sites()
        .iter()
        .filter(|s| s.n_l1() <= band.n_max as i64 && !res.contains(s))
        .count();
    let whitelist: Option<HashSet<usize>> = match &opts.domain {
        SolveDomain::Full => None,
        SolveDomain::Fixed(set) => Some((**set).clone()),
        SolveDomain::Auto { cap, hops } => {
            if full_retained <= *cap {
                None
            } else {
                let kernel_trunc = band.expanded(2, 2);
                let uv = convolve_trunc(u, v, kernel_trunc);
                let uu = convolve_trunc(u, u, kernel_trunc);
                let vv = convolve_trunc(v, v, kernel_trunc);
                Some(support_closure(
                    &[&rhs.u, &rhs.v],
                    &[&uv, &uu, &vv],
                    *hops,
                    index,
                ))
            }
        }
    };

    let op = match &whitelist {
        None => assemble_t_n(u, v, omega, spec, index, res, band.n_max)?,
        Some(set) => assemble_t_n_on(u, v, omega, spec, index, res, band.n_max, set)?,
    };
    let factored = op.factor()?;
    let minus_rhs = rhs.scale(Complex64::new(-1.0, 0.0));
    let (delta, report) = factored.solve(&minus_rhs, solve_opts)?;

    let u_next = u.add(&delta.u);
    debug_assert!(res
        .u_sites()
        .iter()
        .all(|s| (u_next.get(s) - u.get(s)).norm() == 0.0));
    let v_next = conjugate_field(&u_next)?;
    Ok((u_next, v_next, report))
}

/// ω_j = j² + (δ/a_j) (û∗v̂)^{∗p}∗û |_{(−e_j, j)}. The restriction makes the
/// numerator odd in a_j, so the quotient is a polynomial in the amplitudes;
/// with phases factored out it is real.
pub fn q_update(
    u: &FourierField,
    v: &FourierField,
    modes: &ModeSet,
    data: &ModeData,
    spec: &ProblemSpec,
) -> Result<FrequencyVector, NewtonError> {
    let res = resonant_set(modes);
    let conv = nonlinear_term(u, v, spec.power, u.trunc());
    let mut omega = Vec::with_capacity(modes.count());
    for k in 0..modes.count() {
        let a = data.amplitude(k);
        if a == 0.0 {
            return Err(NewtonError::ZeroAmplitude { mode: k });
        }
        let val = conv.get(&res.u_sites()[k]) * spec.delta / a;
        if val.im.abs() > 1e-9 * (1.0 + val.re.abs()) {
            return Err(NewtonError::ComplexFrequency {
                mode: k,
                imag: val.im,
            });
        }
        omega.push(modes.mode_j_sq(k) as f64 + val.re);
    }
    Ok(FrequencyVector(omega))
}

/// Builds û^{(0)}, ω^{(0)} and alternates P-steps and Q-updates.
pub fn run_scheme(
    spec: &ProblemSpec,
    modes: &ModeSet,
    data: &ModeData,
    trunc: &TruncationSpec,
    opts: &SchemeOptions,
) -> Result<ApproximateSolution, NewtonError> {
    run_scheme_inner(spec, modes, data, trunc, opts, None, trunc.newton_iters)
}

/// P-steps only, with ω held fixed: the scheme viewed as a function of
/// independent (a, ω), used by derivative probes and the matching map.
pub fn run_p_only(
    spec: &ProblemSpec,
    modes: &ModeSet,
    data: &ModeData,
    omega: &FrequencyVector,
    trunc: &TruncationSpec,
    opts: &SchemeOptions,
    sweeps: usize,
) -> Result<ApproximateSolution, NewtonError> {
    run_scheme_inner(spec, modes, data, trunc, opts, Some(omega.clone()), sweeps)
}

fn run_scheme_inner(
    spec: &ProblemSpec,
    modes: &ModeSet,
    data: &ModeData,
    trunc: &TruncationSpec,
    opts: &SchemeOptions,
    frozen_omega: Option<FrequencyVector>,
    sweeps: usize,
) -> Result<ApproximateSolution, NewtonError> {
    if let Some(k) = data.amplitudes().iter().position(|&a| a == 0.0) {
        return Err(NewtonError::ZeroAmplitude { mode: k });
    }
    let index = build_site_index_dims(modes.count(), modes.dim(), trunc, opts.site_budget)?;
    let res = resonant_set(modes);
    let u0 = initial_field(modes, data, *trunc)?;
    let v0 = conjugate_field(&u0)?;
    let mut u = u0.clone();
    let mut v = v0.clone();
    let mut omega = frozen_omega
        .clone()
        .unwrap_or_else(|| FrequencyVector::unperturbed(modes));

    let target = spec.residual_target();
    let mut info = residual(&u, &v, &omega, spec, modes, opts.measure_tail)?;
    let off_norm = |xi: &FieldPair| -> f64 {
        let off = FieldPair {
            u: remove_sites(&xi.u, &res),
            v: remove_sites(&xi.v, &res),
        };
        off.analytic_norm(spec.weight_beta_prime)
    };
    let mut history = vec![IterationRecord {
        k: 0,
        p_residual_beta_prime: off_norm(&info.xi),
        residual_beta: info.norm_beta,
        residual_beta_prime: info.norm_beta_prime,
        omega: omega.0.clone(),
        tail_norm: info.tail_norm,
        sigma_min_est: f64::NAN,
        norm_ratio: f64::NAN,
    }];

    // Non-generic modes shrink the healthy singular scale: their mirror
    // sites carry divisors of size δ·a_m² by construction, which is not an
    // excision signal. Scale the floor accordingly.
    let amp_scale = (0..modes.count())
        .filter(|&k| !modes.is_generic(k))
        .map(|k| data.amplitude(k).powi(2))
        .fold(1.0_f64, f64::min);
    let scaled_floor = opts.solve.singular_floor * amp_scale;

    let mut iterations = 0;
    for k in 1..=sweeps {
        if opts.stop_at_target && info.norm_beta_prime <= target {
            break;
        }
        // The Γ-determinant control of the small divisors applies from the
        // second sweep on; the first P-step runs at ω^{(0)}, where variety
        // divisors vanish exactly, so its singular floor is relaxed.
        let solve_opts = SolveOptions {
            singular_floor: if k == 1 && frozen_omega.is_none() {
                0.0
            } else {
                scaled_floor
            },
            ..opts.solve
        };
        let (u_next, v_next, report) =
            newton_step(&u, &v, &omega, spec, &res, &index, opts, &solve_opts)?;
        u = u_next;
        v = v_next;
        let p_info = residual(&u, &v, &omega, spec, modes, false)?;
        let p_residual = off_norm(&p_info.xi);

        if frozen_omega.is_none() {
            omega = q_update(&u, &v, modes, data, spec)?;
        }
        let prev = info.norm_beta_prime;
        info = residual(&u, &v, &omega, spec, modes, opts.measure_tail)?;
        iterations = k;
        history.push(IterationRecord {
            k,
            p_residual_beta_prime: p_residual,
            residual_beta: info.norm_beta,
            residual_beta_prime: info.norm_beta_prime,
            omega: omega.0.clone(),
            tail_norm: info.tail_norm,
            sigma_min_est: report.sigma_min_est,
            norm_ratio: report.norm_ratio,
        });
        if info.norm_beta_prime > opts.divergence_factor * prev + 1e-14 {
            return Err(NewtonError::Diverged {
                sweep: k,
                previous: prev,
                current: info.norm_beta_prime,
            });
        }
    }

    if opts.require_target && info.norm_beta_prime > target {
        return Err(NewtonError::NoConvergence {
            sweeps,
            achieved: info.norm_beta_prime,
            target,
        });
    }
    if let Some(c) = opts.closeness_constant {
        let dist = analytic_norm(&u.sub(&u0), spec.weight_beta);
        let bound = c * spec.delta.abs();
        if dist > bound {
            return Err(NewtonError::ClosenessViolated {
                distance: dist,
                bound,
            });
        }
    }

    Ok(ApproximateSolution {
        xi_hat: info.xi.u.clone(),
        residual_norm: info.norm_beta_prime,
        residual_norm_beta: info.norm_beta,
        tail_norm: info.tail_norm,
        u_hat: u,
        v_hat: v,
        omega,
        mode_data: data.clone(),
        modes: modes.clone(),
        trunc: *trunc,
        iterations,
        history,
    })
}

/// Finite-difference report on the residual derivatives, with a and ω
/// treated as independent variables.
#[derive(Clone, Debug, Serialize)]
pub struct DerivativeReport {
    /// ‖∂_{a_j} ξ̃‖_{β′} per mode.
    pub d_amplitude: Vec<f64>,
    /// ‖∂_{ω_j} ξ̃‖_{β′} per mode.
    pub d_frequency: Vec<f64>,
    /// Extrapolated ‖∂_{θ̃} ξ̃‖ for the auxiliary mode as a_tilde → 0.
    pub d_theta_at_zero: Option<f64>,
    pub bound_amplitude: f64,
    pub bound_frequency: f64,
    /// Worst relative disagreement between the h and h/2 stencils.
    pub richardson_defect: f64,
    pub step: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum DerivativeError {
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error("step size {step} outside [1e-6, 1e-3]")]
    BadStep { step: f64 },
    #[error("finite-difference stencils disagree by {defect:.3e} (tolerance {tol:.3e}); step too large")]
    StencilDisagreement { defect: f64, tol: f64 },
}

// Differentiation acts on the off-S residual: on S the Q-equation identity
// F|_S(a, ω(a)) ≡ 0 cancels the chain-rule terms, and the divisor factor
// (n·ω + j²) would otherwise contribute an O(a) ω-derivative there.
fn xi_difference(
    plus: &ApproximateSolution,
    minus: &ApproximateSolution,
    res: &ResonantSet,
    h: f64,
    beta: f64,
) -> f64 {
    let diff = remove_sites(&plus.xi_hat, res).sub(&remove_sites(&minus.xi_hat, res));
    analytic_norm(&diff, beta) / (2.0 * h)
}

/// Central differences of ξ̃ in a_j and ω_j around a converged solution,
/// verified against the bounds δ^r and δ^{r−1}; the auxiliary-mode
/// θ-derivative is extrapolated to a_tilde = 0, where it must vanish.
pub fn derivative_residuals(
    sol: &ApproximateSolution,
    spec: &ProblemSpec,
    h: f64,
    opts: &SchemeOptions,
    sweeps: usize,
) -> Result<DerivativeReport, DerivativeError> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(DerivativeError::BadStep { step: h });
    }
    let probe_opts = SchemeOptions {
        stop_at_target: false,
        require_target: false,
        closeness_constant: None,
        measure_tail: false,
        ..opts.clone()
    };
    let beta = spec.weight_beta_prime;
    let res = resonant_set(&sol.modes);
    let b = sol.modes.count();
    let run = |data: &ModeData,
               omega: &FrequencyVector|
     -> Result<ApproximateSolution, NewtonError> {
        run_p_only(spec, &sol.modes, data, omega, &sol.trunc, &probe_opts, sweeps)
    };

    let mut d_amplitude = Vec::with_capacity(b);
    let mut d_frequency = Vec::with_capacity(b);
    let mut worst_defect: f64 = 0.0;
    for k in 0..b {
        let mut per_h = Vec::new();
        for hh in [h, h / 2.0] {
            let a0 = sol.mode_data.amplitude(k);
            let plus = run(&sol.mode_data.with_amplitude(k, a0 + hh), &sol.omega)?;
            let minus = run(&sol.mode_data.with_amplitude(k, a0 - hh), &sol.omega)?;
            per_h.push(xi_difference(&plus, &minus, &res, hh, beta));
        }
        let defect = (per_h[0] - per_h[1]).abs() / (per_h[1].abs() + spec.residual_target());
        worst_defect = worst_defect.max(defect);
        d_amplitude.push(per_h[1]);

        let mut per_h = Vec::new();
        for hh in [h, h / 2.0] {
            let mut wp = sol.omega.clone();
            wp.0[k] += hh;
            let mut wm = sol.omega.clone();
            wm.0[k] -= hh;
            let plus = run(&sol.mode_data, &wp)?;
            let minus = run(&sol.mode_data, &wm)?;
            per_h.push(xi_difference(&plus, &minus, &res, hh, beta));
        }
        let defect = (per_h[0] - per_h[1]).abs()
            / (per_h[1].abs() + spec.residual_target() / spec.delta.abs());
        worst_defect = worst_defect.max(defect);
        d_frequency.push(per_h[1]);
    }

    // θ-derivative of ξ̃ at vanishing auxiliary amplitude: coefficients at
    // sites with n_tilde ≠ 0 are odd in a_tilde, so ‖n_tilde ξ̂‖ is linear
    // in a_tilde up to O(a³); two evaluations extrapolate to zero.
    let d_theta_at_zero = match sol.modes.aux_index() {
        None => None,
        Some(aux) => {
            let theta_norm = |s: &ApproximateSolution| -> f64 {
                remove_sites(&s.xi_hat, &res)
                    .iter()
                    .map(|(site, a)| {
                        (beta * site.j_euclid()).exp() * a.norm() * site.n[aux].abs() as f64
                    })
                    .sum()
            };
            let h_amp = h.max(1e-5);
            let at = |a: f64| -> Result<f64, NewtonError> {
                let data = sol.mode_data.with_amplitude(aux, a);
                let full = run_scheme_inner(
                    spec,
                    &sol.modes,
                    &data,
                    &sol.trunc,
                    &probe_opts,
                    None,
                    sweeps,
                )?;
                Ok(theta_norm(&full))
            };
            let t1 = at(h_amp)?;
            let t2 = at(h_amp / 2.0)?;
            Some((2.0 * t2 - t1).abs())
        }
    };

    let tol = 0.5;
    if worst_defect > tol {
        return Err(DerivativeError::StencilDisagreement {
            defect: worst_defect,
            tol,
        });
    }
    Ok(DerivativeReport {
        d_amplitude,
        d_frequency,
        d_theta_at_zero,
        bound_amplitude: spec.residual_target(),
        bound_frequency: spec.delta.abs().powf(spec.order - 1.0),
        richardson_defect: worst_defect,
        step: h,
    })
}
