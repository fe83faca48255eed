//! The linearized flow: basis functions w_j = ∂u/∂a_j and ν_j = −(1/a_j)∂u/∂θ_j,
//! their f+γ+g decomposition, spanning diagnostics, and the flow of the
//! equation linearized at the quasi-periodic solution,
//!   i ψ_t = −Δψ + δ(p+1)|u_θ|^{2p} ψ + δp|u_θ|^{2(p−1)}u_θ² ψ̄,
//! which is linear only over R. Basis members come from finite differences
//! of the whole Newton pipeline; members at frequencies outside the mode
//! support are obtained in the vanishing-amplitude limit. Time stepping is
//! Strang splitting with the Laplacian phase exact in Fourier and the
//! potential substep integrated with frozen midpoint coefficients.
//!
//! Note the sign of ν: with coefficients a e^{−iθ}, differentiating in θ
//! produces −i·(plane wave); ν is defined with the opposite sign so that
//! ν_j⁰ = i w_j⁰ + O(δ).

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::field::{FourierField, ModeData, ProblemSpec, SpatialField};
use crate::lattice::{LatticeSite, ModeSet, TruncationSpec};
use crate::newton::{run_p_only, run_scheme, ApproximateSolution, NewtonError, SchemeOptions};

#[derive(Debug, thiserror::Error)]
pub enum LinflowError {
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error("extrapolation disagreement {defect:.3e} above tolerance {tol:.3e}")]
    ExtrapolationDisagreement { defect: f64, tol: f64 },
    #[error("step-halving disagreement {defect:.3e} above tolerance {tol:.3e}")]
    HalvingDisagreement { defect: f64, tol: f64 },
    #[error("Gram matrix ill-conditioned: σ_min/σ_max = {ratio:.3e}")]
    IllConditionedGram { ratio: f64 },
    #[error("defect envelope violated: ‖R(t)‖ = {value:.3e} exceeds {cap:.3e} at t = {t}")]
    EnvelopeViolation { value: f64, cap: f64, t: f64 },
    #[error("mode {0:?} not present in the family")]
    UnknownMode(Vec<i32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MemberKind {
    /// w = ∂u/∂a.
    Amplitude,
    /// ν = −(1/a) ∂u/∂θ.
    Phase,
}

/// One basis function as space-time data: Φ(t,x) = Σ c(n,j) e^{in(θ+ωt)}e^{ijx}
/// + t · Σ g(n,j) e^{in(θ+ωt)}e^{ijx}, with g = û·(i n·∂ω/∂a) the secular part.
#[derive(Clone, Debug)]
pub struct BasisMember {
    pub mode_j: Vec<i32>,
    pub kind: MemberKind,
    pub coeff: FourierField,
    pub secular: FourierField,
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    pub domega: Vec<f64>,
}

fn slice_into(
    f: &FourierField,
    omega: &[f64],
    theta: &[f64],
    t: f64,
    out: &mut SpatialField,
    weight_n_omega: bool,
    scale: Complex64,
) {
    for (s, a) in f.iter() {
        let mut phase = 0.0;
        let mut nw = 0.0;
        for (k, &nk) in s.n.iter().enumerate() {
            phase += nk as f64 * (theta[k] + omega[k] * t);
            nw += nk as f64 * omega[k];
        }
        let mut v = a * Complex64::new(0.0, phase).exp() * scale;
        if weight_n_omega {
            v *= Complex64::new(0.0, nw);
        }
        out.add_at(&s.j, v);
    }
}

impl BasisMember {
    /// Spatial profile Φ(t, ·) on the cube ‖j‖_∞ ≤ j_max.
    pub fn spatial_profile(&self, t: f64, j_max: i32) -> SpatialField {
        let mut out = SpatialField::zero(self.coeff.d(), j_max);
        slice_into(&self.coeff, &self.omega, &self.theta, t, &mut out, false, Complex64::ONE);
        slice_into(
            &self.secular,
            &self.omega,
            &self.theta,
            t,
            &mut out,
            false,
            Complex64::new(t, 0.0),
        );
        out
    }

    /// ∂Φ/∂t (t, ·): phases contribute i(n·ω), the secular factor its own
    /// product rule term.
    pub fn time_derivative_profile(&self, t: f64, j_max: i32) -> SpatialField {
        let mut out = SpatialField::zero(self.coeff.d(), j_max);
        slice_into(&self.coeff, &self.omega, &self.theta, t, &mut out, true, Complex64::ONE);
        slice_into(&self.secular, &self.omega, &self.theta, t, &mut out, false, Complex64::ONE);
        slice_into(
            &self.secular,
            &self.omega,
            &self.theta,
            t,
            &mut out,
            true,
            Complex64::new(t, 0.0),
        );
        out
    }
}

#[derive(Clone, Debug)]
pub struct FamilyOptions {
    /// Central-difference step for amplitude derivatives of tracked modes.
    pub h: f64,
    /// Evaluation amplitude for the vanishing-amplitude extensions.
    pub h_ext: f64,
    /// Newton sweeps for every finite-difference run (fixed, no early exit).
    pub sweeps: usize,
    /// Spanning is certified on the spatial cube ‖j‖_∞ ≤ spatial_band.
    pub spatial_band: i32,
    /// Floor on the Gram minimum singular value.
    pub gram_floor: f64,
    /// Relative Richardson tolerance for the finite differences.
    pub extrapolation_tol: f64,
}

impl FamilyOptions {
    pub fn for_spec(spec: &ProblemSpec) -> Self {
        Self {
            h: 1e-4,
            h_ext: (5.0 * spec.delta.abs()).min(1e-2),
            sweeps: 3,
            spatial_band: 3,
            gram_floor: 0.5,
            extrapolation_tol: 0.5,
        }
    }
}

/// The basis family over a spatial cube: per frequency one (w, ν) pair,
/// with the Gram matrix of the real-linear span at t = 0.
pub struct BasisFamily {
    pub members: Vec<(BasisMember, BasisMember)>,
    pub gram: DMatrix<f64>,
    pub min_singular: f64,
    pub ivnu_defect: f64,
    pub spatial_band: i32,
}

fn lift_field(f: &FourierField, trunc: TruncationSpec) -> FourierField {
    let mut out = FourierField::zero(f.b() + 1, f.d(), trunc);
    for (s, a) in f.iter() {
        let mut n = s.n.clone();
        n.push(0);
        out.accumulate(LatticeSite::new(n, s.j.clone()), *a);
    }
    out
}

fn field_diff_scale(a: &FourierField, b: &FourierField, inv: f64) -> FourierField {
    a.sub(b).scale(Complex64::new(inv, 0.0))
}

/// ν from a solution field: ν̂(n, j) = (−i n_k / a_k) û(n, j).
fn nu_field(u: &FourierField, k: usize, a: f64) -> FourierField {
    let mut out = FourierField::zero(u.b(), u.d(), u.trunc());
    for (s, amp) in u.iter() {
        if s.n[k] != 0 {
            out.accumulate(
                s.clone(),
                amp * Complex64::new(0.0, -(s.n[k] as f64) / a),
            );
        }
    }
    out
}

fn secular_field(u: &FourierField, domega: &[f64]) -> FourierField {
    let mut out = FourierField::zero(u.b(), u.d(), u.trunc());
    for (s, amp) in u.iter() {
        let nw: f64 = s
            .n
            .iter()
            .zip(domega)
            .map(|(&n, &w)| n as f64 * w)
            .sum();
        if nw != 0.0 {
            out.accumulate(s.clone(), amp * Complex64::new(0.0, nw));
        }
    }
    out
}

/// (w, ν) for a tracked mode, by central differences of the full scheme
/// with Richardson extrapolation; ν is analytic in the phases.
pub fn basis_functions(
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    opts: &SchemeOptions,
    fam: &FamilyOptions,
    k: usize,
) -> Result<(BasisMember, BasisMember), LinflowError> {
    let probe = SchemeOptions::probe(spec);
    let _ = opts;
    let h = fam.h;
    let a0 = base.mode_data.amplitude(k);
    let run = |a: f64| -> Result<ApproximateSolution, NewtonError> {
        crate::newton::run_scheme(
            spec,
            &base.modes,
            &base.mode_data.with_amplitude(k, a),
            &base.trunc,
            &SchemeOptions {
                stop_at_target: false,
                require_target: false,
                closeness_constant: None,
                measure_tail: false,
                ..probe.clone()
            },
        )
    };
    let mut diffs = Vec::new();
    let mut domegas = Vec::new();
    for hh in [h, h / 2.0] {
        let plus = run(a0 + hh)?;
        let minus = run(a0 - hh)?;
        diffs.push(field_diff_scale(&plus.u_hat, &minus.u_hat, 0.5 / hh));
        domegas.push(
            plus.omega
                .0
                .iter()
                .zip(&minus.omega.0)
                .map(|(p, m)| (p - m) * 0.5 / hh)
                .collect::<Vec<f64>>(),
        );
    }
    // Richardson: (4 D_{h/2} − D_h)/3 kills the O(h²) term.
    let coeff = diffs[1]
        .scale(Complex64::new(4.0 / 3.0, 0.0))
        .sub(&diffs[0].scale(Complex64::new(1.0 / 3.0, 0.0)));
    let defect = crate::field::analytic_norm(&diffs[0].sub(&diffs[1]), 0.0)
        / (crate::field::analytic_norm(&diffs[1], 0.0) + 1e-30);
    if defect > fam.extrapolation_tol {
        return Err(LinflowError::ExtrapolationDisagreement {
            defect,
            tol: fam.extrapolation_tol,
        });
    }
    let domega: Vec<f64> = domegas[1]
        .iter()
        .zip(&domegas[0])
        .map(|(d2, d1)| (4.0 * d2 - d1) / 3.0)
        .collect();
    let w = BasisMember {
        mode_j: base.modes.mode(k).to_vec(),
        kind: MemberKind::Amplitude,
        coeff,
        secular: secular_field(&base.u_hat, &domega),
        omega: base.omega.0.clone(),
        theta: base.mode_data.phases().to_vec(),
        domega: domega.clone(),
    };
    let nu = BasisMember {
        mode_j: base.modes.mode(k).to_vec(),
        kind: MemberKind::Phase,
        coeff: nu_field(&base.u_hat, k, a0),
        secular: FourierField::zero(base.u_hat.b(), base.u_hat.d(), base.trunc),
        omega: base.omega.0.clone(),
        theta: base.mode_data.phases().to_vec(),
        domega: vec![0.0; base.modes.count()],
    };
    Ok((w, nu))
}

/// (w, ν) for a frequency outside the tracked modes, in the limit of
/// vanishing amplitude: evaluated at a ∈ {h, h/2} and extrapolated to 0.
pub fn basis_functions_extension(
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    fam: &FamilyOptions,
    j: &[i32],
) -> Result<(BasisMember, BasisMember), LinflowError> {
    let b = base.modes.count();
    let within_ball =
        j.iter().map(|&v| v.abs()).max().unwrap_or(0) <= base.modes.support_radius();
    let ext_modes = if within_ball {
        ModeSet::new(
            base.modes
                .modes()
                .iter()
                .cloned()
                .chain([j.to_vec()])
                .collect(),
            base.modes.generic_indices().to_vec(),
            base.modes.support_radius(),
        )
        .map_err(NewtonError::Lattice)?
    } else {
        base.modes
            .clone()
            .with_aux(j.to_vec())
            .map_err(NewtonError::Lattice)?
    };
    let probe = SchemeOptions {
        stop_at_target: false,
        require_target: false,
        closeness_constant: None,
        measure_tail: false,
        ..SchemeOptions::probe(spec)
    };
    let h = fam.h_ext;
    let run = |a: f64| -> Result<ApproximateSolution, NewtonError> {
        let data = ModeData::new(
            base.mode_data
                .amplitudes()
                .iter()
                .cloned()
                .chain([a])
                .collect(),
            base.mode_data.phases().iter().cloned().chain([0.0]).collect(),
        )?;
        run_scheme(spec, &ext_modes, &data, &base.trunc, &probe)
    };
    let sol_h = run(h)?;
    let sol_h2 = run(h / 2.0)?;
    let u0 = lift_field(&base.u_hat, base.trunc);

    // Amplitude derivative: one-sided quotients extrapolated to a = 0;
    // D(a) = ∂u + O(a), so 2D(h/2) − D(h) = ∂u + O(h²).
    let d1 = field_diff_scale(&sol_h.u_hat, &u0, 1.0 / h);
    let d2 = field_diff_scale(&sol_h2.u_hat, &u0, 2.0 / h);
    let coeff = d2.scale(Complex64::new(2.0, 0.0)).sub(&d1);
    let defect = crate::field::analytic_norm(&d1.sub(&d2), 0.0)
        / (crate::field::analytic_norm(&d2, 0.0) + 1e-30);
    if defect > fam.extrapolation_tol {
        return Err(LinflowError::ExtrapolationDisagreement {
            defect,
            tol: fam.extrapolation_tol,
        });
    }
    // Frequencies at a → 0: ω is even in the vanishing amplitude, so the
    // plain extrapolation is O(h⁴)-accurate.
    let omega0: Vec<f64> = sol_h2
        .omega
        .0
        .iter()
        .zip(&sol_h.omega.0)
        .map(|(w2, w1)| (4.0 * w2 - w1) / 3.0)
        .collect();
    let domega: Vec<f64> = {
        let dw1: Vec<f64> = sol_h
            .omega
            .0
            .iter()
            .zip(&omega0)
            .map(|(w, w0)| (w - w0) / h)
            .collect();
        let dw2: Vec<f64> = sol_h2
            .omega
            .0
            .iter()
            .zip(&omega0)
            .map(|(w, w0)| (w - w0) * 2.0 / h)
            .collect();
        dw2.iter().zip(&dw1).map(|(b2, b1)| 2.0 * b2 - b1).collect()
    };
    let theta: Vec<f64> = base.mode_data.phases().iter().cloned().chain([0.0]).collect();

    let n1 = nu_field(&sol_h.u_hat, b, h);
    let n2 = nu_field(&sol_h2.u_hat, b, h / 2.0);
    let nu_coeff = n2.scale(Complex64::new(2.0, 0.0)).sub(&n1);

    let zero = FourierField::zero(b + 1, base.u_hat.d(), base.trunc);
    let w = BasisMember {
        mode_j: j.to_vec(),
        kind: MemberKind::Amplitude,
        coeff,
        secular: secular_field(&u0, &domega),
        omega: omega0.clone(),
        theta: theta.clone(),
        domega,
    };
    let nu = BasisMember {
        mode_j: j.to_vec(),
        kind: MemberKind::Phase,
        coeff: nu_coeff,
        secular: zero,
        omega: omega0,
        theta,
        domega: vec![0.0; b + 1],
    };
    Ok((w, nu))
}

fn cube_frequencies(d: usize, band: i32) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let mut cur = vec![0i32; d];
    fn rec(slot: usize, band: i32, cur: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
        if slot == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in -band..=band {
            cur[slot] = v;
            rec(slot + 1, band, cur, out);
        }
    }
    rec(0, band, &mut cur, &mut out);
    out
}

/// Builds the (w, ν) family over the whole spatial cube and its Gram data.
pub fn build_basis_family(
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    opts: &SchemeOptions,
    fam: &FamilyOptions,
) -> Result<BasisFamily, LinflowError> {
    let d = base.modes.dim();
    let mut members = Vec::new();
    for j in cube_frequencies(d, fam.spatial_band) {
        let tracked = base.modes.modes().iter().position(|m| m == &j);
        let pair = match tracked {
            Some(k) => basis_functions(base, spec, opts, fam, k)?,
            None => basis_functions_extension(base, spec, fam, &j)?,
        };
        members.push(pair);
    }
    let band = fam.spatial_band;
    let profiles: Vec<SpatialField> = members
        .iter()
        .flat_map(|(w, nu)| [w.spatial_profile(0.0, band), nu.spatial_profile(0.0, band)])
        .collect();
    let m = profiles.len();
    let gram = DMatrix::from_fn(m, m, |i, j| profiles[i].real_inner(&profiles[j]));
    let eigen = gram.clone().symmetric_eigen();
    let min_singular = eigen
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let ivnu_defect = members
        .iter()
        .map(|(w, nu)| {
            let wp = w.spatial_profile(0.0, band).scale(Complex64::new(0.0, 1.0));
            nu.spatial_profile(0.0, band).sub(&wp).l2_norm()
        })
        .fold(0.0, f64::max);
    Ok(BasisFamily {
        members,
        gram,
        min_singular,
        ivnu_defect,
        spatial_band: band,
    })
}

/// Pass iff the Gram minimum singular value clears the configured floor.
pub fn gram_spanning_check(family: &BasisFamily, floor: f64) -> (f64, bool) {
    (family.min_singular, family.min_singular >= floor)
}

/// The f + γ + g split of an amplitude member: f is the explicit
/// coefficient derivative at frozen ω, γ the through-ω part, g the secular
/// part carrying the factor t.
#[derive(Clone, Debug)]
pub struct FggReport {
    pub f: FourierField,
    pub gamma: FourierField,
    pub g: FourierField,
    pub gamma_norm: f64,
    pub secular_norm: f64,
    /// sup-tail Σ_{|j−j′| > A} e^{β″|j−j′|}(|f̂+γ̂| + |ĝ|) at the given A.
    pub tail_coeff: f64,
    pub tail_secular: f64,
}

pub fn decompose_fgg(
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    fam: &FamilyOptions,
    member: &BasisMember,
    k: usize,
    tail_radius: f64,
    beta_tail: f64,
) -> Result<FggReport, LinflowError> {
    let probe = SchemeOptions {
        stop_at_target: false,
        require_target: false,
        closeness_constant: None,
        measure_tail: false,
        ..SchemeOptions::probe(spec)
    };
    let h = fam.h;
    let a0 = base.mode_data.amplitude(k);
    let run = |a: f64| -> Result<ApproximateSolution, NewtonError> {
        run_p_only(
            spec,
            &base.modes,
            &base.mode_data.with_amplitude(k, a),
            &base.omega,
            &base.trunc,
            &probe,
            fam.sweeps,
        )
    };
    let mut diffs = Vec::new();
    for hh in [h, h / 2.0] {
        let plus = run(a0 + hh)?;
        let minus = run(a0 - hh)?;
        diffs.push(field_diff_scale(&plus.u_hat, &minus.u_hat, 0.5 / hh));
    }
    let f = diffs[1]
        .scale(Complex64::new(4.0 / 3.0, 0.0))
        .sub(&diffs[0].scale(Complex64::new(1.0 / 3.0, 0.0)));
    let gamma = member.coeff.sub(&f);
    let g = member.secular.clone();
    let beta_prime = spec.weight_beta_prime;
    let jprime = &member.mode_j;
    let tail = |field: &FourierField| -> f64 {
        field
            .iter()
            .filter(|(s, _)| {
                let dist: f64 = s
                    .j
                    .iter()
                    .zip(jprime)
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist > tail_radius
            })
            .map(|(s, a)| {
                let dist: f64 = s
                    .j
                    .iter()
                    .zip(jprime)
                    .map(|(&x, &y)| ((x - y) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (beta_tail * dist).exp() * a.norm()
            })
            .sum()
    };
    Ok(FggReport {
        gamma_norm: crate::field::analytic_norm(&gamma, beta_prime),
        secular_norm: crate::field::analytic_norm(&g, beta_prime),
        tail_coeff: tail(&member.coeff),
        tail_secular: tail(&g),
        f,
        gamma,
        g,
    })
}

/// Real-linear least-squares expansion ψ ≈ Σ α_j ν_j⁰ + β_j w_j⁰ with
/// α, β ∈ R; returns the coefficients and the reconstruction residual.
pub struct ExpandResult {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub residual: f64,
}

pub fn expand_in_basis(
    psi: &SpatialField,
    family: &BasisFamily,
) -> Result<ExpandResult, LinflowError> {
    let band = family.spatial_band;
    let cube = SpatialField::zero(psi.d(), band);
    let dim = cube.len();
    let m = family.members.len();
    // Columns: [ν profiles | w profiles] over stacked (Re, Im) coordinates.
    let mut a = DMatrix::zeros(2 * dim, 2 * m);
    for (col, (w, nu)) in family.members.iter().enumerate() {
        let np = nu.spatial_profile(0.0, band);
        let wp = w.spatial_profile(0.0, band);
        for i in 0..dim {
            a[(i, col)] = np.coeffs()[i].re;
            a[(dim + i, col)] = np.coeffs()[i].im;
            a[(i, m + col)] = wp.coeffs()[i].re;
            a[(dim + i, m + col)] = wp.coeffs()[i].im;
        }
    }
    let mut rhs = DMatrix::zeros(2 * dim, 1);
    for i in 0..dim {
        rhs[(i, 0)] = psi.get(&cube.j_of(i)).re;
        rhs[(dim + i, 0)] = psi.get(&cube.j_of(i)).im;
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if smax == 0.0 || smin / smax < 1e-10 {
        return Err(LinflowError::IllConditionedGram { ratio: smin / smax });
    }
    let x = svd.solve(&rhs, 0.0).expect("svd solve");
    let resid = (&a * &x - &rhs).norm();
    Ok(ExpandResult {
        alpha: (0..m).map(|i| x[(i, 0)]).collect(),
        beta: (0..m).map(|i| x[(m + i, 0)]).collect(),
        residual: resid,
    })
}

/// Spatial coefficients of the two linearization potentials at time t:
/// V₁ = δ(p+1)|u(t)|^{2p} and V₂ = δp|u(t)|^{2(p−1)}u(t)².
pub fn potential_slices(
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    t: f64,
    j_max: i32,
) -> (SpatialField, SpatialField) {
    let d = base.modes.dim();
    let mut s = SpatialField::zero(d, j_max);
    slice_into(
        &base.u_hat,
        &base.omega.0,
        base.mode_data.phases(),
        t,
        &mut s,
        false,
        Complex64::ONE,
    );
    potentials_from_slice(&s, spec)
}

fn potentials_from_slice(s: &SpatialField, spec: &ProblemSpec) -> (SpatialField, SpatialField) {
    let sbar = s.conj_reflect();
    let uv = s.convolve(&sbar);
    let p = spec.power;
    let mut uv_p = uv.clone();
    for _ in 1..p {
        uv_p = uv_p.convolve(&uv);
    }
    let v1 = uv_p.scale(Complex64::new(spec.delta * (p as f64 + 1.0), 0.0));
    let mut uv_pm1 = None;
    if p > 1 {
        let mut acc = uv.clone();
        for _ in 2..p {
            acc = acc.convolve(&uv);
        }
        uv_pm1 = Some(acc);
    }
    let ss = s.convolve(s);
    let v2base = match uv_pm1 {
        None => ss,
        Some(acc) => acc.convolve(&ss),
    };
    let v2 = v2base.scale(Complex64::new(spec.delta * p as f64, 0.0));
    (v1, v2)
}

#[derive(Clone, Copy, Debug)]
pub struct FlowOptions {
    pub dt: f64,
    pub halving_tol: f64,
    pub check_halving: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            halving_tol: 1e-7,
            check_halving: false,
        }
    }
}

pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpatialField>,
    /// max over samples of ‖ψ(t)‖/‖ψ(0)‖ in L².
    pub sup_gain: f64,
    pub halving_defect: f64,
}

// Incremental evaluator of the time slice of û: per entry the phase
// advances by n·ω·dt each step, so one complex multiply replaces the
// exponentials.
struct SliceWalker {
    j: Vec<Vec<i32>>,
    value: Vec<Complex64>,
    rot: Vec<Complex64>,
}

impl SliceWalker {
    fn new(f: &FourierField, omega: &[f64], theta: &[f64], t0: f64, dt: f64) -> Self {
        let mut j = Vec::with_capacity(f.len());
        let mut value = Vec::with_capacity(f.len());
        let mut rot = Vec::with_capacity(f.len());
        for (s, a) in f.iter() {
            let mut phase = 0.0;
            let mut nw = 0.0;
            for (k, &nk) in s.n.iter().enumerate() {
                phase += nk as f64 * (theta[k] + omega[k] * t0);
                nw += nk as f64 * omega[k];
            }
            j.push(s.j.clone());
            value.push(a * Complex64::new(0.0, phase).exp());
            rot.push(Complex64::new(0.0, nw * dt).exp());
        }
        Self { j, value, rot }
    }

    fn advance(&mut self) {
        for (v, r) in self.value.iter_mut().zip(&self.rot) {
            *v *= r;
        }
    }

    fn slice(&self, d: usize, j_max: i32) -> SpatialField {
        let mut out = SpatialField::zero(d, j_max);
        for (j, v) in self.j.iter().zip(&self.value) {
            out.add_at(j, *v);
        }
        out
    }
}

fn apply_potential_rhs(
    v1: &SpatialField,
    v2: &SpatialField,
    psi: &SpatialField,
) -> SpatialField {
    let coupled = v1
        .convolve(psi)
        .add(&v2.convolve(&psi.conj_reflect()))
        .restricted(psi.j_max());
    coupled.scale(Complex64::new(0.0, -1.0))
}

fn rk4_potential_step(
    v1: &SpatialField,
    v2: &SpatialField,
    psi: &SpatialField,
    dt: f64,
) -> SpatialField {
    let k1 = apply_potential_rhs(v1, v2, psi);
    let k2 = apply_potential_rhs(v1, v2, &psi.add(&k1.scale(Complex64::new(dt / 2.0, 0.0))));
    let k3 = apply_potential_rhs(v1, v2, &psi.add(&k2.scale(Complex64::new(dt / 2.0, 0.0))));
    let k4 = apply_potential_rhs(v1, v2, &psi.add(&k3.scale(Complex64::new(dt, 0.0))));
    psi.add(
        &k1.add(&k2.scale(Complex64::new(2.0, 0.0)))
            .add(&k3.scale(Complex64::new(2.0, 0.0)))
            .add(&k4)
            .scale(Complex64::new(dt / 6.0, 0.0)),
    )
}

fn laplacian_phase(psi: &mut SpatialField, dt: f64) {
    let n = psi.len();
    for i in 0..n {
        let j = psi.j_of(i);
        let jsq: f64 = j.iter().map(|&v| (v as f64).powi(2)).sum();
        let c = psi.coeffs()[i] * Complex64::new(0.0, -jsq * dt).exp();
        psi.coeffs_mut()[i] = c;
    }
}

fn evolve_once(
    psi0: &SpatialField,
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    t0: f64,
    samples: &[f64],
    dt: f64,
) -> Trajectory {
    let d = psi0.d();
    let band = psi0.j_max();
    let vband = band + base.trunc.j_max;
    let mut psi = psi0.clone();
    let norm0 = psi0.l2_norm();
    let mut times = Vec::with_capacity(samples.len());
    let mut states = Vec::with_capacity(samples.len());
    let mut sup_gain: f64 = 0.0;
    let mut t = t0;
    for &target in samples {
        if (target - t).abs() > 0.0 {
            let span = target - t;
            let steps = (span.abs() / dt).ceil().max(1.0) as usize;
            let step = span / steps as f64;
            // Potentials are frozen at each midpoint; the walker advances
            // the slice phases incrementally.
            let mut walker = SliceWalker::new(
                &base.u_hat,
                &base.omega.0,
                base.mode_data.phases(),
                t + step / 2.0,
                step,
            );
            for _ in 0..steps {
                laplacian_phase(&mut psi, step / 2.0);
                let s = walker.slice(d, vband);
                let (v1, v2) = potentials_from_slice(&s, spec);
                psi = rk4_potential_step(&v1, &v2, &psi, step);
                laplacian_phase(&mut psi, step / 2.0);
                walker.advance();
            }
            t = target;
        }
        times.push(t);
        if norm0 > 0.0 {
            sup_gain = sup_gain.max(psi.l2_norm() / norm0);
        }
        states.push(psi.clone());
    }
    Trajectory {
        times,
        states,
        sup_gain,
        halving_defect: 0.0,
    }
}

/// Integrates the real-linear flow from t0 through the sample times
/// (monotone, forward or backward). With halving enabled the run is
/// repeated at dt/2 and the endpoint disagreement must clear the
/// tolerance.
pub fn evolve_linearized(
    psi0: &SpatialField,
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    t0: f64,
    samples: &[f64],
    fo: &FlowOptions,
) -> Result<Trajectory, LinflowError> {
    let mut traj = evolve_once(psi0, base, spec, t0, samples, fo.dt);
    if fo.check_halving && !samples.is_empty() {
        let fine = evolve_once(psi0, base, spec, t0, samples, fo.dt / 2.0);
        let defect = traj
            .states
            .last()
            .unwrap()
            .sub(fine.states.last().unwrap())
            .l2_norm()
            / psi0.l2_norm().max(1e-300);
        traj.halving_defect = defect;
        if defect > fo.halving_tol {
            return Err(LinflowError::HalvingDisagreement {
                defect,
                tol: fo.halving_tol,
            });
        }
    }
    Ok(traj)
}

/// The defect R = iΦ_t + ΔΦ − V₁Φ − V₂Φ̄ of a basis member at time t,
/// evaluated spectrally on the cube.
pub fn member_defect(
    member: &BasisMember,
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    t: f64,
    j_max: i32,
) -> SpatialField {
    let phi = member.spatial_profile(t, j_max);
    let dphi = member.time_derivative_profile(t, j_max);
    let (v1, v2) = potential_slices(base, spec, t, j_max + base.trunc.j_max);
    let mut out = dphi.scale(Complex64::new(0.0, 1.0));
    for i in 0..phi.len() {
        let j = phi.j_of(i);
        let jsq: f64 = j.iter().map(|&v| (v as f64).powi(2)).sum();
        out.add_at(&j, -jsq * phi.coeffs()[i]);
    }
    out = out.sub(&v1.convolve(&phi).restricted(j_max));
    out.sub(&v2.convolve(&phi.conj_reflect()).restricted(j_max))
}

#[derive(Clone, Debug, Serialize)]
pub struct DuhamelReport {
    /// max over members and grid times of ‖R(t)‖/((1+|t|)δ^r).
    pub envelope_constant: f64,
    /// max over the grid of the Duhamel identity residual.
    pub identity_residual: f64,
    pub grid: Vec<f64>,
}

/// Checks the defect envelope ‖R(t)‖ ≤ C(1+|t|)δ^r over the grid, then the
/// variation-of-constants identity Ψ(t) = S(t)ψ − i∫₀ᵗ S(t)S⁻¹(τ)R_Ψ(τ)dτ
/// for a combination Ψ of basis members, by Simpson quadrature with one
/// forward propagation per node.
pub fn duhamel_basis_check(
    family: &BasisFamily,
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    t_end: f64,
    grid_n: usize,
    envelope_cap: f64,
    fo: &FlowOptions,
) -> Result<DuhamelReport, LinflowError> {
    assert!(grid_n >= 2 && grid_n % 2 == 0, "even Simpson grid required");
    let band = family.spatial_band;
    let target = spec.residual_target();
    let grid: Vec<f64> = (0..=grid_n)
        .map(|i| t_end * i as f64 / grid_n as f64)
        .collect();

    let mut envelope_constant: f64 = 0.0;
    for (w, nu) in &family.members {
        for member in [w, nu] {
            for &t in &grid {
                let r = member_defect(member, base, spec, t, band);
                let ratio = r.analytic_norm(spec.weight_beta_prime) / ((1.0 + t.abs()) * target);
                if ratio > envelope_cap {
                    return Err(LinflowError::EnvelopeViolation {
                        value: ratio,
                        cap: envelope_cap,
                        t,
                    });
                }
                envelope_constant = envelope_constant.max(ratio);
            }
        }
    }

    // Ψ from the first two member pairs with fixed real coefficients.
    let take = family.members.len().min(2);
    let combo: Vec<(f64, &BasisMember)> = family.members[..take]
        .iter()
        .flat_map(|(w, nu)| [(0.6, w), (-0.3, nu)])
        .collect();
    let psi0: SpatialField = combo.iter().fold(SpatialField::zero(base.modes.dim(), band), |acc, (c, m)| {
        acc.add(&m.spatial_profile(0.0, band).scale(Complex64::new(*c, 0.0)))
    });
    let psi_at = |t: f64| -> SpatialField {
        combo
            .iter()
            .fold(SpatialField::zero(base.modes.dim(), band), |acc, (c, m)| {
                acc.add(&m.spatial_profile(t, band).scale(Complex64::new(*c, 0.0)))
            })
    };
    let defect_at = |t: f64| -> SpatialField {
        combo
            .iter()
            .fold(SpatialField::zero(base.modes.dim(), band), |acc, (c, m)| {
                acc.add(&member_defect(m, base, spec, t, band).scale(Complex64::new(*c, 0.0)))
            })
    };

    // Propagate ψ0 and each node defect forward, sampling at the grid.
    let u_traj = evolve_linearized(&psi0, base, spec, 0.0, &grid, fo)?;
    let mut node_runs: Vec<Vec<SpatialField>> = Vec::with_capacity(grid.len());
    for (i, &tau) in grid.iter().enumerate() {
        let r_tau = defect_at(tau);
        let rest: Vec<f64> = grid[i..].to_vec();
        let traj = evolve_linearized(&r_tau, base, spec, tau, &rest, fo)?;
        node_runs.push(traj.states);
    }

    let mut identity_residual: f64 = 0.0;
    let h = t_end / grid_n as f64;
    for (gi, &t) in grid.iter().enumerate() {
        if gi == 0 || gi % 2 != 0 {
            continue; // Simpson needs an even number of panels up to t.
        }
        // ∫₀ᵗ S(t)S⁻¹(τ)R(τ)dτ, Simpson over τ = grid[0..=gi].
        let mut integral = SpatialField::zero(base.modes.dim(), band);
        for (ni, run) in node_runs.iter().enumerate().take(gi + 1) {
            let weight = if ni == 0 || ni == gi {
                1.0
            } else if ni % 2 == 1 {
                4.0
            } else {
                2.0
            };
            // run[k] holds the state at grid[ni + k]; we need it at grid[gi].
            let state = &run[gi - ni];
            integral = integral.add(&state.scale(Complex64::new(weight * h / 3.0, 0.0)));
        }
        let predicted = u_traj.states[gi].add(&integral.scale(Complex64::new(0.0, -1.0)));
        let actual = psi_at(t);
        identity_residual = identity_residual.max(actual.sub(&predicted).l2_norm());
    }

    Ok(DuhamelReport {
        envelope_constant,
        identity_residual,
        grid,
    })
}

/// S_{θ+ωT}(−T) S_θ(T) = 1: evolve forward then backward and compare.
pub fn cocycle_residual(
    psi0: &SpatialField,
    base: &ApproximateSolution,
    spec: &ProblemSpec,
    t_end: f64,
    fo: &FlowOptions,
) -> Result<f64, LinflowError> {
    let fwd = evolve_linearized(psi0, base, spec, 0.0, &[t_end], fo)?;
    let back = evolve_linearized(&fwd.states[0], base, spec, t_end, &[0.0], fo)?;
    Ok(back.states[0].sub(psi0).l2_norm() / psi0.l2_norm().max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ModeData;
    use crate::lattice::ModeSet;

    fn spec(delta: f64) -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            power: 1,
            delta,
            order: 3.0,
            weight_beta: 0.4,
            weight_beta_prime: 0.2,
            epsilon: 1e-3,
        }
    }

    fn base_solution(delta: f64) -> (ProblemSpec, ApproximateSolution, SchemeOptions) {
        let sp = spec(delta);
        let modes = ModeSet::new(vec![vec![1], vec![-2]], vec![0, 1], 2).unwrap();
        let data = ModeData::new(vec![0.5, 0.4], vec![0.3, 5.0]).unwrap();
        let t = TruncationSpec::new(3, 8, 3).unwrap();
        let mut opts = SchemeOptions::for_spec(&sp);
        opts.require_target = false;
        opts.stop_at_target = false;
        opts.measure_tail = false;
        let sol = run_scheme(&sp, &modes, &data, &t, &opts).unwrap();
        (sp, sol, opts)
    }

    #[test]
    fn basis_at_zero_coupling_is_exact() {
        let (sp, sol, opts) = base_solution(0.0);
        let fam = FamilyOptions {
            spatial_band: 2,
            ..FamilyOptions::for_spec(&sp)
        };
        let (w, nu) = basis_functions(&sol, &sp, &opts, &fam, 0).unwrap();
        // w_j⁰(x) = e^{−iθ}e^{ijx}: a single unit coefficient at mode 1.
        let wp = w.spatial_profile(0.0, 2);
        let expect = Complex64::new(0.0, -sol.mode_data.phase(0)).exp();
        assert!((wp.get(&[1]) - expect).norm() < 1e-11);
        assert!((wp.l2_norm() - 1.0).abs() < 1e-11);
        // ν_j⁰ = i w_j⁰ exactly at δ = 0.
        let np = nu.spatial_profile(0.0, 2);
        assert!((np.get(&[1]) - Complex64::new(0.0, 1.0) * expect).norm() < 1e-11);
        // No secular part.
        assert!(w.secular.is_empty() || w.secular.max_abs() < 1e-14);
    }

    #[test]
    fn basis_leading_structure_at_small_coupling() {
        // f_{j'} = e^{−i(θ+ωt)}e^{ij'x} + O(δ) for unconnected j'.
        let (sp, sol, opts) = base_solution(1e-2);
        let fam = FamilyOptions {
            spatial_band: 2,
            ..FamilyOptions::for_spec(&sp)
        };
        let (w, nu) = basis_functions(&sol, &sp, &opts, &fam, 0).unwrap();
        let wp = w.spatial_profile(0.0, 2);
        let expect = Complex64::new(0.0, -sol.mode_data.phase(0)).exp();
        assert!(
            (wp.get(&[1]) - expect).norm() < 10.0 * sp.delta,
            "leading coefficient off: {}",
            (wp.get(&[1]) - expect).norm()
        );
        // ν − i w = O(δ).
        let defect = nu
            .spatial_profile(0.0, 2)
            .sub(&wp.scale(Complex64::new(0.0, 1.0)))
            .l2_norm();
        assert!(defect <= 10.0 * sp.delta, "defect {defect}");
    }

    #[test]
    fn extension_member_at_zero_coupling() {
        let (sp, sol, _) = base_solution(0.0);
        let fam = FamilyOptions {
            spatial_band: 2,
            h_ext: 1e-3,
            ..FamilyOptions::for_spec(&sp)
        };
        let (w, nu) = basis_functions_extension(&sol, &sp, &fam, &[0]).unwrap();
        let wp = w.spatial_profile(0.0, 2);
        assert!((wp.get(&[0]) - Complex64::ONE).norm() < 1e-12);
        let np = nu.spatial_profile(0.0, 2);
        assert!((np.get(&[0]) - Complex64::new(0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn decompose_fgg_structure() {
        // δ = 0: γ = g = 0 identically.
        let (sp0, sol0, _) = base_solution(0.0);
        let fam = FamilyOptions::for_spec(&sp0);
        let (w0, _) = basis_functions(&sol0, &sp0, &SchemeOptions::probe(&sp0), &fam, 0).unwrap();
        let rep = decompose_fgg(&sol0, &sp0, &fam, &w0, 0, 2.5, 0.1).unwrap();
        assert!(rep.gamma_norm < 1e-13, "γ at δ=0: {}", rep.gamma_norm);
        assert!(rep.secular_norm < 1e-13);

        // δ = 1e-2: the secular part carries ∂ω/∂a = O(δ·a) per mode, and
        // γ = O(δ).
        let (sp, sol, _) = base_solution(1e-2);
        let (w, _) = basis_functions(&sol, &sp, &SchemeOptions::probe(&sp), &fam, 0).unwrap();
        // dω_k/da_0 from the oracle Ω_k = 2Σa² − a_k²: dΩ_0/da_0 = 2a_0,
        // dΩ_1/da_0 = 4a_0 (k ≠ 0).
        let a0 = sol.mode_data.amplitude(0);
        assert!(
            (w.domega[0] - sp.delta * 2.0 * a0).abs() < 20.0 * sp.delta * sp.delta,
            "dω_0/da_0 = {}, expect ≈ {}",
            w.domega[0],
            sp.delta * 2.0 * a0
        );
        assert!(
            (w.domega[1] - sp.delta * 4.0 * a0).abs() < 20.0 * sp.delta * sp.delta,
            "dω_1/da_0 = {}",
            w.domega[1]
        );
        let rep = decompose_fgg(&sol, &sp, &fam, &w, 0, 2.5, 0.1).unwrap();
        assert!(rep.gamma_norm < 10.0 * sp.delta, "γ = {}", rep.gamma_norm);
        // Weighted secular tail is O(δ) per unit time.
        assert!(rep.tail_secular < 10.0 * sp.delta);
    }

    #[test]
    fn gram_identity_at_zero_coupling() {
        let (sp, sol, opts) = base_solution(0.0);
        let fam = FamilyOptions {
            spatial_band: 2,
            h_ext: 1e-3,
            ..FamilyOptions::for_spec(&sp)
        };
        let family = build_basis_family(&sol, &sp, &opts, &fam).unwrap();
        assert_eq!(family.members.len(), 5);
        let (sigma, pass) = gram_spanning_check(&family, 0.99);
        assert!(pass, "min singular {sigma}");
        assert!((sigma - 1.0).abs() < 1e-10);
        assert!(family.ivnu_defect < 1e-10);
    }

    #[test]
    fn gram_perturbation_at_small_coupling() {
        let (sp, sol, opts) = base_solution(1e-2);
        let fam = FamilyOptions {
            spatial_band: 2,
            ..FamilyOptions::for_spec(&sp)
        };
        let family = build_basis_family(&sol, &sp, &opts, &fam).unwrap();
        let (sigma, pass) = gram_spanning_check(&family, 0.5);
        assert!(pass, "min singular {sigma}");
        assert!(sigma >= 1.0 - 50.0 * sp.delta, "σ = {sigma}");
        assert!(family.ivnu_defect <= 10.0 * sp.delta, "defect {}", family.ivnu_defect);
    }

    #[test]
    fn expand_recovers_members() {
        let (sp, sol, opts) = base_solution(1e-2);
        let fam = FamilyOptions {
            spatial_band: 2,
            ..FamilyOptions::for_spec(&sp)
        };
        let family = build_basis_family(&sol, &sp, &opts, &fam).unwrap();
        // ψ = w_k → β_k = 1, everything else ≈ 0.
        let k = 2;
        let psi = family.members[k].0.spatial_profile(0.0, 2);
        let ex = expand_in_basis(&psi, &family).unwrap();
        assert!((ex.beta[k] - 1.0).abs() < 1e-8);
        for (i, &b) in ex.beta.iter().enumerate() {
            if i != k {
                assert!(b.abs() < 1e-8, "β[{i}] = {b}");
            }
        }
        assert!(ex.residual < 1e-10);

        // Random ψ on the cube reconstructs within truncation.
        let mut psi = SpatialField::zero(1, 2);
        for (i, j) in [(-2, 0.3), (-1, -0.4), (0, 0.9), (1, 0.1), (2, -0.7)] {
            psi.set(&[i], Complex64::new(j, 0.5 * j));
        }
        let ex = expand_in_basis(&psi, &family).unwrap();
        assert!(ex.residual <= 1e-8, "residual {}", ex.residual);
    }

    #[test]
    fn expand_i_w_at_zero_coupling_gives_alpha() {
        let (sp, sol, opts) = base_solution(0.0);
        let fam = FamilyOptions {
            spatial_band: 2,
            h_ext: 1e-3,
            ..FamilyOptions::for_spec(&sp)
        };
        let family = build_basis_family(&sol, &sp, &opts, &fam).unwrap();
        let k = 1;
        let psi = family.members[k]
            .0
            .spatial_profile(0.0, 2)
            .scale(Complex64::new(0.0, 1.0));
        let ex = expand_in_basis(&psi, &family).unwrap();
        assert!((ex.alpha[k] - 1.0).abs() < 1e-10, "α = {:?}", ex.alpha);
        assert!(ex.beta[k].abs() < 1e-10);
    }

    #[test]
    fn free_flow_at_zero_coupling() {
        let (sp, sol, _) = base_solution(0.0);
        let mut psi = SpatialField::zero(1, 4);
        psi.set(&[1], Complex64::new(0.6, 0.0));
        psi.set(&[-3], Complex64::new(0.0, 0.8));
        let fo = FlowOptions {
            dt: 1e-2,
            ..Default::default()
        };
        let t = 0.7;
        let traj = evolve_linearized(&psi, &sol, &sp, 0.0, &[t], &fo).unwrap();
        let got = &traj.states[0];
        // ψ(t) = e^{itΔ}ψ0: phases e^{−ij²t} exactly (splitting is exact
        // when the potential vanishes).
        let want1 = Complex64::new(0.6, 0.0) * Complex64::new(0.0, -t).exp();
        let want3 = Complex64::new(0.0, 0.8) * Complex64::new(0.0, -9.0 * t).exp();
        assert!((got.get(&[1]) - want1).norm() < 1e-10);
        assert!((got.get(&[-3]) - want3).norm() < 1e-10);
        assert!((got.l2_norm() - psi.l2_norm()).abs() < 1e-12);
        assert!(traj.sup_gain <= 1.0 + 2.0 * t);
    }

    #[test]
    fn flow_is_real_linear() {
        let (sp, sol, _) = base_solution(1e-2);
        let mut p1 = SpatialField::zero(1, 3);
        p1.set(&[0], Complex64::new(1.0, 0.2));
        p1.set(&[2], Complex64::new(-0.3, 0.1));
        let mut p2 = SpatialField::zero(1, 3);
        p2.set(&[1], Complex64::new(0.4, -0.6));
        p2.set(&[-1], Complex64::new(0.2, 0.0));
        let fo = FlowOptions {
            dt: 2e-3,
            ..Default::default()
        };
        let t = 0.5;
        let (c1, c2) = (0.7, -1.3);
        let combo = p1
            .scale(Complex64::new(c1, 0.0))
            .add(&p2.scale(Complex64::new(c2, 0.0)));
        let s_combo = evolve_linearized(&combo, &sol, &sp, 0.0, &[t], &fo).unwrap();
        let s1 = evolve_linearized(&p1, &sol, &sp, 0.0, &[t], &fo).unwrap();
        let s2 = evolve_linearized(&p2, &sol, &sp, 0.0, &[t], &fo).unwrap();
        let lin = s1.states[0]
            .scale(Complex64::new(c1, 0.0))
            .add(&s2.states[0].scale(Complex64::new(c2, 0.0)));
        assert!(s_combo.states[0].sub(&lin).l2_norm() < 1e-12);
    }

    #[test]
    fn flow_norm_bound_and_cocycle() {
        let (sp, sol, _) = base_solution(1e-2);
        let mut psi = SpatialField::zero(1, 3);
        psi.set(&[1], Complex64::new(0.8, 0.0));
        psi.set(&[-2], Complex64::new(0.0, 0.6));
        let fo = FlowOptions {
            dt: 1e-3,
            ..Default::default()
        };
        let t_end = 2.0;
        let samples: Vec<f64> = (1..=8).map(|i| t_end * i as f64 / 8.0).collect();
        let traj = evolve_linearized(&psi, &sol, &sp, 0.0, &samples, &fo).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!(
                s.l2_norm() / psi.l2_norm() <= 1.0 + 2.0 * t,
                "norm bound broken at t={t}"
            );
        }
        let resid = cocycle_residual(&psi, &sol, &sp, 1.0, &fo).unwrap();
        assert!(resid <= 1e-8, "cocycle residual {resid}");
    }

    #[test]
    fn halving_check_catches_coarse_steps() {
        let (sp, sol, _) = base_solution(1e-2);
        let mut psi = SpatialField::zero(1, 3);
        psi.set(&[1], Complex64::ONE);
        let fo = FlowOptions {
            dt: 0.5,
            halving_tol: 1e-12,
            check_halving: true,
        };
        match evolve_linearized(&psi, &sol, &sp, 0.0, &[2.0], &fo) {
            Err(LinflowError::HalvingDisagreement { .. }) => {}
            other => panic!("expected halving failure, got {:?}", other.map(|t| t.times)),
        }
    }

    #[test]
    fn member_defect_vanishes_at_zero_coupling() {
        let (sp, sol, opts) = base_solution(0.0);
        let fam = FamilyOptions {
            spatial_band: 2,
            ..FamilyOptions::for_spec(&sp)
        };
        let (w, nu) = basis_functions(&sol, &sp, &opts, &fam, 0).unwrap();
        for t in [0.0, 0.5, 2.0] {
            assert!(member_defect(&w, &sol, &sp, t, 2).l2_norm() < 1e-12);
            assert!(member_defect(&nu, &sol, &sp, t, 2).l2_norm() < 1e-12);
        }
    }

    #[test]
    fn duhamel_identity_short_window() {
        let (sp, sol, opts) = base_solution(1e-2);
        let fam = FamilyOptions {
            spatial_band: 2,
            ..FamilyOptions::for_spec(&sp)
        };
        let family = build_basis_family(&sol, &sp, &opts, &fam).unwrap();
        let fo = FlowOptions {
            dt: 1e-3,
            ..Default::default()
        };
        let report = duhamel_basis_check(&family, &sol, &sp, 1.0, 8, 100.0, &fo).unwrap();
        assert!(
            report.identity_residual <= 1e-6,
            "identity residual {}",
            report.identity_residual
        );
        assert!(report.envelope_constant.is_finite());
    }
}
