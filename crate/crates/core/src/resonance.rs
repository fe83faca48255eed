//! Resonance geometry: the characteristic variety, its Γ-connected
//! components, the small dense Γ and M matrices whose determinants control
//! invertibility, and Monte Carlo estimates of the excised measure.
//!
//! The variety C = {(n,j): n·ω⁰ ± j² = 0} is the small-divisor locus of the
//! linear problem (minus branch: u-block, plus branch: v-block). Sites are
//! linked when their difference lies in the Fourier support of |u₁|^{2p}
//! (same block) or |u₁|^{2(p−1)}u₁² (across blocks). On each component the
//! operator reduces to δ·Γ with Γ = diag(±n·Ω) + A, A the convolution
//! matrix; excision keeps amplitude vectors on which every det Γ and every
//! normalized det M clears ε, and the measure of the complement fits Cε^c.
//!
//! This stands in for the genericity conditions of the companion geometry
//! analysis: a configuration is accepted iff no variety component chains
//! past 2b+d sites and all determinants clear the threshold.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::field::{FourierField, ModeData, ProblemSpec};
use crate::lattice::{
    build_site_index_dims, resonant_set, LatticeError, LatticeSite, ModeSet, TruncationSpec,
};
use crate::linop::Block;
use crate::nonlinear::{convolve_trunc, nonlinear_term, unit_field};

#[derive(Debug, thiserror::Error)]
pub enum ResonanceError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(
        "genericity violation: component of size {size} exceeds 2b+d = {bound} \
         (contains {first:?})"
    )]
    ComponentTooLarge {
        size: usize,
        bound: usize,
        first: LatticeSite,
    },
    #[error("measure fit degenerate: bad fraction is {fraction} across the whole ε grid")]
    DegenerateFit { fraction: f64 },
}

/// One small-divisor node: a variety site together with the block whose
/// divisor vanishes there.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VarietyNode {
    pub block: Block,
    pub site: LatticeSite,
}

/// The characteristic variety within a truncation, as (block, site) nodes.
/// Both sign branches are enumerated in exact integer arithmetic.
pub fn characteristic_variety(modes: &ModeSet, trunc: &TruncationSpec) -> Vec<VarietyNode> {
    let omega0: Vec<i64> = (0..modes.count()).map(|k| modes.mode_j_sq(k)).collect();
    let index = build_site_index_dims(modes.count(), modes.dim(), trunc, u64::MAX)
        .expect("unbounded budget");
    let mut nodes = Vec::new();
    for s in index.sites() {
        let dot: i64 = s.n.iter().zip(&omega0).map(|(&n, &w)| n as i64 * w).sum();
        let jsq = s.j_sq();
        if dot + jsq == 0 {
            nodes.push(VarietyNode {
                block: Block::U,
                site: s.clone(),
            });
        }
        if dot - jsq == 0 {
            nodes.push(VarietyNode {
                block: Block::V,
                site: s.clone(),
            });
        }
    }
    nodes
}

/// Lattice translations appearing in the linearization kernels, split by
/// whether they couple within a block or across blocks.
#[derive(Clone, Debug)]
pub struct GammaSupport {
    /// Fourier support of |u₁|^{2p} (K11/K22 directions); symmetric.
    pub same_block: BTreeSet<LatticeSite>,
    /// Fourier support of |u₁|^{2(p−1)}u₁² and its reflection (K12/K21).
    pub cross_block: BTreeSet<LatticeSite>,
}

impl GammaSupport {
    pub fn contains_same(&self, diff: &LatticeSite) -> bool {
        self.same_block.contains(diff)
    }

    pub fn contains_cross(&self, diff: &LatticeSite) -> bool {
        self.cross_block.contains(diff)
    }

    /// Union of both families, as a plain translation set.
    pub fn all(&self) -> BTreeSet<LatticeSite> {
        self.same_block.union(&self.cross_block).cloned().collect()
    }
}

/// Support of the composite symbols generated by the generic resonant
/// sites `u_sites` (u₁-block) in Z^{b_total + d}.
pub fn gamma_support_from_sites(
    u_sites: &[LatticeSite],
    p: u32,
    b_total: usize,
    d: usize,
) -> GammaSupport {
    let origin = LatticeSite::new(vec![0; b_total], vec![0; d]);
    // supp(u₁∗v₁): differences of u-sites (v-sites are reflected u-sites).
    let mut uv: BTreeSet<LatticeSite> = BTreeSet::new();
    for a in u_sites {
        for b in u_sites {
            uv.insert(a.diff(b));
        }
    }
    // (u∗v)^{∗p}: p-fold sums of pair differences.
    let mut same: BTreeSet<LatticeSite> = BTreeSet::new();
    same.insert(origin.clone());
    for _ in 0..p {
        let mut next = BTreeSet::new();
        for s in &same {
            for t in &uv {
                next.insert(s.translate(t));
            }
        }
        if next.is_empty() {
            next.insert(origin.clone());
        }
        same = next;
    }
    // (u∗v)^{∗(p−1)} ∗ u ∗ u and its reflection.
    let mut base: BTreeSet<LatticeSite> = BTreeSet::new();
    base.insert(origin);
    for _ in 0..p.saturating_sub(1) {
        let mut next = BTreeSet::new();
        for s in &base {
            for t in &uv {
                next.insert(s.translate(t));
            }
        }
        base = next;
    }
    let mut cross: BTreeSet<LatticeSite> = BTreeSet::new();
    for s in &base {
        for a in u_sites {
            for b in u_sites {
                let v = s.translate(a).translate(b);
                cross.insert(v.reflect());
                cross.insert(v);
            }
        }
    }
    GammaSupport {
        same_block: same,
        cross_block: cross,
    }
}

/// Γ-support of the generic part of a mode set.
pub fn gamma_support(modes: &ModeSet, p: u32) -> GammaSupport {
    let res = resonant_set(modes);
    let generic_sites: Vec<LatticeSite> = modes
        .generic_indices()
        .iter()
        .map(|&k| res.u_sites()[k].clone())
        .collect();
    gamma_support_from_sites(&generic_sites, p, modes.count(), modes.dim())
}

/// A maximal Γ-connected subset of the variety.
#[derive(Clone, Debug)]
pub struct Component {
    pub nodes: Vec<VarietyNode>,
    /// Spatial projection ᾶ = Π_{Z^d} α.
    pub projection: BTreeSet<Vec<i32>>,
    /// Positions (into `nodes`) of resonant-form elements (∓e_j, j).
    pub resonant_members: Vec<usize>,
    /// Exactly one resonant-form element: eligible for the basis analysis.
    pub in_a_prime: bool,
}

/// Maximal connected subsets of `nodes` under the block-aware adjacency
/// α₁ − α₂ ∈ Γ. Components larger than 2b+d are a genericity violation.
pub fn connected_components(
    nodes: &[VarietyNode],
    gamma: &GammaSupport,
    modes: &ModeSet,
) -> Result<Vec<Component>, ResonanceError> {
    let n = nodes.len();
    let bound = 2 * modes.generic_indices().len() + modes.dim();
    let adjacent = |a: &VarietyNode, b: &VarietyNode| -> bool {
        let diff = a.site.diff(&b.site);
        if a.block == b.block {
            gamma.contains_same(&diff)
        } else {
            gamma.contains_cross(&diff)
        }
    };
    let mut seen = vec![false; n];
    let res = resonant_set(modes);
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut members = vec![start];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && adjacent(&nodes[i], &nodes[j]) {
                    seen[j] = true;
                    stack.push(j);
                    members.push(j);
                }
            }
        }
        members.sort_by(|&a, &b| {
            (nodes[a].block == Block::V, &nodes[a].site)
                .cmp(&(nodes[b].block == Block::V, &nodes[b].site))
        });
        let comp_nodes: Vec<VarietyNode> = members.iter().map(|&i| nodes[i].clone()).collect();
        if comp_nodes.len() > bound {
            return Err(ResonanceError::ComponentTooLarge {
                size: comp_nodes.len(),
                bound,
                first: comp_nodes[0].site.clone(),
            });
        }
        let projection = comp_nodes.iter().map(|nd| nd.site.j.clone()).collect();
        let resonant_members: Vec<usize> = comp_nodes
            .iter()
            .enumerate()
            .filter(|(_, nd)| match nd.block {
                Block::U => res.u_mode_of(&nd.site).is_some(),
                Block::V => res.v_mode_of(&nd.site).is_some(),
            })
            .map(|(i, _)| i)
            .collect();
        let in_a_prime = resonant_members.len() == 1;
        components.push(Component {
            nodes: comp_nodes,
            projection,
            resonant_members,
            in_a_prime,
        });
    }
    components.sort_by(|a, b| a.nodes[0].site.cmp(&b.nodes[0].site));
    Ok(components)
}

/// The δ-normalized linearization kernels of the generic field u₁⁰:
/// (p+1)(u₁∗v₁)^{∗p} within a block, p(u₁∗v₁)^{∗(p−1)}∗u₁∗u₁ and its
/// mirror across blocks.
pub struct GammaKernels {
    k_same: FourierField,
    k_cross_uv: FourierField,
    k_cross_vu: FourierField,
}

impl GammaKernels {
    pub fn at(&self, row: (Block, &LatticeSite), col: (Block, &LatticeSite)) -> f64 {
        let diff = row.1.diff(col.1);
        let v = match (row.0, col.0) {
            (Block::U, Block::U) | (Block::V, Block::V) => self.k_same.get(&diff),
            (Block::U, Block::V) => self.k_cross_uv.get(&diff),
            (Block::V, Block::U) => self.k_cross_vu.get(&diff),
        };
        v.re
    }
}

/// Builds the kernels from generic amplitudes only: the Γ and M matrices
/// depend on {a_j, j ∈ G} alone.
pub fn gamma_kernels(modes: &ModeSet, data: &ModeData, p: u32) -> GammaKernels {
    let b = modes.count();
    let d = modes.dim();
    let radius = modes.max_mode_radius();
    let wide = TruncationSpec {
        n_max: 2 * (p as i32 + 1),
        j_max: 2 * (p as i32 + 1) * radius.max(1),
        newton_iters: 1,
    };
    let res = resonant_set(modes);
    let mut u1 = FourierField::zero(b, d, wide);
    for &k in modes.generic_indices() {
        u1.insert(
            res.u_sites()[k].clone(),
            Complex64::new(data.amplitude(k), 0.0),
        )
        .expect("resonant sites fit the kernel box");
    }
    let v1 = crate::field::conjugate_field(&u1).expect("symmetric box");
    let uv = convolve_trunc(&u1, &v1, wide);
    let mut uv_p = unit_field(b, d, wide);
    for _ in 0..p {
        uv_p = convolve_trunc(&uv_p, &uv, wide);
    }
    let mut uv_pm1 = unit_field(b, d, wide);
    for _ in 1..p {
        uv_pm1 = convolve_trunc(&uv_pm1, &uv, wide);
    }
    let uu = convolve_trunc(&convolve_trunc(&uv_pm1, &u1, wide), &u1, wide);
    let vv = convolve_trunc(&convolve_trunc(&uv_pm1, &v1, wide), &v1, wide);
    let pf = p as f64;
    GammaKernels {
        k_same: uv_p.scale(Complex64::new(pf + 1.0, 0.0)),
        k_cross_uv: uu.scale(Complex64::new(pf, 0.0)),
        k_cross_vu: vv.scale(Complex64::new(pf, 0.0)),
    }
}

/// First-order frequency shifts Ω_j = (1/a_j)(u⁰∗v⁰)^{∗p}∗u⁰|_{(−e_j,j)},
/// from the full mode data. For p = 1 this is 2Σa² − a_j²; the computed
/// value is j-dependent, and its common part is reported separately.
pub fn omega_shift_vector(modes: &ModeSet, data: &ModeData, p: u32) -> Vec<f64> {
    let b = modes.count();
    let radius = modes.max_mode_radius().max(1);
    let wide = TruncationSpec {
        n_max: 2 * p as i32 + 1,
        j_max: (2 * p as i32 + 1) * radius,
        newton_iters: 1,
    };
    let u = crate::field::initial_field(modes, data, wide).expect("resonant sites fit");
    let v = crate::field::conjugate_field(&u).expect("symmetric box");
    let conv = nonlinear_term(&u, &v, p, wide);
    let res = resonant_set(modes);
    (0..b)
        .map(|k| conv.get(&res.u_sites()[k]).re / data.amplitude(k))
        .collect()
}

/// The j-independent part of the shift: the limit value for a mode of
/// vanishing amplitude (2Σ_G a² when p = 1).
pub fn omega_shift_common(modes: &ModeSet, data: &ModeData, p: u32) -> f64 {
    if p == 1 {
        2.0 * modes
            .generic_indices()
            .iter()
            .map(|&k| data.amplitude(k).powi(2))
            .sum::<f64>()
    } else {
        omega_shift_vector(modes, data, p)
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// diag(±n_pattern·Ω) + A restricted to the component nodes; entries are
/// polynomials in the generic amplitudes. `n_pattern` defaults to the
/// nodes' own time indices; passing zeros gives the n = 0 family.
pub fn build_gamma_matrix(
    alpha: &[VarietyNode],
    n_pattern: Option<&[Vec<i32>]>,
    omega_shift: &[f64],
    kernels: &GammaKernels,
) -> DMatrix<f64> {
    let m = alpha.len();
    DMatrix::from_fn(m, m, |i, j| {
        let mut val = kernels.at(
            (alpha[i].block, &alpha[i].site),
            (alpha[j].block, &alpha[j].site),
        );
        if i == j {
            let dot: f64 = match n_pattern {
                Some(p) => p[i]
                    .iter()
                    .zip(omega_shift)
                    .map(|(&ni, &w)| ni as f64 * w)
                    .sum(),
                None => alpha[i]
                    .site
                    .n
                    .iter()
                    .zip(omega_shift)
                    .map(|(&ni, &w)| ni as f64 * w)
                    .sum(),
            };
            let sign = match alpha[i].block {
                Block::U => 1.0,
                Block::V => -1.0,
            };
            val += sign * dot;
        }
        val
    })
}

/// Diagonal-normalized convolution matrix of a component: the basis matrix
/// of the spanning analysis, with unit diagonal and entries rational in
/// the generic amplitudes; independent of θ and identical for translated
/// components.
pub fn build_m_matrix(alpha: &[VarietyNode], kernels: &GammaKernels) -> DMatrix<f64> {
    let m = alpha.len();
    let zeros: Vec<Vec<i32>> = alpha.iter().map(|nd| vec![0; nd.site.n.len()]).collect();
    let mut out = build_gamma_matrix(alpha, Some(&zeros), &[], kernels);
    for i in 0..m {
        let d = out[(i, i)];
        debug_assert!(d != 0.0, "vanishing self-coupling");
        for j in 0..m {
            out[(i, j)] /= d;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Serialize)]
pub enum PatternTag {
    /// The component's own time indices.
    Actual,
    /// The n = 0 family (the time-independent excision set).
    Zero,
}

#[derive(Clone, Debug, Serialize)]
pub struct DetRecord {
    pub component: usize,
    pub pattern: PatternTag,
    pub det: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MDetRecord {
    pub component: usize,
    pub det: f64,
    /// ‖M^{-1}‖₂, the witness for the ε^{-1} bound.
    pub inv_norm: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExcisionVerdict {
    pub pass: bool,
    pub min_gamma_det: f64,
    pub min_m_det: f64,
    pub epsilon: f64,
}

/// Bad-set fraction per ε and the fitted exponent in meas ≤ Cε^c.
#[derive(Clone, Debug, Serialize)]
pub struct MeasureFit {
    pub epsilons: Vec<f64>,
    pub fractions: Vec<f64>,
    pub exponent: f64,
    pub prefactor: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleRecord {
    pub amplitudes: Vec<f64>,
    pub min_gamma_det: f64,
    pub min_m_det: f64,
    pub pass: bool,
}

/// Full geometric analysis of a mode set at fixed amplitudes.
pub struct ResonanceReport {
    pub variety: Vec<VarietyNode>,
    pub components: Vec<Component>,
    /// Components of the off-S variety (the T_N domain), used for Γ.
    pub off_resonant_components: Vec<Component>,
    pub gamma_dets: Vec<DetRecord>,
    pub m_dets: Vec<MDetRecord>,
    pub verdict: ExcisionVerdict,
    pub measure_fit: Option<MeasureFit>,
}

fn min_dets(
    modes: &ModeSet,
    data: &ModeData,
    spec: &ProblemSpec,
    off_components: &[Component],
    a_prime_components: &[Component],
) -> (Vec<DetRecord>, Vec<MDetRecord>, f64, f64) {
    let kernels = gamma_kernels(modes, data, spec.power);
    let shift = omega_shift_vector(modes, data, spec.power);
    let mut gamma_dets = Vec::new();
    let mut min_gamma = f64::INFINITY;
    for (ci, comp) in off_components.iter().enumerate() {
        let g = build_gamma_matrix(&comp.nodes, None, &shift, &kernels);
        let det = g.determinant();
        min_gamma = min_gamma.min(det.abs());
        gamma_dets.push(DetRecord {
            component: ci,
            pattern: PatternTag::Actual,
            det,
        });
        let zeros: Vec<Vec<i32>> = comp
            .nodes
            .iter()
            .map(|nd| vec![0; nd.site.n.len()])
            .collect();
        let det0 = build_gamma_matrix(&comp.nodes, Some(&zeros), &shift, &kernels).determinant();
        min_gamma = min_gamma.min(det0.abs());
        gamma_dets.push(DetRecord {
            component: ci,
            pattern: PatternTag::Zero,
            det: det0,
        });
    }
    let mut m_dets = Vec::new();
    let mut min_m = f64::INFINITY;
    for (ci, comp) in a_prime_components.iter().enumerate() {
        let m = build_m_matrix(&comp.nodes, &kernels);
        let det = m.determinant();
        min_m = min_m.min(det.abs());
        let sigma_min = m
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        m_dets.push(MDetRecord {
            component: ci,
            det,
            inv_norm: sigma_min.recip(),
        });
    }
    (gamma_dets, m_dets, min_gamma, min_m)
}

/// Pass iff every |det Γ| (actual and n = 0 patterns over off-S
/// components) and every |det M| (A′ components) clears ε.
pub fn excision_check(
    modes: &ModeSet,
    data: &ModeData,
    spec: &ProblemSpec,
    trunc: &TruncationSpec,
) -> Result<ResonanceReport, ResonanceError> {
    let gamma = gamma_support(modes, spec.power);
    let variety = characteristic_variety(modes, trunc);
    let components = connected_components(&variety, &gamma, modes)?;
    let res = resonant_set(modes);
    let off_nodes: Vec<VarietyNode> = variety
        .iter()
        .filter(|nd| !res.contains(&nd.site))
        .cloned()
        .collect();
    let off_components = connected_components(&off_nodes, &gamma, modes)?;
    let a_prime: Vec<Component> = components
        .iter()
        .filter(|c| c.in_a_prime)
        .cloned()
        .collect();
    let (gamma_dets, m_dets, min_gamma, min_m) =
        min_dets(modes, data, spec, &off_components, &a_prime);
    let verdict = ExcisionVerdict {
        pass: min_gamma >= spec.epsilon && min_m >= spec.epsilon,
        min_gamma_det: min_gamma,
        min_m_det: min_m,
        epsilon: spec.epsilon,
    };
    Ok(ResonanceReport {
        variety,
        components,
        off_resonant_components: off_components,
        gamma_dets,
        m_dets,
        verdict,
        measure_fit: None,
    })
}

/// Uniform sampling of the generic amplitudes over (0,1]^b with a fixed
/// master seed; per-sample seeds are derived, so the result is independent
/// of thread count. Returns the fitted exponent and the raw records.
pub fn measure_estimate(
    modes: &ModeSet,
    base: &ModeData,
    spec: &ProblemSpec,
    trunc: &TruncationSpec,
    samples: usize,
    seed: u64,
    eps_grid: &[f64],
) -> Result<(MeasureFit, Vec<SampleRecord>), ResonanceError> {
    assert!(samples >= 1000, "at least 10³ samples required");
    let gamma = gamma_support(modes, spec.power);
    let variety = characteristic_variety(modes, trunc);
    let components = connected_components(&variety, &gamma, modes)?;
    let res = resonant_set(modes);
    let off_nodes: Vec<VarietyNode> = variety
        .iter()
        .filter(|nd| !res.contains(&nd.site))
        .cloned()
        .collect();
    let off_components = connected_components(&off_nodes, &gamma, modes)?;
    let a_prime: Vec<Component> = components
        .iter()
        .filter(|c| c.in_a_prime)
        .cloned()
        .collect();
    let generic = modes.generic_indices().to_vec();

    let records: Vec<SampleRecord> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1),
            );
            let mut data = base.clone();
            let mut amps = Vec::with_capacity(generic.len());
            for &k in &generic {
                let mut a: f64 = rng.gen_range(0.0..1.0);
                if a == 0.0 {
                    a = f64::MIN_POSITIVE;
                }
                data = data.with_amplitude(k, a);
                amps.push(a);
            }
            let (_, _, min_gamma, min_m) = min_dets(modes, &data, spec, &off_components, &a_prime);
            SampleRecord {
                amplitudes: amps,
                min_gamma_det: min_gamma,
                min_m_det: min_m,
                pass: min_gamma >= spec.epsilon && min_m >= spec.epsilon,
            }
        })
        .collect();

    let fractions: Vec<f64> = eps_grid
        .iter()
        .map(|&eps| {
            records
                .iter()
                .filter(|r| r.min_gamma_det < eps || r.min_m_det < eps)
                .count() as f64
                / samples as f64
        })
        .collect();
    let usable: Vec<(f64, f64)> = eps_grid
        .iter()
        .zip(&fractions)
        .filter(|(_, &f)| f > 0.0 && f < 1.0)
        .map(|(&e, &f)| (e.ln(), f.ln()))
        .collect();
    if usable.len() < 2 {
        return Err(ResonanceError::DegenerateFit {
            fraction: fractions.first().copied().unwrap_or(f64::NAN),
        });
    }
    let n = usable.len() as f64;
    let sx: f64 = usable.iter().map(|p| p.0).sum();
    let sy: f64 = usable.iter().map(|p| p.1).sum();
    let sxx: f64 = usable.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = usable.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    Ok((
        MeasureFit {
            epsilons: eps_grid.to_vec(),
            fractions,
            exponent: slope,
            prefactor: intercept.exp(),
            samples,
            seed,
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(delta: f64, p: u32, eps: f64) -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            power: p,
            delta,
            order: 3.0,
            weight_beta: 0.4,
            weight_beta_prime: 0.2,
            epsilon: eps,
        }
    }

    fn single_mode() -> ModeSet {
        ModeSet::new(vec![vec![1]], vec![0], 1).unwrap()
    }

    fn two_modes() -> ModeSet {
        ModeSet::new(vec![vec![1], vec![-2]], vec![0, 1], 2).unwrap()
    }

    fn node(block: Block, n: Vec<i32>, j: Vec<i32>) -> VarietyNode {
        VarietyNode {
            block,
            site: LatticeSite::new(n, j),
        }
    }

    #[test]
    fn resonant_sites_are_variety_members() {
        let modes = two_modes();
        let t = TruncationSpec::new(3, 4, 1).unwrap();
        let var = characteristic_variety(&modes, &t);
        let res = resonant_set(&modes);
        for s in res.u_sites() {
            assert!(var.iter().any(|nd| nd.block == Block::U && &nd.site == s));
        }
        for s in res.v_sites() {
            assert!(var.iter().any(|nd| nd.block == Block::V && &nd.site == s));
        }
    }

    #[test]
    fn variety_single_mode_enumeration() {
        // d=1, mode j₁=1, N=4, J_x=2: minus-branch sites {n + j² = 0}:
        // (0,0), (−1,±1), (−4,±2).
        let modes = single_mode();
        let t = TruncationSpec::new(4, 2, 1).unwrap();
        let var = characteristic_variety(&modes, &t);
        let minus: BTreeSet<(i32, i32)> = var
            .iter()
            .filter(|nd| nd.block == Block::U)
            .map(|nd| (nd.site.n[0], nd.site.j[0]))
            .collect();
        let expect: BTreeSet<(i32, i32)> = [(0, 0), (-1, 1), (-1, -1), (-4, 2), (-4, -2)]
            .into_iter()
            .collect();
        assert_eq!(minus, expect);
    }

    #[test]
    fn variety_two_modes_matches_enumeration_oracle() {
        // Independent brute force over the box: n₁ + 4n₂ ± j² = 0.
        let modes = two_modes();
        let t = TruncationSpec::new(3, 3, 1).unwrap();
        let var = characteristic_variety(&modes, &t);
        let mut count = 0;
        for n1 in -3i64..=3 {
            for n2 in -3i64..=3 {
                if n1.abs() + n2.abs() > 3 {
                    continue;
                }
                for j in -3i64..=3 {
                    if n1 + 4 * n2 + j * j == 0 {
                        count += 1;
                    }
                    if n1 + 4 * n2 - j * j == 0 {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(var.len(), count);
    }

    #[test]
    fn gamma_support_examples() {
        // p=1, single mode: same-block {(0,0)}, cross ±(−2e₁, 2).
        let g = gamma_support(&single_mode(), 1);
        assert_eq!(g.same_block.len(), 1);
        assert!(g.contains_same(&LatticeSite::new(vec![0], vec![0])));
        assert!(g.contains_cross(&LatticeSite::new(vec![-2], vec![2])));
        assert!(g.contains_cross(&LatticeSite::new(vec![2], vec![-2])));

        // p=1, two modes: ±(e₂−e₁, j₁−j₂) appear.
        let g = gamma_support(&two_modes(), 1);
        assert!(g.contains_same(&LatticeSite::new(vec![-1, 1], vec![3])));
        assert!(g.contains_same(&LatticeSite::new(vec![1, -1], vec![-3])));

        // Empty generic list degenerates to the origin alone.
        let g = gamma_support_from_sites(&[], 1, 2, 1);
        assert_eq!(g.same_block.len(), 1);
        assert!(g.same_block.contains(&LatticeSite::new(vec![0, 0], vec![0])));
        assert!(g.cross_block.is_empty());
    }

    #[test]
    fn trivial_gamma_gives_singletons() {
        let modes = two_modes();
        let t = TruncationSpec::new(2, 2, 1).unwrap();
        let var = characteristic_variety(&modes, &t);
        let gamma = GammaSupport {
            same_block: [LatticeSite::new(vec![0, 0], vec![0])].into_iter().collect(),
            cross_block: BTreeSet::new(),
        };
        let comps = connected_components(&var, &gamma, &modes).unwrap();
        assert_eq!(comps.len(), var.len());
        assert!(comps.iter().all(|c| c.nodes.len() == 1));
    }

    #[test]
    fn resonant_pair_is_linked_and_not_in_a_prime() {
        // With modes {1, −2} the two u-resonant sites differ by
        // (e₂−e₁, j₁−j₂) ∈ supp|u₁|², so they join one component carrying
        // two resonant forms — hence outside A′.
        let modes = two_modes();
        let t = TruncationSpec::new(2, 3, 1).unwrap();
        let gamma = gamma_support(&modes, 1);
        let var = characteristic_variety(&modes, &t);
        let comps = connected_components(&var, &gamma, &modes).unwrap();
        let res = resonant_set(&modes);
        let comp = comps
            .iter()
            .find(|c| {
                c.nodes
                    .iter()
                    .any(|nd| nd.block == Block::U && nd.site == res.u_sites()[0])
            })
            .unwrap();
        assert!(comp
            .nodes
            .iter()
            .any(|nd| nd.block == Block::U && nd.site == res.u_sites()[1]));
        assert!(comp.resonant_members.len() >= 2);
        assert!(!comp.in_a_prime);
    }

    #[test]
    fn explicit_pair_component() {
        // Constructed two-mode example with one nontrivial pair link: both
        // ((−4,0),−2) and ((−5,1),1) solve n·ω⁰ + j² = 0 and differ by
        // (e₁−e₂, j₂−j₁) ∈ supp|u₁|².
        let modes = two_modes();
        let gamma = gamma_support(&modes, 1);
        let a = node(Block::U, vec![-4, 0], vec![-2]);
        let b = node(Block::U, vec![-5, 1], vec![1]);
        for nd in [&a, &b] {
            let dot = nd.site.n[0] as i64 + 4 * nd.site.n[1] as i64;
            assert_eq!(dot + nd.site.j_sq(), 0);
        }
        let diff = a.site.diff(&b.site);
        assert!(gamma.contains_same(&diff));
        let comps = connected_components(&[a, b], &gamma, &modes).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].nodes.len(), 2);
    }

    #[test]
    fn component_size_bound_enforced() {
        // A fat artificial Γ links everything: with enough variety nodes
        // the 2b+d bound must trip.
        let modes = single_mode();
        let t = TruncationSpec::new(4, 2, 1).unwrap();
        let var = characteristic_variety(&modes, &t);
        assert!(var.len() > 3);
        let mut everything = BTreeSet::new();
        for a in &var {
            for b in &var {
                everything.insert(a.site.diff(&b.site));
            }
        }
        let gamma = GammaSupport {
            same_block: everything.clone(),
            cross_block: everything,
        };
        match connected_components(&var, &gamma, &modes) {
            Err(ResonanceError::ComponentTooLarge { size, bound, .. }) => {
                assert!(size > bound);
                assert_eq!(bound, 2 + 1);
            }
            other => panic!("expected ComponentTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn gamma_matrix_structure() {
        // Singleton at the mirror site (−e₁, −1), p = 1, single mode:
        // Γ = −Ω₁ + 2a² = a²; the n = 0 pattern gives A = 2a².
        let modes = single_mode();
        let a = 0.7;
        let data = ModeData::new(vec![a], vec![0.3]).unwrap();
        let kernels = gamma_kernels(&modes, &data, 1);
        let shift = omega_shift_vector(&modes, &data, 1);
        assert!((shift[0] - a * a).abs() < 1e-15);
        assert!((omega_shift_common(&modes, &data, 1) - 2.0 * a * a).abs() < 1e-15);
        let alpha = [node(Block::U, vec![-1], vec![-1])];
        let g = build_gamma_matrix(&alpha, None, &shift, &kernels);
        assert!((g[(0, 0)] - a * a).abs() < 1e-14);
        let zeros = vec![vec![0]];
        let g0 = build_gamma_matrix(&alpha, Some(&zeros), &shift, &kernels);
        assert!((g0[(0, 0)] - 2.0 * a * a).abs() < 1e-14);

        // Ω scaling: Γ(λΩ) − Γ(0) is linear in λ on the diagonal.
        let lam = 0.37;
        let scaled: Vec<f64> = shift.iter().map(|w| lam * w).collect();
        let gl = build_gamma_matrix(&alpha, None, &scaled, &kernels);
        assert!(((gl[(0, 0)] - g0[(0, 0)]) - lam * (g[(0, 0)] - g0[(0, 0)])).abs() < 1e-14);
    }

    #[test]
    fn m_matrix_normalized_and_translation_invariant() {
        let modes = two_modes();
        let data = ModeData::new(vec![0.5, 0.4], vec![0.0, 0.0]).unwrap();
        let kernels = gamma_kernels(&modes, &data, 1);
        let a1 = [
            node(Block::U, vec![-1, 0], vec![1]),
            node(Block::U, vec![0, -1], vec![-2]),
        ];
        let m1 = build_m_matrix(&a1, &kernels);
        assert!((m1[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((m1[(1, 1)] - 1.0).abs() < 1e-15);
        assert!(m1[(0, 1)].abs() > 0.0);
        // Translated component: identical M.
        let shift = LatticeSite::new(vec![1, -1], vec![3]);
        let a2: Vec<VarietyNode> = a1
            .iter()
            .map(|nd| VarietyNode {
                block: nd.block,
                site: nd.site.translate(&shift),
            })
            .collect();
        let m2 = build_m_matrix(&a2, &kernels);
        assert_eq!(m1, m2);
    }

    #[test]
    fn m_matrix_theta_free_after_phase_conjugation() {
        // Assembling from phased coefficients c_k = a_k e^{−iθ_k} and
        // conjugating by U = diag(e^{i n·θ}) reproduces the phase-free
        // entries: M is independent of θ.
        let modes = two_modes();
        let amps = [0.5, 0.4];
        let thetas = [1.1, 2.7];
        let data = ModeData::new(amps.to_vec(), vec![0.0, 0.0]).unwrap();
        let kernels = gamma_kernels(&modes, &data, 1);
        let alpha = [
            node(Block::U, vec![-1, 0], vec![1]),
            node(Block::U, vec![0, -1], vec![-2]),
        ];

        let wide = TruncationSpec::new(4, 8, 1).unwrap();
        let res = resonant_set(&modes);
        let mut u1 = FourierField::zero(2, 1, wide);
        for (k, s) in res.u_sites().iter().enumerate() {
            u1.insert(s.clone(), Complex64::from_polar(amps[k], -thetas[k]))
                .unwrap();
        }
        let v1 = crate::field::conjugate_field(&u1).unwrap();
        let uv = convolve_trunc(&u1, &v1, wide);
        let phased_entry =
            |r: &VarietyNode, c: &VarietyNode| -> Complex64 { uv.get(&r.site.diff(&c.site)) * 2.0 };
        let phase = |nd: &VarietyNode| -> Complex64 {
            let dot: f64 = nd
                .site
                .n
                .iter()
                .zip(&thetas)
                .map(|(&n, &t)| n as f64 * t)
                .sum();
            Complex64::from_polar(1.0, dot)
        };
        for i in 0..2 {
            for j in 0..2 {
                let raw = phased_entry(&alpha[i], &alpha[j]);
                let stripped = phase(&alpha[i]).conj() * raw * phase(&alpha[j]);
                let expect = kernels.at(
                    (alpha[i].block, &alpha[i].site),
                    (alpha[j].block, &alpha[j].site),
                );
                assert!(
                    (stripped - Complex64::new(expect, 0.0)).norm() < 1e-14,
                    "entry ({i},{j}): {stripped} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn excision_verdict_and_monotonicity() {
        let modes = two_modes();
        let data = ModeData::new(vec![0.9, 0.8], vec![0.0, 0.0]).unwrap();
        let t = TruncationSpec::new(3, 4, 1).unwrap();
        let sp = spec(1e-2, 1, 1e-3);
        let report = excision_check(&modes, &data, &sp, &t).unwrap();
        assert!(report.verdict.pass, "verdict {:?}", report.verdict);
        assert!(report.verdict.min_gamma_det >= 1e-3);

        // Threshold dominance: ε above every attainable det fails for all a.
        let sp_big = spec(1e-2, 1, 1e6);
        let report2 = excision_check(&modes, &data, &sp_big, &t).unwrap();
        assert!(!report2.verdict.pass);

        // Verdict flips monotonically in ε.
        let mut last_pass = true;
        for eps in [1e-6, 1e-4, 1e-2, 1.0, 1e2] {
            let sp_eps = spec(1e-2, 1, eps);
            let r = excision_check(&modes, &data, &sp_eps, &t).unwrap();
            if !last_pass {
                assert!(!r.verdict.pass, "verdict regressed at ε = {eps}");
            }
            last_pass = r.verdict.pass;
        }
    }

    #[test]
    fn single_mode_excision_passes_at_healthy_amplitude() {
        let modes = single_mode();
        let data = ModeData::new(vec![0.9], vec![0.0]).unwrap();
        let t = TruncationSpec::new(3, 3, 1).unwrap();
        let sp = spec(1e-2, 1, 1e-3);
        let report = excision_check(&modes, &data, &sp, &t).unwrap();
        assert!(report.verdict.pass);
        // min det Γ = a² from the mirror singleton.
        assert!((report.verdict.min_gamma_det - 0.81).abs() < 1e-12);
    }

    #[test]
    fn component_sizes_within_bound_on_pass() {
        let modes = two_modes();
        let data = ModeData::new(vec![0.9, 0.8], vec![0.0, 0.0]).unwrap();
        let t = TruncationSpec::new(4, 6, 1).unwrap();
        let sp = spec(1e-2, 1, 1e-3);
        let report = excision_check(&modes, &data, &sp, &t).unwrap();
        let bound = 2 * 2 + 1;
        for c in &report.components {
            assert!(c.nodes.len() <= bound);
        }
    }

    #[test]
    fn gamma_det_is_low_degree_polynomial() {
        // det Γ as a polynomial in a₁ has degree ≤ 2p(2|G|+d) = 10:
        // an 11-point interpolant reproduces fresh evaluations.
        let modes = two_modes();
        let t = TruncationSpec::new(3, 4, 1).unwrap();
        let gamma = gamma_support(&modes, 1);
        let var = characteristic_variety(&modes, &t);
        let res = resonant_set(&modes);
        let off: Vec<VarietyNode> = var
            .iter()
            .filter(|nd| !res.contains(&nd.site))
            .cloned()
            .collect();
        let comps = connected_components(&off, &gamma, &modes).unwrap();
        let comp = comps.iter().max_by_key(|c| c.nodes.len()).unwrap();

        let det_at = |a1: f64| -> f64 {
            let data = ModeData::new(vec![a1, 0.4], vec![0.0, 0.0]).unwrap();
            let kernels = gamma_kernels(&modes, &data, 1);
            let shift = omega_shift_vector(&modes, &data, 1);
            build_gamma_matrix(&comp.nodes, None, &shift, &kernels).determinant()
        };
        let degree = 2 * (2 * 2 + 1);
        let xs: Vec<f64> = (0..=degree)
            .map(|i| 0.05 + 0.9 * i as f64 / degree as f64)
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| det_at(x)).collect();
        let interp = |x: f64| -> f64 {
            let mut acc = 0.0;
            for i in 0..xs.len() {
                let mut term = ys[i];
                for j in 0..xs.len() {
                    if i != j {
                        term *= (x - xs[j]) / (xs[i] - xs[j]);
                    }
                }
                acc += term;
            }
            acc
        };
        for &x in &[0.123, 0.456, 0.789, 0.987] {
            let direct = det_at(x);
            let fitted = interp(x);
            assert!(
                (direct - fitted).abs() <= 1e-10 * (1.0 + direct.abs()),
                "x={x}: {direct} vs {fitted}"
            );
        }
    }

    #[test]
    fn measure_fraction_matches_closed_form_single_mode() {
        // b=1, p=1: min |det| over the variety is a², so the bad set is
        // {a² < ε} of measure √ε.
        let modes = single_mode();
        let data = ModeData::new(vec![0.5], vec![0.0]).unwrap();
        let t = TruncationSpec::new(2, 2, 1).unwrap();
        let sp = spec(1e-2, 1, 1e-3);
        let grid = [1e-1, 1e-2, 1e-3];
        let (fit, records) = measure_estimate(&modes, &data, &sp, &t, 4000, 42, &grid).unwrap();
        assert_eq!(records.len(), 4000);
        for (eps, frac) in grid.iter().zip(&fit.fractions) {
            let expect = eps.sqrt();
            assert!(
                (frac - expect).abs() < 0.03,
                "ε={eps}: fraction {frac} vs √ε = {expect}"
            );
        }
        assert!((fit.exponent - 0.5).abs() < 0.1, "c = {}", fit.exponent);
        for w in fit.fractions.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn measure_estimate_deterministic_under_seed() {
        let modes = single_mode();
        let data = ModeData::new(vec![0.5], vec![0.0]).unwrap();
        let t = TruncationSpec::new(2, 2, 1).unwrap();
        let sp = spec(1e-2, 1, 1e-3);
        let grid = [1e-1, 1e-2];
        let (f1, r1) = measure_estimate(&modes, &data, &sp, &t, 1000, 7, &grid).unwrap();
        let (f2, r2) = measure_estimate(&modes, &data, &sp, &t, 1000, 7, &grid).unwrap();
        assert_eq!(f1.fractions, f2.fractions);
        assert_eq!(r1[17].amplitudes, r2[17].amplitudes);
        assert_eq!(f1.exponent, f2.exponent);
    }
}
