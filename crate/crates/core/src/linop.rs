//! The linearized operator F′(u,v), its restrictions and linear solves.
//!
//! F′ is the 2×2 block operator
//!   [ diag(n·ω+j²)   0            ]     [ (p+1)(u∗v)^{∗p}          p(u∗v)^{∗(p−1)}∗u∗u ]
//!   [ 0              diag(−n·ω+j²)] + δ [ p(u∗v)^{∗(p−1)}∗v∗v     (p+1)(u∗v)^{∗p}      ]
//! acting on (û, v̂). A restriction keeps the same site set A in both blocks.
//! T is the restriction off the resonant set S; T_N additionally bands
//! ‖n‖₁ ≤ N. Solves use a sparse LU factorization; near-singular pivots are
//! the signal that the amplitude vector must be excised.

use std::collections::HashSet;
use std::io::Write;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::field::{FieldError, FourierField, ProblemSpec};
use crate::lattice::{LatticeSite, ResonantSet, SiteIndex};
use crate::nonlinear::{composite_kernels, FieldPair, FrequencyVector};

#[derive(Debug, thiserror::Error)]
pub enum LinopError {
    #[error("restriction retains no sites")]
    EmptyRestriction,
    #[error(
        "operator near-singular (σ_min estimate {sigma_min_est:.3e} < floor {floor:.3e}); \
         the amplitude vector should be excised"
    )]
    NearSingular { sigma_min_est: f64, floor: f64 },
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("solve verification failed: relative residual {residual_rel:.3e}")]
    Unverified { residual_rel: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Which block of the pair a row or column belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    U,
    V,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// σ_min estimates below this raise [`LinopError::NearSingular`].
    pub singular_floor: f64,
    /// Maximum allowed relative residual ‖op·x − rhs‖/‖rhs‖.
    pub residual_cap: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            singular_floor: 0.0,
            residual_cap: 1e-10,
        }
    }
}

impl SolveOptions {
    /// Floor ε·|δ| from the excision analysis: O(δ^{-1}) is the healthy
    /// scale of ‖T_N^{-1}‖.
    pub fn excision(spec: &ProblemSpec) -> Self {
        Self {
            singular_floor: spec.epsilon * spec.delta.abs(),
            residual_cap: 1e-10,
        }
    }
}

/// Diagnostics of one linear solve.
#[derive(Clone, Copy, Debug)]
pub struct SolveReport {
    /// Inverse-power estimate of the smallest singular value.
    pub sigma_min_est: f64,
    /// ‖x‖₂/‖rhs‖₂, the empirical witness for ‖T_N^{-1}‖.
    pub norm_ratio: f64,
    /// ‖op·x − rhs‖₂/‖rhs‖₂ after the solve.
    pub residual_rel: f64,
    /// Number of retained sites (per block count included).
    pub retained: usize,
}

/// Assembled restriction of F′ to A×A over a site index.
pub struct LinearizedOperator<'a> {
    index: &'a SiteIndex,
    /// Retained (block, ordinal) pairs in row order: all U rows, then V rows.
    retained: Vec<(Block, usize)>,
    /// ordinal → position in `retained` for each block.
    pos_u: Vec<Option<u32>>,
    pos_v: Vec<Option<u32>>,
    matrix: SparseColMat<usize, c64>,
    omega: FrequencyVector,
    max_abs_entry: f64,
}

fn c(a: Complex64) -> c64 {
    c64::new(a.re, a.im)
}

fn cc(a: c64) -> Complex64 {
    Complex64::new(a.re, a.im)
}

/// F′(u,v) restricted to the sites satisfying `pred`, within `index`.
pub fn assemble<'a, P: Fn(&LatticeSite) -> bool>(
    u: &FourierField,
    v: &FourierField,
    omega: &FrequencyVector,
    spec: &ProblemSpec,
    index: &'a SiteIndex,
    pred: P,
) -> Result<LinearizedOperator<'a>, LinopError> {
    let kernel_trunc = index.trunc().expanded(2, 2);
    let (uv_p, uu, vv) = composite_kernels(u, v, spec.power, kernel_trunc);
    let delta = spec.delta;
    let p = spec.power as f64;
    let k11 = uv_p.scale(Complex64::new(delta * (p + 1.0), 0.0));
    let k12 = uu.scale(Complex64::new(delta * p, 0.0));
    let k21 = vv.scale(Complex64::new(delta * p, 0.0));

    let mut retained = Vec::new();
    let mut pos_u = vec![None; index.len()];
    let mut pos_v = vec![None; index.len()];
    for o in 0..index.len() {
        if pred(index.site(o)) {
            pos_u[o] = Some(retained.len() as u32);
            retained.push((Block::U, o));
        }
    }
    for o in 0..index.len() {
        if pos_u[o].is_some() {
            pos_v[o] = Some(retained.len() as u32);
            retained.push((Block::V, o));
        }
    }
    if retained.is_empty() {
        return Err(LinopError::EmptyRestriction);
    }

    let n = retained.len();
    let half = n / 2;
    let mut triplets: Vec<Triplet<usize, usize, c64>> = Vec::new();
    let mut max_abs: f64 = 0.0;
    let mut push = |r: usize, cidx: usize, val: Complex64, max_abs: &mut f64| {
        *max_abs = max_abs.max(val.norm());
        triplets.push(Triplet::new(r, cidx, c(val)));
    };

    for col in 0..half {
        let (_, o) = retained[col];
        let s = index.site(o).clone();
        // u-column: diagonal + K11 into u-rows, K21 into v-rows.
        push(
            col,
            col,
            Complex64::new(omega.divisor(&s, 1.0), 0.0),
            &mut max_abs,
        );
        for (dsite, a) in k11.iter() {
            let target = s.translate(dsite);
            if let Some(t) = index.ordinal(&target) {
                if let Some(r) = pos_u[t] {
                    push(r as usize, col, *a, &mut max_abs);
                }
            }
        }
        for (dsite, a) in k21.iter() {
            let target = s.translate(dsite);
            if let Some(t) = index.ordinal(&target) {
                if let Some(r) = pos_v[t] {
                    push(r as usize, col, *a, &mut max_abs);
                }
            }
        }
        // v-column (same site, shifted position): diagonal + K22 into
        // v-rows, K12 into u-rows.
        let vcol = col + half;
        push(
            vcol,
            vcol,
            Complex64::new(omega.divisor(&s, -1.0), 0.0),
            &mut max_abs,
        );
        for (dsite, a) in k11.iter() {
            let target = s.translate(dsite);
            if let Some(t) = index.ordinal(&target) {
                if let Some(r) = pos_v[t] {
                    push(r as usize, vcol, *a, &mut max_abs);
                }
            }
        }
        for (dsite, a) in k12.iter() {
            let target = s.translate(dsite);
            if let Some(t) = index.ordinal(&target) {
                if let Some(r) = pos_u[t] {
                    push(r as usize, vcol, *a, &mut max_abs);
                }
            }
        }
    }

    let matrix = SparseColMat::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| LinopError::Factorization(format!("triplet assembly: {e:?}")))?;
    Ok(LinearizedOperator {
        index,
        retained,
        pos_u,
        pos_v,
        matrix,
        omega: omega.clone(),
        max_abs_entry: max_abs,
    })
}

/// T_N = F′ restricted off S and banded to ‖n‖₁ ≤ `n_band`.
pub fn assemble_t_n<'a>(
    u: &FourierField,
    v: &FourierField,
    omega: &FrequencyVector,
    spec: &ProblemSpec,
    index: &'a SiteIndex,
    res: &ResonantSet,
    n_band: i32,
) -> Result<LinearizedOperator<'a>, LinopError> {
    assemble(u, v, omega, spec, index, |s| {
        s.n_l1() <= n_band as i64 && !res.contains(s)
    })
}

/// Like [`assemble_t_n`] with the domain further limited to a site whitelist
/// (ordinals); used to keep large-B solves desk-scale.
pub fn assemble_t_n_on<'a>(
    u: &FourierField,
    v: &FourierField,
    omega: &FrequencyVector,
    spec: &ProblemSpec,
    index: &'a SiteIndex,
    res: &ResonantSet,
    n_band: i32,
    whitelist: &HashSet<usize>,
) -> Result<LinearizedOperator<'a>, LinopError> {
    assemble(u, v, omega, spec, index, |s| {
        s.n_l1() <= n_band as i64
            && !res.contains(s)
            && index.ordinal(s).map(|o| whitelist.contains(&o)).unwrap_or(false)
    })
}

/// Ordinals reachable from the seed support in ≤ `hops` kernel translations.
/// Couplings into the dropped complement are O(δ^{hops+1})-small.
pub fn support_closure(
    seeds: &[&FourierField],
    kernels: &[&FourierField],
    hops: usize,
    index: &SiteIndex,
) -> HashSet<usize> {
    let mut frontier: HashSet<usize> = HashSet::new();
    for f in seeds {
        for (s, _) in f.iter() {
            if let Some(o) = index.ordinal(s) {
                frontier.insert(o);
            }
        }
    }
    let mut all = frontier.clone();
    for _ in 0..hops {
        let mut next = HashSet::new();
        for &o in &frontier {
            let s = index.site(o);
            for k in kernels {
                for (dsite, _) in k.iter() {
                    let t = s.translate(dsite);
                    if let Some(t) = index.ordinal(&t) {
                        if !all.contains(&t) {
                            next.insert(t);
                        }
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        all.extend(next.iter().copied());
        frontier = next;
    }
    all
}

impl<'a> LinearizedOperator<'a> {
    pub fn retained_len(&self) -> usize {
        self.retained.len()
    }

    pub fn omega(&self) -> &FrequencyVector {
        &self.omega
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.max_abs_entry
    }

    /// Is the site retained by the restriction?
    pub fn retains(&self, site: &LatticeSite) -> bool {
        self.index
            .ordinal(site)
            .map(|o| self.pos_u[o].is_some())
            .unwrap_or(false)
    }

    fn pair_to_vec(&self, rhs: &FieldPair) -> Mat<c64> {
        let mut out = Mat::<c64>::zeros(self.retained.len(), 1);
        for (s, a) in rhs.u.iter() {
            if let Some(o) = self.index.ordinal(s) {
                if let Some(r) = self.pos_u[o] {
                    out[(r as usize, 0)] = c(*a);
                }
            }
        }
        for (s, a) in rhs.v.iter() {
            if let Some(o) = self.index.ordinal(s) {
                if let Some(r) = self.pos_v[o] {
                    out[(r as usize, 0)] = c(*a);
                }
            }
        }
        out
    }

    fn vec_to_pair(&self, x: MatRef<'_, c64>) -> FieldPair {
        let trunc = self.index.trunc();
        let mut pair = FieldPair::zero(self.index.b(), self.index.d(), trunc);
        for (r, &(block, o)) in self.retained.iter().enumerate() {
            let val = cc(x[(r, 0)]);
            if val == Complex64::ZERO {
                continue;
            }
            let site = self.index.site(o).clone();
            match block {
                Block::U => pair.u.accumulate(site, val),
                Block::V => pair.v.accumulate(site, val),
            }
        }
        pair
    }

    /// op · pair, for verification and finite-difference cross-checks.
    pub fn apply(&self, x: &FieldPair) -> FieldPair {
        let xv = self.pair_to_vec(x);
        let yv = &self.matrix * &xv;
        self.vec_to_pair(yv.as_ref())
    }

    /// Matrix entry at ((row_block, row_site), (col_block, col_site)), zero
    /// if either is not retained. Intended for tests and dumps.
    pub fn entry(
        &self,
        row: (Block, &LatticeSite),
        col: (Block, &LatticeSite),
    ) -> Complex64 {
        let rpos = match self.position(row.0, row.1) {
            Some(p) => p,
            None => return Complex64::ZERO,
        };
        let cpos = match self.position(col.0, col.1) {
            Some(p) => p,
            None => return Complex64::ZERO,
        };
        let range = self.matrix.col_range(cpos);
        let rows = self.matrix.row_idx();
        let vals = self.matrix.val();
        for k in range {
            if rows[k] == rpos {
                return cc(vals[k]);
            }
        }
        Complex64::ZERO
    }

    fn position(&self, block: Block, site: &LatticeSite) -> Option<usize> {
        let o = self.index.ordinal(site)?;
        match block {
            Block::U => self.pos_u[o].map(|p| p as usize),
            Block::V => self.pos_v[o].map(|p| p as usize),
        }
    }

    /// Coordinate text dump `row col re im`, one entry per line.
    pub fn write_coordinate_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for col in 0..self.matrix.ncols() {
            for k in self.matrix.col_range(col) {
                let row = self.matrix.row_idx()[k];
                let v = self.matrix.val()[k];
                writeln!(w, "{} {} {:.17e} {:.17e}", row, col, v.re, v.im)?;
            }
        }
        Ok(())
    }

    pub fn factor(&self) -> Result<FactoredOperator<'a, '_>, LinopError> {
        let lu = self
            .matrix
            .sp_lu()
            .map_err(|e| LinopError::Factorization(format!("{e:?}")))?;
        Ok(FactoredOperator { op: self, lu })
    }
}

pub struct FactoredOperator<'a, 'b> {
    op: &'b LinearizedOperator<'a>,
    lu: faer::sparse::linalg::solvers::Lu<usize, c64>,
}

impl FactoredOperator<'_, '_> {
    /// Solves op·x = rhs on the restriction; x vanishes off it.
    pub fn solve(
        &self,
        rhs: &FieldPair,
        opts: &SolveOptions,
    ) -> Result<(FieldPair, SolveReport), LinopError> {
        let b = self.op.pair_to_vec(rhs);
        let x = self.lu.solve(&b);
        let ax = &self.op.matrix * &x;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut xn = 0.0f64;
        for i in 0..x.nrows() {
            let r = ax[(i, 0)] - b[(i, 0)];
            num += r.re * r.re + r.im * r.im;
            den += b[(i, 0)].re.powi(2) + b[(i, 0)].im.powi(2);
            xn += x[(i, 0)].re.powi(2) + x[(i, 0)].im.powi(2);
        }
        let (num, den, xn) = (num.sqrt(), den.sqrt(), xn.sqrt());
        let sigma_min_est = self.sigma_min_estimate();
        let report = SolveReport {
            sigma_min_est,
            norm_ratio: if den > 0.0 { xn / den } else { 0.0 },
            residual_rel: if den > 0.0 { num / den } else { 0.0 },
            retained: self.op.retained.len(),
        };
        if sigma_min_est < opts.singular_floor {
            return Err(LinopError::NearSingular {
                sigma_min_est,
                floor: opts.singular_floor,
            });
        }
        if den > 0.0 && num / den > opts.residual_cap {
            return Err(LinopError::Unverified {
                residual_rel: num / den,
            });
        }
        Ok((self.op.vec_to_pair(x.as_ref()), report))
    }

    /// Inverse power iteration on A^{-1}A^{-H} with a fixed seed; returns
    /// the estimated smallest singular value of the operator.
    pub fn sigma_min_estimate(&self) -> f64 {
        let n = self.op.retained.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x51de_caf5);
        let mut z = Mat::<c64>::from_fn(n, 1, |_, _| {
            c64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let mut norm = |m: &Mat<c64>| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                s += m[(i, 0)].re.powi(2) + m[(i, 0)].im.powi(2);
            }
            s.sqrt()
        };
        let z0 = norm(&z);
        if z0 == 0.0 {
            return 0.0;
        }
        for i in 0..n {
            z[(i, 0)] = z[(i, 0)] * c64::new(1.0 / z0, 0.0);
        }
        let mut gain = 0.0;
        for _ in 0..4 {
            // w = A^{-H} z via conj(A^T conj-solve), then y = A^{-1} w.
            let mut zc = z.clone();
            for i in 0..n {
                zc[(i, 0)] = zc[(i, 0)].conj();
            }
            let w = self.lu.solve_transpose(&zc);
            let mut wc = w.clone();
            for i in 0..n {
                wc[(i, 0)] = wc[(i, 0)].conj();
            }
            let y = self.lu.solve(&wc);
            let g = norm(&y);
            if !g.is_finite() || g == 0.0 {
                return 0.0;
            }
            gain = g;
            for i in 0..n {
                z[(i, 0)] = y[(i, 0)] * c64::new(1.0 / g, 0.0);
            }
        }
        // gain ≈ σ_max(A^{-1})² per iteration pair at convergence.
        1.0 / gain.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{conjugate_field, initial_field, l2_norm, ModeData};
    use crate::lattice::{build_site_index, resonant_set, ModeSet, TruncationSpec};
    use crate::nonlinear::evaluate_f;

    fn spec(delta: f64, p: u32) -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            power: p,
            delta,
            order: 3.0,
            weight_beta: 0.4,
            weight_beta_prime: 0.2,
            epsilon: 1e-3,
        }
    }

    fn site2(n: [i32; 2], j: i32) -> LatticeSite {
        LatticeSite::new(n.to_vec(), vec![j])
    }

    #[test]
    fn zero_coupling_gives_diagonal_solve() {
        let t = TruncationSpec::new(2, 3, 1).unwrap();
        let modes = ModeSet::new(vec![vec![1], vec![-2]], vec![0, 1], 2).unwrap();
        let idx = build_site_index(&t, &modes).unwrap();
        let data = ModeData::new(vec![0.5, 0.4], vec![0.0, 0.0]).unwrap();
        let u = initial_field(&modes, &data, t).unwrap();
        let v = conjugate_field(&u).unwrap();
        let mut sp = spec(1e-2, 1);
        sp.delta = 0.0;
        let omega = FrequencyVector(vec![1.5, 4.25]);
        let res = resonant_set(&modes);
        // At δ = 0 the (n,j) = (0,0) site has an exactly zero divisor; keep
        // the restriction away from it so the diagonal system is invertible.
        let op = assemble(&u, &v, &omega, &sp, &idx, |s| {
            s.n_l1() <= 2 && !res.contains(s) && omega.divisor(s, 1.0).abs() > 1e-9
        })
        .unwrap();
        let factored = op.factor().unwrap();

        let mut rhs = FieldPair::zero(2, 1, t);
        rhs.u
            .insert(site2([1, 0], 2), Complex64::new(1.0, -2.0))
            .unwrap();
        rhs.v
            .insert(site2([0, -1], -3), Complex64::new(0.5, 0.25))
            .unwrap();
        let (x, rep) = factored.solve(&rhs, &SolveOptions::default()).unwrap();
        // x(s) = rhs(s)/(±n·ω + j²).
        let du = omega.divisor(&site2([1, 0], 2), 1.0);
        assert!((x.u.get(&site2([1, 0], 2)) - Complex64::new(1.0, -2.0) / du).norm() < 1e-14);
        let dv = omega.divisor(&site2([0, -1], -3), -1.0);
        assert!((x.v.get(&site2([0, -1], -3)) - Complex64::new(0.5, 0.25) / dv).norm() < 1e-14);
        assert!(rep.residual_rel < 1e-12);
    }

    #[test]
    fn single_mode_offdiagonal_patterns() {
        // p = 1, one mode of amplitude a: the u-u kernel is 2δa² at Δ = 0
        // and the u-v kernel is δa² at Δ = (−2e₁, 2j₁).
        let t = TruncationSpec::new(3, 3, 1).unwrap();
        let modes = ModeSet::new(vec![vec![1]], vec![0], 1).unwrap();
        let idx = build_site_index(&t, &modes).unwrap();
        let a = 0.3;
        let data = ModeData::new(vec![a], vec![0.0]).unwrap();
        let u = initial_field(&modes, &data, t).unwrap();
        let v = conjugate_field(&u).unwrap();
        let sp = spec(1e-2, 1);
        let omega = FrequencyVector::unperturbed(&modes);
        let op = assemble(&u, &v, &omega, &sp, &idx, |_| true).unwrap();

        let s = LatticeSite::new(vec![0], vec![2]);
        let diag = op.entry((Block::U, &s), (Block::U, &s));
        let want = omega.divisor(&s, 1.0) + sp.delta * 2.0 * a * a;
        assert!((diag - Complex64::new(want, 0.0)).norm() < 1e-15);

        // K12 couples the u-row at s to the v-column at s − (−2e₁, 2).
        let s_col = LatticeSite::new(vec![2], vec![0]);
        let coupling = op.entry((Block::U, &s), (Block::V, &s_col));
        assert!((coupling - Complex64::new(sp.delta * a * a, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn matrix_matches_finite_difference_jacobian() {
        let t = TruncationSpec::new(2, 4, 1).unwrap();
        let modes = ModeSet::new(vec![vec![1], vec![-2]], vec![0, 1], 2).unwrap();
        let idx = build_site_index(&t, &modes).unwrap();
        let data = ModeData::new(vec![0.5, 0.4], vec![0.0, 0.0]).unwrap();
        let u0 = initial_field(&modes, &data, t).unwrap();
        let v0 = conjugate_field(&u0).unwrap();
        let sp = spec(5e-2, 1);
        let omega = FrequencyVector(vec![1.1, 4.3]);
        let op = assemble(&u0, &v0, &omega, &sp, &idx, |_| true).unwrap();

        // Columns of F′ against central differences of F in both block
        // directions; h-sweep checks the O(h²) behaviour stays bounded.
        let probe_sites = [site2([-1, 0], 1), site2([0, 0], 0), site2([1, -1], 3)];
        for s in &probe_sites {
            for block in [Block::U, Block::V] {
                let mut col_probe = FieldPair::zero(2, 1, t);
                match block {
                    Block::U => col_probe.u.insert(s.clone(), Complex64::ONE).unwrap(),
                    Block::V => col_probe.v.insert(s.clone(), Complex64::ONE).unwrap(),
                }
                let want = op.apply(&col_probe);
                let mut errs = Vec::new();
                for h in [1e-4, 1e-5, 1e-6] {
                    let hh = Complex64::new(h, 0.0);
                    let up = match block {
                        Block::U => u0.add(&col_probe.u.scale(hh)),
                        Block::V => u0.clone(),
                    };
                    let vp = match block {
                        Block::U => v0.clone(),
                        Block::V => v0.add(&col_probe.v.scale(hh)),
                    };
                    let um = match block {
                        Block::U => u0.add(&col_probe.u.scale(-hh)),
                        Block::V => u0.clone(),
                    };
                    let vm = match block {
                        Block::U => v0.clone(),
                        Block::V => v0.add(&col_probe.v.scale(-hh)),
                    };
                    let fp = evaluate_f(&up, &vp, &omega, &sp, t).unwrap();
                    let fm = evaluate_f(&um, &vm, &omega, &sp, t).unwrap();
                    let diff = fp.sub(&fm).scale(Complex64::new(0.5 / h, 0.0));
                    let err = diff.sub(&want).analytic_norm(0.0);
                    errs.push(err);
                }
                for e in errs {
                    assert!(e < 1e-8, "site {s:?} err {e}");
                }
            }
        }
    }

    #[test]
    fn t_n_excludes_resonant_sites_and_bands() {
        let t = TruncationSpec::new(2, 3, 1).unwrap();
        let modes = ModeSet::new(vec![vec![1], vec![-2]], vec![0, 1], 2).unwrap();
        let idx = build_site_index(&t, &modes).unwrap();
        let data = ModeData::new(vec![0.5, 0.4], vec![0.0, 0.0]).unwrap();
        let u = initial_field(&modes, &data, t).unwrap();
        let v = conjugate_field(&u).unwrap();
        let sp = spec(1e-2, 1);
        let omega = FrequencyVector::unperturbed(&modes);
        let res = resonant_set(&modes);
        let op = assemble_t_n(&u, &v, &omega, &sp, &idx, &res, 2).unwrap();
        for s in res.u_sites().iter().chain(res.v_sites()) {
            assert!(!op.retains(s));
        }

        // N = 0 retains only n = 0 sites.
        let op0 = assemble_t_n(&u, &v, &omega, &sp, &idx, &res, 0).unwrap();
        assert_eq!(op0.retained_len(), 2 * 7); // j ∈ {−3..3}, n = (0,0)

        // Entry-level match against assemble with the explicit predicate.
        let op_explicit = assemble(&u, &v, &omega, &sp, &idx, |s| {
            s.n_l1() <= 2 && !res.contains(s)
        })
        .unwrap();
        assert_eq!(op.retained_len(), op_explicit.retained_len());
        let s1 = site2([0, 0], 1);
        let s2 = site2([1, -1], -2);
        for b1 in [Block::U, Block::V] {
            for b2 in [Block::U, Block::V] {
                assert_eq!(
                    op.entry((b1, &s1), (b2, &s2)),
                    op_explicit.entry((b1, &s1), (b2, &s2))
                );
            }
        }
    }

    #[test]
    fn solve_residual_on_random_rhs() {
        let t = TruncationSpec::new(3, 6, 1).unwrap();
        let modes = ModeSet::new(vec![vec![1], vec![-2]], vec![0, 1], 2).unwrap();
        let idx = build_site_index(&t, &modes).unwrap();
        let data = ModeData::new(vec![0.5, 0.4], vec![0.0, 0.0]).unwrap();
        let u = initial_field(&modes, &data, t).unwrap();
        let v = conjugate_field(&u).unwrap();
        let sp = spec(1e-2, 1);
        // After one Q-update the divisors at variety sites are O(δ) but
        // nonzero; use the shifted frequencies.
        let omega = FrequencyVector(vec![
            1.0 + sp.delta * (0.5f64.powi(2) + 2.0 * 0.4f64.powi(2)),
            4.0 + sp.delta * (2.0 * 0.5f64.powi(2) + 0.4f64.powi(2)),
        ]);
        let res = resonant_set(&modes);
        let op = assemble_t_n(&u, &v, &omega, &sp, &idx, &res, 3).unwrap();
        let f = op.factor().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rhs = FieldPair::zero(2, 1, t);
        for o in 0..idx.len() {
            let s = idx.site(o).clone();
            if s.n_l1() <= 3 && !res.contains(&s) && rng.gen_bool(0.3) {
                rhs.u
                    .insert(s.clone(), Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .unwrap();
                rhs.v
                    .insert(s, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .unwrap();
            }
        }
        let (x, rep) = f.solve(&rhs, &SolveOptions::default()).unwrap();
        let back = op.apply(&x);
        let err = back.sub(&rhs);
        let rel = (l2_norm(&err.u).powi(2) + l2_norm(&err.v).powi(2)).sqrt()
            / (l2_norm(&rhs.u).powi(2) + l2_norm(&rhs.v).powi(2)).sqrt();
        assert!(rel < 1e-12, "relative residual {rel}");
        assert!(rep.residual_rel < 1e-12);
    }

    #[test]
    fn norm_ratio_scales_like_inverse_delta() {
        // Excised single-mode case: the empirical ‖T_N^{-1}‖ witness grows
        // like C/δ as δ shrinks.
        let t = TruncationSpec::new(2, 3, 1).unwrap();
        let modes = ModeSet::new(vec![vec![1]], vec![0], 1).unwrap();
        let idx = build_site_index(&t, &modes).unwrap();
        let a = 0.7;
        let data = ModeData::new(vec![a], vec![0.0]).unwrap();
        let u = initial_field(&modes, &data, t).unwrap();
        let v = conjugate_field(&u).unwrap();
        let res = resonant_set(&modes);

        let mut ratios = Vec::new();
        for delta in [1e-2, 1e-3] {
            let sp = spec(delta, 1);
            let omega = FrequencyVector(vec![1.0 + delta * a * a]);
            let op = assemble_t_n(&u, &v, &omega, &sp, &idx, &res, 2).unwrap();
            let f = op.factor().unwrap();
            // Drive the small-divisor site (−e₁, −1).
            let mut rhs = FieldPair::zero(1, 1, t);
            rhs.u
                .insert(LatticeSite::new(vec![-1], vec![-1]), Complex64::ONE)
                .unwrap();
            let (_, rep) = f.solve(&rhs, &SolveOptions::excision(&sp)).unwrap();
            ratios.push((delta, rep.norm_ratio, rep.sigma_min_est));
        }
        let c0 = ratios[0].1 * ratios[0].0;
        let c1 = ratios[1].1 * ratios[1].0;
        assert!(c0 > 0.05 && c0 < 20.0, "C at 1e-2: {c0}");
        assert!(c1 > 0.05 && c1 < 20.0, "C at 1e-3: {c1}");
        // σ_min tracks δ·a² and stays above the excision floor ε·δ for
        // this healthy amplitude.
        for (delta, _, smin) in ratios {
            assert!(smin >= 1e-3 * delta, "σ_min {smin} at δ {delta}");
        }
    }

    #[test]
    fn reality_symmetry_preserved_by_solve() {
        let t = TruncationSpec::new(2, 4, 1).unwrap();
        let modes = ModeSet::new(vec![vec![1], vec![-2]], vec![0, 1], 2).unwrap();
        let idx = build_site_index(&t, &modes).unwrap();
        let data = ModeData::new(vec![0.5, 0.4], vec![0.0, 0.0]).unwrap();
        let u = initial_field(&modes, &data, t).unwrap();
        let v = conjugate_field(&u).unwrap();
        let sp = spec(1e-2, 1);
        let omega = FrequencyVector(vec![1.0057, 4.0066]);
        let res = resonant_set(&modes);
        let op = assemble_t_n(&u, &v, &omega, &sp, &idx, &res, 2).unwrap();
        let fct = op.factor().unwrap();

        // rhs respecting v = conj-reflect(u): solution must respect it too.
        let mut ru = FourierField::zero(2, 1, t);
        ru.insert(site2([0, 0], 1), Complex64::new(0.3, 0.1)).unwrap();
        ru.insert(site2([-1, -1], -1), Complex64::new(-0.2, 0.4)).unwrap();
        let rhs = FieldPair::from_u(ru).unwrap();
        let (x, _) = fct.solve(&rhs, &SolveOptions::default()).unwrap();
        let xv_expect = conjugate_field(&x.u).unwrap();
        for (s, a) in xv_expect.iter() {
            assert!((x.v.get(s) - a).norm() < 1e-12, "site {s:?}");
        }
    }
}
