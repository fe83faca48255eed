//! Lattice convolutions and the nonlinear map F.
//!
//! In Fourier variables the equation becomes
//! diag(n·ω + j²) û + δ (û∗v̂)^{∗p} ∗ û = 0 together with its conjugate
//! block, written collectively as F(û, v̂) = 0. Convolutions are computed by
//! sparse direct summation while supports are small and by a dense FFT over
//! the (tight) support box otherwise; both paths are compared in tests.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::field::{FieldError, FourierField, ProblemSpec};
use crate::lattice::{LatticeSite, ModeSet, TruncationSpec};

/// Sparse direct summation is used while both supports stay below this.
pub const SPARSE_SUPPORT_CAP: usize = 10_000;
/// The FFT path refuses boxes above this many cells and falls back to
/// direct summation.
const FFT_BOX_CAP: usize = 1 << 26;

/// The B basic frequencies ω (rad/time), in mode order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector(pub Vec<f64>);

impl FrequencyVector {
    /// ω^{(0)} = {j_k²}: the eigenvalues of the linear operator.
    pub fn unperturbed(modes: &ModeSet) -> Self {
        Self((0..modes.count()).map(|k| modes.mode_j_sq(k) as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// n·ω for a site's time multi-index.
    pub fn dot_n(&self, site: &LatticeSite) -> f64 {
        site.n
            .iter()
            .zip(&self.0)
            .map(|(&n, &w)| n as f64 * w)
            .sum()
    }

    /// The u-block symbol n·ω + j² (+1) or the v-block symbol −n·ω + j² (−1).
    pub fn divisor(&self, site: &LatticeSite, sign: f64) -> f64 {
        sign * self.dot_n(site) + site.j_sq() as f64
    }
}

/// A (û, v̂) pair sharing one truncation.
#[derive(Clone, Debug)]
pub struct FieldPair {
    pub u: FourierField,
    pub v: FourierField,
}

impl FieldPair {
    pub fn zero(b: usize, d: usize, trunc: TruncationSpec) -> Self {
        Self {
            u: FourierField::zero(b, d, trunc),
            v: FourierField::zero(b, d, trunc),
        }
    }

    /// Builds the conjugate block from û and pairs them.
    pub fn from_u(u: FourierField) -> Result<Self, FieldError> {
        let v = crate::field::conjugate_field(&u)?;
        Ok(Self { u, v })
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            u: self.u.add(&other.u),
            v: self.v.add(&other.v),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            u: self.u.sub(&other.u),
            v: self.v.sub(&other.v),
        }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            u: self.u.scale(c),
            v: self.v.scale(c),
        }
    }

    pub fn analytic_norm(&self, beta: f64) -> f64 {
        crate::field::analytic_norm(&self.u, beta) + crate::field::analytic_norm(&self.v, beta)
    }
}

/// (f∗g)(s) = Σ_{s₁+s₂=s} f(s₁) g(s₂), pruned to `out`; path chosen by
/// support size.
pub fn convolve_trunc(f: &FourierField, g: &FourierField, out: TruncationSpec) -> FourierField {
    if f.len() <= SPARSE_SUPPORT_CAP && g.len() <= SPARSE_SUPPORT_CAP {
        convolve_sparse(f, g, out)
    } else {
        match convolve_fft(f, g, out) {
            Some(h) => h,
            None => convolve_sparse(f, g, out),
        }
    }
}

/// Convolution pruned to f's own truncation.
pub fn convolve(f: &FourierField, g: &FourierField) -> FourierField {
    convolve_trunc(f, g, f.trunc())
}

/// Direct summation over support pairs in canonical order; the per-site
/// accumulation order is fixed, so results are bit-reproducible.
pub fn convolve_sparse(f: &FourierField, g: &FourierField, out: TruncationSpec) -> FourierField {
    let mut h = FourierField::zero(f.b(), f.d(), out);
    h.add_dropped_mass(f.dropped_mass() + g.dropped_mass());
    for (s1, a1) in f.iter() {
        for (s2, a2) in g.iter() {
            h.accumulate(s1.translate(s2), a1 * a2);
        }
    }
    h.prune(0.0);
    h
}

/// Dense FFT convolution over the tight support box; exact (no aliasing)
/// because each axis is padded to the sum of the supports. Returns `None`
/// when the box exceeds the cell cap.
pub fn convolve_fft(f: &FourierField, g: &FourierField, out: TruncationSpec) -> Option<FourierField> {
    let axes = f.b() + f.d();
    if f.is_empty() || g.is_empty() {
        let mut h = FourierField::zero(f.b(), f.d(), out);
        h.add_dropped_mass(f.dropped_mass() + g.dropped_mass());
        return Some(h);
    }
    let bounds = |field: &FourierField| -> (Vec<i64>, Vec<i64>) {
        let mut lo = vec![i64::MAX; axes];
        let mut hi = vec![i64::MIN; axes];
        for (s, _) in field.iter() {
            for (i, &v) in s.n.iter().chain(s.j.iter()).enumerate() {
                lo[i] = lo[i].min(v as i64);
                hi[i] = hi[i].max(v as i64);
            }
        }
        (lo, hi)
    };
    let (flo, fhi) = bounds(f);
    let (glo, ghi) = bounds(g);
    let lo: Vec<i64> = flo.iter().zip(&glo).map(|(a, b)| a + b).collect();
    let hi: Vec<i64> = fhi.iter().zip(&ghi).map(|(a, b)| a + b).collect();
    let dims: Vec<usize> = hi.iter().zip(&lo).map(|(h, l)| (h - l + 1) as usize).collect();
    let total: usize = dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d).filter(|&t| t <= FFT_BOX_CAP)
    })?;

    let strides = row_major_strides(&dims);
    let flatten = |s: &LatticeSite, base_lo: &[i64]| -> usize {
        s.n.iter()
            .chain(s.j.iter())
            .enumerate()
            .map(|(i, &v)| (v as i64 - base_lo[i]) as usize * strides[i])
            .sum()
    };

    // Each factor is placed relative to its own support offset; the product
    // then lives relative to lo = flo + glo.
    let mut fa = vec![Complex64::ZERO; total];
    for (s, a) in f.iter() {
        fa[flatten(s, &flo)] = *a;
    }
    let mut ga = vec![Complex64::ZERO; total];
    for (s, a) in g.iter() {
        ga[flatten(s, &glo)] = *a;
    }

    let mut planner = FftPlanner::new();
    fft_all_axes(&mut fa, &dims, &strides, &mut planner, false);
    fft_all_axes(&mut ga, &dims, &strides, &mut planner, false);
    for (a, b) in fa.iter_mut().zip(&ga) {
        *a *= b;
    }
    fft_all_axes(&mut fa, &dims, &strides, &mut planner, true);
    let scale = 1.0 / total as f64;

    let mut h = FourierField::zero(f.b(), f.d(), out);
    h.add_dropped_mass(f.dropped_mass() + g.dropped_mass());
    let b = f.b();
    let mut coord = vec![0i64; axes];
    for (idx, &val) in fa.iter().enumerate() {
        let val = val * scale;
        if val == Complex64::ZERO {
            continue;
        }
        let mut rem = idx;
        for i in 0..axes {
            coord[i] = (rem / strides[i]) as i64 + lo[i];
            rem %= strides[i];
        }
        let site = LatticeSite::new(
            coord[..b].iter().map(|&v| v as i32).collect(),
            coord[b..].iter().map(|&v| v as i32).collect(),
        );
        h.accumulate(site, val);
    }
    Some(h)
}

pub(crate) fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

pub(crate) fn fft_all_axes(
    data: &mut [Complex64],
    dims: &[usize],
    strides: &[usize],
    planner: &mut FftPlanner<f64>,
    inverse: bool,
) {
    let total = data.len();
    for axis in 0..dims.len() {
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let stride = strides[axis];
        let mut line = vec![Complex64::ZERO; len];
        let block = stride * len;
        let mut base = 0;
        while base < total {
            for off in 0..stride {
                let start = base + off;
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = data[start + k * stride];
                }
                fft.process(&mut line);
                for (k, &v) in line.iter().enumerate() {
                    data[start + k * stride] = v;
                }
            }
            base += block;
        }
    }
}

/// Truncation wide enough that pruning intermediates of (u∗v)^{∗p}∗u cannot
/// lose contributions that land inside `out`.
pub fn product_closure_trunc(out: TruncationSpec, factor: TruncationSpec, p: u32) -> TruncationSpec {
    let k = 2 * p as i32 + 1;
    TruncationSpec {
        n_max: out.n_max.saturating_add(k.saturating_mul(factor.n_max)),
        j_max: out.j_max.saturating_add(k.saturating_mul(factor.j_max)),
        newton_iters: out.newton_iters,
    }
}

/// (u∗v)^{∗p} ∗ u on `out`, intermediates kept exact.
pub fn nonlinear_term(
    u: &FourierField,
    v: &FourierField,
    p: u32,
    out: TruncationSpec,
) -> FourierField {
    assert!(p >= 1, "nonlinearity power must be ≥ 1");
    let wide = product_closure_trunc(out, u.trunc(), p);
    let uv = convolve_trunc(u, v, wide);
    let mut acc = uv.clone();
    for _ in 1..p {
        acc = convolve_trunc(&acc, &uv, wide);
    }
    convolve_trunc(&acc, u, out).restricted_to(out)
}

/// Both composite symbols of the linearization at (u, v):
/// (u∗v)^{∗p} and (u∗v)^{∗(p−1)}∗u∗u (and its v∗v mirror via arguments).
pub fn composite_kernels(
    u: &FourierField,
    v: &FourierField,
    p: u32,
    out: TruncationSpec,
) -> (FourierField, FourierField, FourierField) {
    let wide = product_closure_trunc(out, u.trunc(), p);
    let uv = convolve_trunc(u, v, wide);
    let mut uv_p = uv.clone();
    for _ in 1..p {
        uv_p = convolve_trunc(&uv_p, &uv, wide);
    }
    let uv_pm1 = if p == 1 {
        unit_field(u.b(), u.d(), wide)
    } else {
        let mut acc = uv.clone();
        for _ in 2..p {
            acc = convolve_trunc(&acc, &uv, wide);
        }
        acc
    };
    let uu = convolve_trunc(&convolve_trunc(&uv_pm1, u, wide), u, out).restricted_to(out);
    let vv = convolve_trunc(&convolve_trunc(&uv_pm1, v, wide), v, out).restricted_to(out);
    (uv_p.restricted_to(out), uu, vv)
}

/// The convolution identity: 1 at the origin.
pub fn unit_field(b: usize, d: usize, trunc: TruncationSpec) -> FourierField {
    let mut f = FourierField::zero(b, d, trunc);
    f.insert(
        LatticeSite::new(vec![0; b], vec![0; d]),
        Complex64::new(1.0, 0.0),
    )
    .expect("origin is always inside a truncation");
    f
}

/// F_u = diag(n·ω + j²) û + δ (û∗v̂)^{∗p} ∗ û and
/// F_v = diag(−n·ω + j²) v̂ + δ (û∗v̂)^{∗p} ∗ v̂, evaluated on `out`.
pub fn evaluate_f(
    u: &FourierField,
    v: &FourierField,
    omega: &FrequencyVector,
    spec: &ProblemSpec,
    out: TruncationSpec,
) -> Result<FieldPair, FieldError> {
    if omega.len() != u.b() {
        return Err(FieldError::DimensionMismatch {
            b: u.b(),
            d: u.d(),
            got_b: omega.len(),
            got_d: u.d(),
        });
    }
    let p = spec.power;
    let delta = Complex64::new(spec.delta, 0.0);
    let wide = product_closure_trunc(out, u.trunc(), p);
    let uv = convolve_trunc(u, v, wide);
    let mut uv_p = uv.clone();
    for _ in 1..p {
        uv_p = convolve_trunc(&uv_p, &uv, wide);
    }
    let mut fu = convolve_trunc(&uv_p, u, out)
        .restricted_to(out)
        .scale(delta);
    let mut fv = convolve_trunc(&uv_p, v, out)
        .restricted_to(out)
        .scale(delta);
    for (s, a) in u.iter() {
        fu.accumulate(s.clone(), a * omega.divisor(s, 1.0));
    }
    for (s, a) in v.iter() {
        fv.accumulate(s.clone(), a * omega.divisor(s, -1.0));
    }
    fu.prune(0.0);
    fv.prune(0.0);
    Ok(FieldPair { u: fu, v: fv })
}
