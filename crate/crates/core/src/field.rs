//! Sparse complex coefficient fields on the truncated lattice, analytic
//! norms, conjugation symmetry and physical-space evaluation.
//!
//! A field stores û(n,j) for the ansatz u(t,x) = Σ û(n,j) e^{in·(θ+ωt)}e^{ij·x}.
//! Amplitudes at resonant sites are kept real and positive; the phases θ_j
//! live in [`ModeData`] and enter only through e^{in·θ}. The analytic norm
//! Σ e^{β|j|}|û| majorizes the sup of u on a complex strip of width β.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::lattice::{LatticeSite, ModeSet, TruncationSpec};

pub const DUMP_MAGIC: &[u8; 6] = b"QPNLS1";

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("site {site:?} outside truncation (N={n_max}, J_x={j_max})")]
    OutsideTruncation {
        site: LatticeSite,
        n_max: i32,
        j_max: i32,
    },
    #[error("truncation asymmetry: reflected site {site:?} not representable")]
    TruncationAsymmetry { site: LatticeSite },
    #[error("dimension mismatch: field is ({b}, {d}), argument is ({got_b}, {got_d})")]
    DimensionMismatch {
        b: usize,
        d: usize,
        got_b: usize,
        got_d: usize,
    },
    #[error("problem spec invalid: {0}")]
    InvalidSpec(String),
    #[error("mode data invalid: {0}")]
    InvalidModeData(String),
    #[error("coefficient dump malformed: {0}")]
    MalformedDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// All scalar problem parameters of i∂ₜu = −Δu + δ|u|^{2p}u.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    /// Spatial dimension d of the torus.
    pub dim: usize,
    /// Nonlinearity power p ≥ 1.
    pub power: u32,
    /// Coupling δ, 0 < |δ| < 1.
    pub delta: f64,
    /// Target residual order r > 1: the scheme aims for ‖ξ̃‖ < |δ|^r.
    pub order: f64,
    /// Analytic weight β > 0.
    pub weight_beta: f64,
    /// Reduced weight β' ∈ (0, β) used for residual reporting.
    pub weight_beta_prime: f64,
    /// Excision threshold ε for the small-divisor determinants.
    pub epsilon: f64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.dim == 0 {
            return Err(FieldError::InvalidSpec("dim must be positive".into()));
        }
        if self.power < 1 {
            return Err(FieldError::InvalidSpec("power p must be ≥ 1".into()));
        }
        if !(self.delta.abs() > 0.0 && self.delta.abs() < 1.0) {
            return Err(FieldError::InvalidSpec(format!(
                "delta must satisfy 0 < |δ| < 1, got {}",
                self.delta
            )));
        }
        if !(self.order > 1.0) {
            return Err(FieldError::InvalidSpec(format!(
                "order r must exceed 1, got {}",
                self.order
            )));
        }
        if !(self.weight_beta > 0.0) {
            return Err(FieldError::InvalidSpec("weight β must be positive".into()));
        }
        if !(self.weight_beta_prime > 0.0 && self.weight_beta_prime < self.weight_beta) {
            return Err(FieldError::InvalidSpec(
                "reduced weight must satisfy 0 < β' < β".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(FieldError::InvalidSpec("epsilon must be positive".into()));
        }
        Ok(())
    }

    /// The residual target |δ|^r.
    pub fn residual_target(&self) -> f64 {
        self.delta.abs().powf(self.order)
    }
}

/// Prescribed amplitudes a_k ∈ (0,1] and phases θ_k ∈ [0, 2π) per mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeData {
    amplitudes: Vec<f64>,
    phases: Vec<f64>,
}

impl ModeData {
    /// Phases are normalized into [0, 2π).
    pub fn new(amplitudes: Vec<f64>, phases: Vec<f64>) -> Result<Self, FieldError> {
        if amplitudes.len() != phases.len() {
            return Err(FieldError::InvalidModeData(
                "amplitude and phase counts differ".into(),
            ));
        }
        if amplitudes.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(FieldError::InvalidModeData(
                "amplitudes must lie in (0, 1]".into(),
            ));
        }
        let tau = std::f64::consts::TAU;
        let phases = phases.iter().map(|&t| t.rem_euclid(tau)).collect();
        Ok(Self { amplitudes, phases })
    }

    /// Non-generic amplitudes must be O(δ); we allow a factor 10 of slack.
    pub fn validate_scales(&self, modes: &ModeSet, spec: &ProblemSpec) -> Result<(), FieldError> {
        if self.amplitudes.len() != modes.count() {
            return Err(FieldError::InvalidModeData(format!(
                "{} amplitudes for {} modes",
                self.amplitudes.len(),
                modes.count()
            )));
        }
        for k in 0..modes.count() {
            if !modes.is_generic(k) && self.amplitudes[k] > 10.0 * spec.delta.abs() {
                return Err(FieldError::InvalidModeData(format!(
                    "non-generic mode {k} has amplitude {} > 10|δ| = {}",
                    self.amplitudes[k],
                    10.0 * spec.delta.abs()
                )));
            }
        }
        Ok(())
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn amplitude(&self, k: usize) -> f64 {
        self.amplitudes[k]
    }

    pub fn phase(&self, k: usize) -> f64 {
        self.phases[k]
    }

    pub fn with_amplitude(&self, k: usize, a: f64) -> Self {
        let mut out = self.clone();
        out.amplitudes[k] = a;
        out
    }

    pub fn with_phase(&self, k: usize, theta: f64) -> Self {
        let mut out = self.clone();
        out.phases[k] = theta.rem_euclid(std::f64::consts::TAU);
        out
    }
}

/// Sparse complex coefficients on the truncated lattice Z^{B+d}.
///
/// Out-of-truncation convolution products are dropped; their total absolute
/// mass accumulates in `dropped_mass` as a diagnostic.
#[derive(Clone, Debug)]
pub struct FourierField {
    b: usize,
    d: usize,
    trunc: TruncationSpec,
    entries: BTreeMap<LatticeSite, Complex64>,
    dropped_mass: f64,
}

impl FourierField {
    pub fn zero(b: usize, d: usize, trunc: TruncationSpec) -> Self {
        Self {
            b,
            d,
            trunc,
            entries: BTreeMap::new(),
            dropped_mass: 0.0,
        }
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn trunc(&self) -> TruncationSpec {
        self.trunc
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dropped_mass(&self) -> f64 {
        self.dropped_mass
    }

    pub(crate) fn add_dropped_mass(&mut self, mass: f64) {
        self.dropped_mass += mass;
    }

    pub fn check_dims(&self, site: &LatticeSite) -> Result<(), FieldError> {
        if site.n.len() != self.b || site.j.len() != self.d {
            return Err(FieldError::DimensionMismatch {
                b: self.b,
                d: self.d,
                got_b: site.n.len(),
                got_d: site.j.len(),
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, site: LatticeSite, amp: Complex64) -> Result<(), FieldError> {
        self.check_dims(&site)?;
        if !self.trunc.contains(&site) {
            return Err(FieldError::OutsideTruncation {
                site,
                n_max: self.trunc.n_max,
                j_max: self.trunc.j_max,
            });
        }
        if amp == Complex64::ZERO {
            self.entries.remove(&site);
        } else {
            self.entries.insert(site, amp);
        }
        Ok(())
    }

    /// Adds `amp` at `site`, dropping (and accounting) out-of-truncation mass.
    pub fn accumulate(&mut self, site: LatticeSite, amp: Complex64) {
        if !self.trunc.contains(&site) {
            self.dropped_mass += amp.norm();
            return;
        }
        *self.entries.entry(site).or_insert(Complex64::ZERO) += amp;
    }

    pub fn get(&self, site: &LatticeSite) -> Complex64 {
        self.entries.get(site).copied().unwrap_or(Complex64::ZERO)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LatticeSite, &Complex64)> {
        self.entries.iter()
    }

    /// Removes entries with |amp| ≤ floor (exact zeros by default).
    pub fn prune(&mut self, floor: f64) {
        self.entries.retain(|_, a| a.norm() > floor);
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for a in out.entries.values_mut() {
            *a *= c;
        }
        if c == Complex64::ZERO {
            out.entries.clear();
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.dropped_mass += other.dropped_mass;
        for (s, a) in other.iter() {
            out.accumulate(s.clone(), *a);
        }
        out.prune(0.0);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    /// Largest entry magnitude.
    pub fn max_abs(&self) -> f64 {
        self.entries.values().map(|a| a.norm()).fold(0.0, f64::max)
    }

    /// Re-truncates into a new box, accounting dropped mass.
    pub fn restricted_to(&self, trunc: TruncationSpec) -> Self {
        let mut out = FourierField::zero(self.b, self.d, trunc);
        out.dropped_mass = self.dropped_mass;
        for (s, a) in self.iter() {
            out.accumulate(s.clone(), *a);
        }
        out
    }
}

/// Σ e^{β·|j|₂} |û(n,j)|; time indices are summed with weight 1.
pub fn analytic_norm(f: &FourierField, beta: f64) -> f64 {
    f.iter()
        .map(|(s, a)| (beta * s.j_euclid()).exp() * a.norm())
        .sum()
}

/// Σ e^{β_t·‖n‖₁ + β·|j|₂} |û(n,j)|; both weights configurable.
pub fn space_time_norm(f: &FourierField, beta_t: f64, beta: f64) -> f64 {
    f.iter()
        .map(|(s, a)| (beta_t * s.n_l1() as f64 + beta * s.j_euclid()).exp() * a.norm())
        .sum()
}

/// ℓ² norm of the coefficients (all n, j).
pub fn l2_norm(f: &FourierField) -> f64 {
    f.iter().map(|(_, a)| a.norm_sqr()).sum::<f64>().sqrt()
}

/// v̂(n,j) = conj û(−n,−j); an involution.
pub fn conjugate_field(u: &FourierField) -> Result<FourierField, FieldError> {
    let mut out = FourierField::zero(u.b, u.d, u.trunc);
    out.dropped_mass = u.dropped_mass;
    for (s, a) in u.iter() {
        let r = s.reflect();
        if !u.trunc.contains(&r) {
            return Err(FieldError::TruncationAsymmetry { site: r });
        }
        out.entries.insert(r, a.conj());
    }
    Ok(out)
}

/// Σ û(n,j) e^{i n·(θ+ωt)} e^{i j·x}.
pub fn evaluate(f: &FourierField, omega: &[f64], theta: &[f64], t: f64, x: &[f64]) -> Complex64 {
    let mut acc = Complex64::ZERO;
    for (s, a) in f.iter() {
        let mut phase = 0.0;
        for (k, &nk) in s.n.iter().enumerate() {
            phase += nk as f64 * (theta[k] + omega[k] * t);
        }
        for (i, &ji) in s.j.iter().enumerate() {
            phase += ji as f64 * x[i];
        }
        acc += a * Complex64::new(0.0, phase).exp();
    }
    acc
}

/// Collapses the time index: û_x(j; t) = Σ_n û(n,j) e^{i n·(θ+ωt)}.
pub fn time_slice(
    f: &FourierField,
    omega: &[f64],
    theta: &[f64],
    t: f64,
) -> BTreeMap<Vec<i32>, Complex64> {
    let mut out: BTreeMap<Vec<i32>, Complex64> = BTreeMap::new();
    for (s, a) in f.iter() {
        let mut phase = 0.0;
        for (k, &nk) in s.n.iter().enumerate() {
            phase += nk as f64 * (theta[k] + omega[k] * t);
        }
        *out.entry(s.j.clone()).or_insert(Complex64::ZERO) +=
            a * Complex64::new(0.0, phase).exp();
    }
    out
}

/// The linear-solution field û(−e_k, j_k) = a_k on the resonant set.
pub fn initial_field(
    modes: &ModeSet,
    data: &ModeData,
    trunc: TruncationSpec,
) -> Result<FourierField, FieldError> {
    let mut f = FourierField::zero(modes.count(), modes.dim(), trunc);
    let res = crate::lattice::resonant_set(modes);
    for (k, site) in res.u_sites().iter().enumerate() {
        f.insert(site.clone(), Complex64::new(data.amplitude(k), 0.0))?;
    }
    Ok(f)
}

/// Dense spatial Fourier coefficients on the cube ‖j‖_∞ ≤ j_max, the
/// working representation for time slices, linearized-flow states and
/// initial data.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialField {
    d: usize,
    j_max: i32,
    coeffs: Vec<Complex64>,
}

impl SpatialField {
    pub fn zero(d: usize, j_max: i32) -> Self {
        let side = (2 * j_max + 1) as usize;
        Self {
            d,
            j_max,
            coeffs: vec![Complex64::ZERO; side.pow(d as u32)],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn j_max(&self) -> i32 {
        self.j_max
    }

    fn offset(&self, j: &[i32]) -> Option<usize> {
        let side = (2 * self.j_max + 1) as usize;
        let mut idx = 0usize;
        for &c in j {
            if c.abs() > self.j_max {
                return None;
            }
            idx = idx * side + (c + self.j_max) as usize;
        }
        Some(idx)
    }

    /// Inverse of `offset`: the frequency vector of a flat index.
    pub fn j_of(&self, mut idx: usize) -> Vec<i32> {
        let side = (2 * self.j_max + 1) as usize;
        let mut j = vec![0i32; self.d];
        for slot in (0..self.d).rev() {
            j[slot] = (idx % side) as i32 - self.j_max;
            idx /= side;
        }
        j
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn get(&self, j: &[i32]) -> Complex64 {
        self.offset(j)
            .map(|i| self.coeffs[i])
            .unwrap_or(Complex64::ZERO)
    }

    pub fn set(&mut self, j: &[i32], v: Complex64) {
        if let Some(i) = self.offset(j) {
            self.coeffs[i] = v;
        }
    }

    pub fn add_at(&mut self, j: &[i32], v: Complex64) {
        if let Some(i) = self.offset(j) {
            self.coeffs[i] += v;
        }
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn from_map(d: usize, j_max: i32, map: &BTreeMap<Vec<i32>, Complex64>) -> Self {
        let mut out = Self::zero(d, j_max);
        for (j, v) in map {
            out.add_at(j, *v);
        }
        out
    }

    /// ‖·‖_{L²(T^d)} with the normalized measure: (Σ|coeff|²)^{1/2}.
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn analytic_norm(&self, beta: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let j = self.j_of(i);
                let r = j.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                (beta * r).exp() * c.norm()
            })
            .sum()
    }

    /// Coefficients of the complex conjugate: conj(û(−j)).
    pub fn conj_reflect(&self) -> Self {
        let mut out = Self::zero(self.d, self.j_max);
        for i in 0..self.coeffs.len() {
            let j = self.j_of(i);
            let neg: Vec<i32> = j.iter().map(|&v| -v).collect();
            out.set(&neg, self.coeffs[i].conj());
        }
        out
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            d: self.d,
            j_max: self.j_max,
            coeffs: self.coeffs.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.j_max, other.j_max);
        Self {
            d: self.d,
            j_max: self.j_max,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    /// Re ⟨self, other⟩ on L²(T^d): the real inner product of the
    /// real-linear structure.
    pub fn real_inner(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a * b.conj()).re)
            .sum()
    }

    /// Spatial convolution truncated to the cube (products leaving the
    /// cube are dropped).
    pub fn convolve(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.d, self.j_max);
        for i in 0..self.coeffs.len() {
            if self.coeffs[i] == Complex64::ZERO {
                continue;
            }
            let ji = self.j_of(i);
            for k in 0..other.coeffs.len() {
                if other.coeffs[k] == Complex64::ZERO {
                    continue;
                }
                let jk = other.j_of(k);
                let sum: Vec<i32> = ji.iter().zip(&jk).map(|(a, b)| a + b).collect();
                out.add_at(&sum, self.coeffs[i] * other.coeffs[k]);
            }
        }
        out
    }

    /// Copy truncated (or zero-padded) to another cube size.
    pub fn restricted(&self, j_max: i32) -> Self {
        let mut out = Self::zero(self.d, j_max);
        for (i, c) in self.coeffs.iter().enumerate() {
            if *c != Complex64::ZERO {
                out.add_at(&self.j_of(i), *c);
            }
        }
        out
    }

    /// Σ û(j) e^{ij·x}.
    pub fn eval(&self, x: &[f64]) -> Complex64 {
        let mut acc = Complex64::ZERO;
        for (i, c) in self.coeffs.iter().enumerate() {
            if *c == Complex64::ZERO {
                continue;
            }
            let j = self.j_of(i);
            let phase: f64 = j.iter().zip(x).map(|(&ji, &xi)| ji as f64 * xi).sum();
            acc += c * Complex64::new(0.0, phase).exp();
        }
        acc
    }
}

#[derive(Serialize, Deserialize)]
struct DumpEntry {
    n: Vec<i32>,
    j: Vec<i32>,
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct DumpDoc {
    magic: String,
    b: u32,
    d: u32,
    count: u64,
    entries: Vec<DumpEntry>,
}

/// Binary dump: magic "QPNLS1", u32 B, u32 d, u64 count, then per entry
/// B×i32 n, d×i32 j, f64 re, f64 im; little-endian throughout.
pub fn write_binary<W: Write>(f: &FourierField, w: &mut W) -> Result<(), FieldError> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(f.b as u32).to_le_bytes())?;
    w.write_all(&(f.d as u32).to_le_bytes())?;
    w.write_all(&(f.len() as u64).to_le_bytes())?;
    for (s, a) in f.iter() {
        for &v in &s.n {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &s.j {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&a.re.to_le_bytes())?;
        w.write_all(&a.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(r: &mut R, trunc: TruncationSpec) -> Result<FourierField, FieldError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(FieldError::MalformedDump("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let b = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf);
    let mut f = FourierField::zero(b, d, trunc);
    for _ in 0..count {
        let mut n = Vec::with_capacity(b);
        for _ in 0..b {
            r.read_exact(&mut u32buf)?;
            n.push(i32::from_le_bytes(u32buf));
        }
        let mut j = Vec::with_capacity(d);
        for _ in 0..d {
            r.read_exact(&mut u32buf)?;
            j.push(i32::from_le_bytes(u32buf));
        }
        r.read_exact(&mut u64buf)?;
        let re = f64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf)?;
        let im = f64::from_le_bytes(u64buf);
        f.insert(LatticeSite::new(n, j), Complex64::new(re, im))?;
    }
    Ok(f)
}

/// JSON export mirroring the binary layout.
pub fn to_json(f: &FourierField) -> serde_json::Value {
    let doc = DumpDoc {
        magic: String::from_utf8_lossy(DUMP_MAGIC).into_owned(),
        b: f.b as u32,
        d: f.d as u32,
        count: f.len() as u64,
        entries: f
            .iter()
            .map(|(s, a)| DumpEntry {
                n: s.n.clone(),
                j: s.j.clone(),
                re: a.re,
                im: a.im,
            })
            .collect(),
    };
    serde_json::to_value(doc).expect("dump serialization cannot fail")
}

pub fn from_json(v: &serde_json::Value, trunc: TruncationSpec) -> Result<FourierField, FieldError> {
    let doc: DumpDoc = serde_json::from_value(v.clone())
        .map_err(|e| FieldError::MalformedDump(e.to_string()))?;
    if doc.magic.as_bytes() != DUMP_MAGIC {
        return Err(FieldError::MalformedDump("bad magic".into()));
    }
    let mut f = FourierField::zero(doc.b as usize, doc.d as usize, trunc);
    for e in doc.entries {
        f.insert(LatticeSite::new(e.n, e.j), Complex64::new(e.re, e.im))?;
    }
    Ok(f)
}
