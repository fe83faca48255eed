//! Index arithmetic for the truncated space-time Fourier lattice Z^{B+d}.
//!
//! A site (n, j) pairs a time-frequency multi-index n ∈ Z^B (one slot per
//! tracked mode) with a spatial frequency j ∈ Z^d. Truncations retain
//! ‖n‖₁ ≤ N and ‖j‖_∞ ≤ J_x. The resonant set
//! S = {(−e_k, j_k)} ∪ {(+e_k, −j_k)} carries the prescribed amplitudes and
//! is held fixed during the Newton iteration.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default cap on enumerated sites; keeps dense solves desk-scale.
pub const DEFAULT_SITE_BUDGET: u64 = 5_000_000;

#[derive(Debug, thiserror::Error)]
pub enum LatticeError {
    #[error("site budget exceeded: {required} sites requested, budget is {budget}")]
    CapacityExceeded { required: u128, budget: u64 },
    #[error("mode set invalid: {0}")]
    InvalidModeSet(String),
    #[error("truncation invalid: {0}")]
    InvalidTruncation(String),
    #[error("dimension mismatch: expected ({b}, {d}), got ({got_b}, {got_d})")]
    DimensionMismatch {
        b: usize,
        d: usize,
        got_b: usize,
        got_d: usize,
    },
}

/// One point of the space-time lattice: time multi-index `n` (length B)
/// and spatial frequency `j` (length d).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct LatticeSite {
    pub n: Vec<i32>,
    pub j: Vec<i32>,
}

impl LatticeSite {
    pub fn new(n: Vec<i32>, j: Vec<i32>) -> Self {
        Self { n, j }
    }

    pub fn n_l1(&self) -> i64 {
        self.n.iter().map(|&v| v.unsigned_abs() as i64).sum()
    }

    pub fn j_linf(&self) -> i64 {
        self.j.iter().map(|&v| v.unsigned_abs() as i64).max().unwrap_or(0)
    }

    /// Euclidean length of the spatial frequency, used by analytic weights.
    pub fn j_euclid(&self) -> f64 {
        self.j
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// |j|² as an exact integer; the Laplacian symbol on e^{ij·x}.
    pub fn j_sq(&self) -> i64 {
        self.j.iter().map(|&v| (v as i64) * (v as i64)).sum()
    }

    /// Σᵢ nᵢ, the integer multiplying a common frequency shift Ω.
    pub fn n_sum(&self) -> i64 {
        self.n.iter().map(|&v| v as i64).sum()
    }

    /// Component-wise sum; supports of convolution factors add.
    pub fn translate(&self, other: &LatticeSite) -> LatticeSite {
        LatticeSite {
            n: self.n.iter().zip(&other.n).map(|(a, b)| a + b).collect(),
            j: self.j.iter().zip(&other.j).map(|(a, b)| a + b).collect(),
        }
    }

    /// Component-wise negation (the site of the conjugate coefficient).
    pub fn reflect(&self) -> LatticeSite {
        LatticeSite {
            n: self.n.iter().map(|&v| -v).collect(),
            j: self.j.iter().map(|&v| -v).collect(),
        }
    }

    pub fn diff(&self, other: &LatticeSite) -> LatticeSite {
        LatticeSite {
            n: self.n.iter().zip(&other.n).map(|(a, b)| a - b).collect(),
            j: self.j.iter().zip(&other.j).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.n.iter().all(|&v| v == 0) && self.j.iter().all(|&v| v == 0)
    }
}

impl fmt::Debug for LatticeSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}; {:?})", self.n, self.j)
    }
}

// Canonical ordering is lexicographic on (j, n); it stabilizes golden files
// and matrix layouts.
impl Ord for LatticeSite {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.j.cmp(&other.j).then_with(|| self.n.cmp(&other.n))
    }
}

impl PartialOrd for LatticeSite {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// The tracked spatial modes j_1..j_B with the generic subset G marked.
///
/// Generic modes carry O(1) amplitudes and must lie in the ℓ∞ ball of
/// radius `support_radius`; the optional auxiliary mode (tilde-j) lies
/// outside that ball and exists only to seed basis functions in the
/// vanishing-amplitude limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    modes: Vec<Vec<i32>>,
    generic: Vec<usize>,
    support_radius: i32,
    aux: Option<usize>,
}

impl ModeSet {
    pub fn new(
        modes: Vec<Vec<i32>>,
        generic: Vec<usize>,
        support_radius: i32,
    ) -> Result<Self, LatticeError> {
        if modes.is_empty() {
            return Err(LatticeError::InvalidModeSet("no modes".into()));
        }
        let d = modes[0].len();
        if d == 0 {
            return Err(LatticeError::InvalidModeSet("zero spatial dimension".into()));
        }
        if modes.iter().any(|m| m.len() != d) {
            return Err(LatticeError::InvalidModeSet(
                "modes of mixed spatial dimension".into(),
            ));
        }
        for (i, a) in modes.iter().enumerate() {
            for b in modes.iter().skip(i + 1) {
                if a == b {
                    return Err(LatticeError::InvalidModeSet(format!(
                        "duplicate mode {a:?}"
                    )));
                }
            }
        }
        if generic.is_empty() {
            return Err(LatticeError::InvalidModeSet(
                "at least one generic mode required".into(),
            ));
        }
        let mut seen = vec![false; modes.len()];
        for &g in &generic {
            if g >= modes.len() {
                return Err(LatticeError::InvalidModeSet(format!(
                    "generic index {g} out of range"
                )));
            }
            if std::mem::replace(&mut seen[g], true) {
                return Err(LatticeError::InvalidModeSet(format!(
                    "generic index {g} repeated"
                )));
            }
            let r = modes[g].iter().map(|&v| v.abs()).max().unwrap_or(0);
            if r > support_radius {
                return Err(LatticeError::InvalidModeSet(format!(
                    "generic mode {:?} outside the support ball of radius {}",
                    modes[g], support_radius
                )));
            }
        }
        Ok(Self {
            modes,
            generic,
            support_radius,
            aux: None,
        })
    }

    /// Appends the auxiliary mode tilde-j, which must lie outside the ball.
    pub fn with_aux(mut self, mode: Vec<i32>) -> Result<Self, LatticeError> {
        if mode.len() != self.dim() {
            return Err(LatticeError::InvalidModeSet(
                "auxiliary mode of wrong dimension".into(),
            ));
        }
        if mode.iter().map(|&v| v.abs()).max().unwrap_or(0) <= self.support_radius {
            return Err(LatticeError::InvalidModeSet(format!(
                "auxiliary mode {:?} lies inside the support ball of radius {}",
                mode, self.support_radius
            )));
        }
        if self.modes.contains(&mode) {
            return Err(LatticeError::InvalidModeSet("auxiliary mode duplicates a mode".into()));
        }
        self.modes.push(mode);
        self.aux = Some(self.modes.len() - 1);
        Ok(self)
    }

    pub fn count(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.modes[0].len()
    }

    pub fn mode(&self, k: usize) -> &[i32] {
        &self.modes[k]
    }

    pub fn modes(&self) -> &[Vec<i32>] {
        &self.modes
    }

    pub fn generic_indices(&self) -> &[usize] {
        &self.generic
    }

    pub fn is_generic(&self, k: usize) -> bool {
        self.generic.contains(&k)
    }

    pub fn aux_index(&self) -> Option<usize> {
        self.aux
    }

    pub fn support_radius(&self) -> i32 {
        self.support_radius
    }

    pub fn max_mode_radius(&self) -> i32 {
        self.modes
            .iter()
            .flat_map(|m| m.iter().map(|&v| v.abs()))
            .max()
            .unwrap_or(0)
    }

    /// |j_k|² of mode k, the unperturbed frequency ω_k^{(0)}.
    pub fn mode_j_sq(&self, k: usize) -> i64 {
        self.modes[k].iter().map(|&v| (v as i64) * (v as i64)).sum()
    }
}

/// Truncation of the lattice: ‖n‖₁ ≤ `n_max`, ‖j‖_∞ ≤ `j_max`, together
/// with the Newton sweep count K.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub n_max: i32,
    pub j_max: i32,
    pub newton_iters: usize,
}

impl TruncationSpec {
    pub fn new(n_max: i32, j_max: i32, newton_iters: usize) -> Result<Self, LatticeError> {
        if n_max < 0 || j_max < 0 {
            return Err(LatticeError::InvalidTruncation(
                "negative truncation bound".into(),
            ));
        }
        if newton_iters == 0 {
            return Err(LatticeError::InvalidTruncation(
                "at least one Newton sweep required".into(),
            ));
        }
        Ok(Self {
            n_max,
            j_max,
            newton_iters,
        })
    }

    pub fn contains(&self, site: &LatticeSite) -> bool {
        site.n_l1() <= self.n_max as i64 && site.j_linf() <= self.j_max as i64
    }

    /// A widened box that can hold every convolution intermediate exactly.
    pub fn expanded(&self, n_mul: i32, j_mul: i32) -> TruncationSpec {
        TruncationSpec {
            n_max: self.n_max.saturating_mul(n_mul),
            j_max: self.j_max.saturating_mul(j_mul),
            newton_iters: self.newton_iters,
        }
    }

    /// Default spatial cutoff J + p·N·(max mode radius): every convolution
    /// product of retained sites over one sweep stays representable.
    pub fn default_spatial_cutoff(modes: &ModeSet, p: u32, n_max: i32) -> i32 {
        modes.support_radius() + (p as i32) * n_max * modes.max_mode_radius()
    }
}

/// Bijection between in-truncation sites and dense ordinals, ordered
/// lexicographically on (j, n).
#[derive(Clone)]
pub struct SiteIndex {
    b: usize,
    d: usize,
    trunc: TruncationSpec,
    sites: Vec<LatticeSite>,
    lookup: HashMap<LatticeSite, usize>,
}

impl fmt::Debug for SiteIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SiteIndex")
            .field("b", &self.b)
            .field("d", &self.d)
            .field("trunc", &self.trunc)
            .field("len", &self.sites.len())
            .finish()
    }
}

impl SiteIndex {
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
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site(&self, ordinal: usize) -> &LatticeSite {
        &self.sites[ordinal]
    }

    pub fn ordinal(&self, site: &LatticeSite) -> Option<usize> {
        self.lookup.get(site).copied()
    }

    pub fn sites(&self) -> &[LatticeSite] {
        &self.sites
    }
}

/// Number of points of the ℓ¹ ball of radius `n` in Z^b:
/// Σ_i 2^i C(b,i) C(n,i).
pub fn l1_ball_count(b: usize, n: i32) -> u128 {
    let n = n as i64;
    if n < 0 {
        return 0;
    }
    let mut total: u128 = 0;
    for i in 0..=b.min(n as usize) {
        total += (1u128 << i) * binomial(b as u64, i as u64) * binomial(n as u64, i as u64);
    }
    total
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn enumerate_l1_ball(b: usize, n_max: i32) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let mut cur = vec![0i32; b];
    fn rec(slot: usize, remaining: i32, cur: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
        if slot == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in -remaining..=remaining {
            cur[slot] = v;
            rec(slot + 1, remaining - v.abs(), cur, out);
        }
    }
    rec(0, n_max, &mut cur, &mut out);
    out.sort();
    out
}

fn enumerate_cube(d: usize, j_max: i32) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let mut cur = vec![0i32; d];
    fn rec(slot: usize, j_max: i32, cur: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
        if slot == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in -j_max..=j_max {
            cur[slot] = v;
            rec(slot + 1, j_max, cur, out);
        }
    }
    rec(0, j_max, &mut cur, &mut out);
    out
}

/// Enumerates {(n,j): ‖n‖₁ ≤ N, ‖j‖_∞ ≤ J_x} with the default site budget.
pub fn build_site_index(
    trunc: &TruncationSpec,
    modes: &ModeSet,
) -> Result<SiteIndex, LatticeError> {
    build_site_index_with_budget(trunc, modes, DEFAULT_SITE_BUDGET)
}

pub fn build_site_index_with_budget(
    trunc: &TruncationSpec,
    modes: &ModeSet,
    budget: u64,
) -> Result<SiteIndex, LatticeError> {
    build_site_index_dims(modes.count(), modes.dim(), trunc, budget)
}

pub fn build_site_index_dims(
    b: usize,
    d: usize,
    trunc: &TruncationSpec,
    budget: u64,
) -> Result<SiteIndex, LatticeError> {
    let n_count = l1_ball_count(b, trunc.n_max);
    let j_side = 2u128 * trunc.j_max as u128 + 1;
    let j_count = j_side.pow(d as u32);
    let required = n_count * j_count;
    if required > budget as u128 {
        return Err(LatticeError::CapacityExceeded { required, budget });
    }
    let n_list = enumerate_l1_ball(b, trunc.n_max);
    let j_list = enumerate_cube(d, trunc.j_max);
    let mut sites = Vec::with_capacity((n_list.len() * j_list.len()) as usize);
    for j in &j_list {
        for n in &n_list {
            sites.push(LatticeSite::new(n.clone(), j.clone()));
        }
    }
    let lookup = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    Ok(SiteIndex {
        b,
        d,
        trunc: *trunc,
        sites,
        lookup,
    })
}

/// The resonant set S: u-block sites (−e_k, j_k) and v-block sites
/// (+e_k, −j_k), k = 1..B.
#[derive(Clone, Debug)]
pub struct ResonantSet {
    u_sites: Vec<LatticeSite>,
    v_sites: Vec<LatticeSite>,
}

pub fn resonant_set(modes: &ModeSet) -> ResonantSet {
    let b = modes.count();
    let mut u_sites = Vec::with_capacity(b);
    let mut v_sites = Vec::with_capacity(b);
    for k in 0..b {
        let mut n = vec![0i32; b];
        n[k] = -1;
        u_sites.push(LatticeSite::new(n.clone(), modes.mode(k).to_vec()));
        let mut n = vec![0i32; b];
        n[k] = 1;
        v_sites.push(LatticeSite::new(
            n,
            modes.mode(k).iter().map(|&v| -v).collect(),
        ));
    }
    ResonantSet { u_sites, v_sites }
}

impl ResonantSet {
    pub fn u_sites(&self) -> &[LatticeSite] {
        &self.u_sites
    }

    pub fn v_sites(&self) -> &[LatticeSite] {
        &self.v_sites
    }

    /// Membership as a plain site set; the restriction in the linearized
    /// operator removes the same sites from both blocks.
    pub fn contains(&self, site: &LatticeSite) -> bool {
        self.u_sites.contains(site) || self.v_sites.contains(site)
    }

    /// Index k of the mode whose u-site is `site`, if any.
    pub fn u_mode_of(&self, site: &LatticeSite) -> Option<usize> {
        self.u_sites.iter().position(|s| s == site)
    }

    pub fn v_mode_of(&self, site: &LatticeSite) -> Option<usize> {
        self.v_sites.iter().position(|s| s == site)
    }
}
