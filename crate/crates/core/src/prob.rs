//! Finite-alphabet distributions and the information measures built on them.
//!
//! Every logarithm is base 2, so entropies and rates are in bits, and
//! `0 · log 0` is taken to be `0` throughout.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

/// Tolerance within which a total mass is accepted as exactly one.
pub const PROB_TOL: f64 = 1e-9;
/// Total masses off by at most this much are renormalized instead of rejected.
pub const RENORM_TOL: f64 = 1e-6;

/// Dense accumulation is used for marginals up to this many cells.
const DENSE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbError {
    #[error("alphabet mismatch: {left} vs {right}")]
    AlphabetMismatch { left: usize, right: usize },
    #[error("symbol {id} has positive mass under P but zero under Q (infinite divergence)")]
    SupportViolation { id: usize },
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("invalid probability {p} for symbol {id}")]
    InvalidProbability { id: usize, p: f64 },
    #[error("symbol {0} listed twice")]
    DuplicateSymbol(usize),
    #[error("symbol {id} outside alphabet of size {alphabet}")]
    SymbolOutOfRange { id: usize, alphabet: usize },
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T, E = ProbError> = std::result::Result<T, E>;

/// A probability mass function over `0..alphabet`, stored sparsely.
///
/// The support is kept sorted and only holds symbols with positive mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    alphabet: usize,
    support: Vec<usize>,
    probs: Vec<f64>,
}

impl Pmf {
    /// Builds a pmf from `(symbol, probability)` pairs.
    ///
    /// A total within [`PROB_TOL`] of one is kept as is, within [`RENORM_TOL`]
    /// it is renormalized, and anything further off is rejected.
    pub fn new<I>(alphabet: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut entries: Vec<(usize, f64)> = entries.into_iter().collect();
        for &(id, p) in &entries {
            if id >= alphabet {
                return Err(ProbError::SymbolOutOfRange { id, alphabet });
            }
            if !p.is_finite() || p < 0.0 {
                return Err(ProbError::InvalidProbability { id, p });
            }
        }
        entries.sort_unstable_by_key(|&(id, _)| id);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(ProbError::DuplicateSymbol(w[0].0));
        }
        entries.retain(|&(_, p)| p > 0.0);
        let sum: f64 = entries.iter().map(|&(_, p)| p).sum();
        if (sum - 1.0).abs() > RENORM_TOL {
            return Err(ProbError::NotNormalized { sum });
        }
        let scale = if (sum - 1.0).abs() > PROB_TOL { 1.0 / sum } else { 1.0 };
        let (support, probs) = entries.into_iter().map(|(id, p)| (id, p * scale)).unzip();
        Ok(Self {
            alphabet,
            support,
            probs,
        })
    }

    /// Dense constructor: `probs[i]` is the mass of symbol `i`.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::new(probs.len(), probs.iter().copied().enumerate())
    }

    pub fn point(alphabet: usize, id: usize) -> Result<Self> {
        Self::new(alphabet, [(id, 1.0)])
    }

    pub fn uniform(alphabet: usize) -> Result<Self> {
        if alphabet == 0 {
            return Err(ProbError::Shape("uniform pmf over an empty alphabet".into()));
        }
        let p = 1.0 / alphabet as f64;
        Self::new(alphabet, (0..alphabet).map(|i| (i, p)))
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of symbols with positive mass.
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn get(&self, id: usize) -> f64 {
        match self.support.binary_search(&id) {
            Ok(k) => self.probs[k],
            Err(_) => 0.0,
        }
    }

    /// Position of `id` in [`Pmf::support`], if it carries mass.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.support.binary_search(&id).ok()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.alphabet];
        for (id, p) in self.iter() {
            out[id] = p;
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let target: f64 = rng.gen();
        let mut acc = 0.0;
        for (id, p) in self.iter() {
            acc += p;
            if target < acc {
                return id;
            }
        }
        *self.support.last().expect("pmf support is never empty")
    }
}

/// A conditional pmf: one [`Pmf`] row per conditioning symbol, all over the
/// same output alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct CondPmf {
    rows: Vec<Pmf>,
}

impl CondPmf {
    pub fn new(rows: Vec<Pmf>) -> Result<Self> {
        if let Some(first) = rows.first() {
            if let Some(bad) = rows.iter().find(|r| r.alphabet() != first.alphabet()) {
                return Err(ProbError::AlphabetMismatch {
                    left: first.alphabet(),
                    right: bad.alphabet(),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn row(&self, given: usize) -> &Pmf {
        &self.rows[given]
    }

    pub fn rows(&self) -> &[Pmf] {
        &self.rows
    }

    /// Size of the conditioning alphabet.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Size of the output alphabet (0 when there are no rows).
    pub fn alphabet(&self) -> usize {
        self.rows.first().map_or(0, Pmf::alphabet)
    }
}

/// Total variation distance `½ Σ |P − Q|`.
pub fn tv_distance(p: &Pmf, q: &Pmf) -> Result<f64> {
    if p.alphabet() != q.alphabet() {
        return Err(ProbError::AlphabetMismatch {
            left: p.alphabet(),
            right: q.alphabet(),
        });
    }
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    while i < p.len() || j < q.len() {
        let a = p.support.get(i).copied().unwrap_or(usize::MAX);
        let b = q.support.get(j).copied().unwrap_or(usize::MAX);
        if a == b {
            acc += (p.probs[i] - q.probs[j]).abs();
            i += 1;
            j += 1;
        } else if a < b {
            acc += p.probs[i];
            i += 1;
        } else {
            acc += q.probs[j];
            j += 1;
        }
    }
    Ok((0.5 * acc).min(1.0))
}

/// Kullback–Leibler divergence `D(P‖Q)` in bits.
pub fn kl_divergence(p: &Pmf, q: &Pmf) -> Result<f64> {
    if p.alphabet() != q.alphabet() {
        return Err(ProbError::AlphabetMismatch {
            left: p.alphabet(),
            right: q.alphabet(),
        });
    }
    let mut acc = 0.0;
    for (id, pi) in p.iter() {
        let qi = q.get(id);
        if qi <= 0.0 {
            return Err(ProbError::SupportViolation { id });
        }
        acc += pi * (pi / qi).log2();
    }
    Ok(acc.max(0.0))
}

/// Shannon entropy of a pmf, in bits.
pub fn entropy(p: &Pmf) -> f64 {
    entropy_of(p.probs().iter().copied())
}

/// `−Σ m log₂ m` over raw masses, skipping zeros.
pub fn entropy_of<I: IntoIterator<Item = f64>>(masses: I) -> f64 {
    let h: f64 = masses
        .into_iter()
        .filter(|&m| m > 0.0)
        .map(|m| -m * m.log2())
        .sum();
    h.max(0.0)
}

/// Binary entropy function `h₂(p)`.
pub fn binary_entropy(p: f64) -> f64 {
    entropy_of([p, 1.0 - p])
}

/// One of the three variables of a state/auxiliary/token joint law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    S,
    U,
    X,
}

/// Joint law `P_S(s) · P_{U|S}(u|s) · W(x|u,s)` kept in factorized form.
///
/// `w[s][k]` is the token law for the `k`-th auxiliary symbol in the support
/// of `P_{U|S=s}`; auxiliary symbols with zero mass carry no token law.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLaw {
    p_s: Pmf,
    p_u: CondPmf,
    w: Vec<Vec<Pmf>>,
    x_size: usize,
}

impl JointLaw {
    pub fn new(p_s: Pmf, p_u_given_s: CondPmf, w: Vec<Vec<Pmf>>) -> Result<Self> {
        if p_u_given_s.len() != p_s.alphabet() {
            return Err(ProbError::Shape(format!(
                "P_U|S has {} rows for a state alphabet of {}",
                p_u_given_s.len(),
                p_s.alphabet()
            )));
        }
        if w.len() != p_s.alphabet() {
            return Err(ProbError::Shape(format!(
                "W has {} state blocks for a state alphabet of {}",
                w.len(),
                p_s.alphabet()
            )));
        }
        let mut x_size = None;
        for (s, rows) in w.iter().enumerate() {
            if rows.len() != p_u_given_s.row(s).len() {
                return Err(ProbError::Shape(format!(
                    "state {s}: {} token laws for {} auxiliary symbols",
                    rows.len(),
                    p_u_given_s.row(s).len()
                )));
            }
            for row in rows {
                match x_size {
                    None => x_size = Some(row.alphabet()),
                    Some(n) if n != row.alphabet() => {
                        return Err(ProbError::AlphabetMismatch {
                            left: n,
                            right: row.alphabet(),
                        })
                    }
                    _ => {}
                }
            }
        }
        let x_size = x_size.ok_or_else(|| ProbError::Shape("joint law without token laws".into()))?;
        Ok(Self {
            p_s,
            p_u: p_u_given_s,
            w,
            x_size,
        })
    }

    pub fn s_size(&self) -> usize {
        self.p_s.alphabet()
    }

    pub fn u_size(&self) -> usize {
        self.p_u.alphabet()
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn p_s(&self) -> &Pmf {
        &self.p_s
    }

    pub fn p_u_given_s(&self) -> &CondPmf {
        &self.p_u
    }

    /// Token law `W(·|u,s)`, or `None` when `P(u|s) = 0`.
    pub fn w(&self, s: usize, u: usize) -> Option<&Pmf> {
        self.p_u.row(s).position(u).map(|k| &self.w[s][k])
    }

    /// Token laws of state `s`, aligned with the support of `P_{U|S=s}`.
    pub fn w_rows(&self, s: usize) -> &[Pmf] {
        &self.w[s]
    }

    /// Calls `f(s, u, x, P(s,u,x))` for every triple of positive mass.
    pub fn for_each_triple<F: FnMut(usize, usize, usize, f64)>(&self, mut f: F) {
        for (s, ps) in self.p_s.iter() {
            for (k, (u, pu)) in self.p_u.row(s).iter().enumerate() {
                for (x, px) in self.w[s][k].iter() {
                    f(s, u, x, ps * pu * px);
                }
            }
        }
    }

    pub fn total_mass(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_triple(|_, _, _, p| acc += p);
        acc
    }

    fn size_of(&self, v: Var) -> usize {
        match v {
            Var::S => self.s_size(),
            Var::U => self.u_size(),
            Var::X => self.x_size(),
        }
    }

    fn flat_index(vars: &[Var], sizes: &[usize], s: usize, u: usize, x: usize) -> u128 {
        vars.iter().zip(sizes).fold(0u128, |acc, (v, &n)| {
            let val = match v {
                Var::S => s,
                Var::U => u,
                Var::X => x,
            };
            acc * n as u128 + val as u128
        })
    }

    fn accumulate(&self, vars: &[Var]) -> Vec<f64> {
        let sizes: Vec<usize> = vars.iter().map(|&v| self.size_of(v)).collect();
        let cells = sizes.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
        match cells {
            Some(n) if n <= DENSE_LIMIT => {
                let mut dense = vec![0.0; n];
                self.for_each_triple(|s, u, x, p| {
                    dense[Self::flat_index(vars, &sizes, s, u, x) as usize] += p;
                });
                dense
            }
            _ => {
                let mut map: HashMap<u128, f64> = HashMap::new();
                self.for_each_triple(|s, u, x, p| {
                    *map.entry(Self::flat_index(vars, &sizes, s, u, x)).or_default() += p;
                });
                map.into_values().collect()
            }
        }
    }

    /// Joint entropy of the listed variables (duplicates are ignored).
    pub fn entropy(&self, vars: &[Var]) -> f64 {
        let vars = canonical_vars(vars);
        if vars.is_empty() {
            return 0.0;
        }
        entropy_of(self.accumulate(&vars))
    }

    /// Marginal pmf of the listed variables over the flattened product
    /// alphabet, first variable most significant.
    pub fn marginal(&self, vars: &[Var]) -> Result<Pmf> {
        let sizes: Vec<usize> = vars.iter().map(|&v| self.size_of(v)).collect();
        let alphabet = sizes
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| ProbError::Shape("marginal alphabet overflows".into()))?;
        let mut map: HashMap<usize, f64> = HashMap::new();
        self.for_each_triple(|s, u, x, p| {
            *map.entry(Self::flat_index(vars, &sizes, s, u, x) as usize).or_default() += p;
        });
        Pmf::new(alphabet, map)
    }
}

fn canonical_vars(vars: &[Var]) -> Vec<Var> {
    let mut v = vars.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// `H(target | given) = H(target, given) − H(given)`.
pub fn conditional_entropy(j: &JointLaw, target: &[Var], given: &[Var]) -> f64 {
    let all: Vec<Var> = target.iter().chain(given).copied().collect();
    (j.entropy(&all) - j.entropy(given)).max(0.0)
}

/// `I(A;B) = H(A) + H(B) − H(A,B)`.
pub fn mutual_information(j: &JointLaw, a: &[Var], b: &[Var]) -> f64 {
    let ab: Vec<Var> = a.iter().chain(b).copied().collect();
    (j.entropy(a) + j.entropy(b) - j.entropy(&ab)).max(0.0)
}

/// `I(A;B|C) = H(A,C) + H(B,C) − H(A,B,C) − H(C)`.
pub fn conditional_mutual_information(j: &JointLaw, a: &[Var], b: &[Var], given: &[Var]) -> f64 {
    let ac: Vec<Var> = a.iter().chain(given).copied().collect();
    let bc: Vec<Var> = b.iter().chain(given).copied().collect();
    let abc: Vec<Var> = a.iter().chain(b).chain(given).copied().collect();
    (j.entropy(&ac) + j.entropy(&bc) - j.entropy(&abc) - j.entropy(given)).max(0.0)
}

/// Largest deviation `max_{s,x} |Σ_u P(s,u,x) − P_S(s) P_{X|S}(x|s)|` from a
/// reference state/token law.
pub fn check_marginal(j: &JointLaw, p_s: &Pmf, p_x_given_s: &CondPmf) -> Result<f64> {
    if p_s.alphabet() != j.s_size() || p_x_given_s.len() != j.s_size() {
        return Err(ProbError::AlphabetMismatch {
            left: j.s_size(),
            right: p_s.alphabet(),
        });
    }
    if p_x_given_s.alphabet() != j.x_size() {
        return Err(ProbError::AlphabetMismatch {
            left: j.x_size(),
            right: p_x_given_s.alphabet(),
        });
    }
    let mut induced: HashMap<(usize, usize), f64> = HashMap::new();
    j.for_each_triple(|s, _, x, p| *induced.entry((s, x)).or_default() += p);
    let mut worst: f64 = 0.0;
    for s in 0..j.s_size() {
        let ps = p_s.get(s);
        for (x, px) in p_x_given_s.row(s).iter() {
            let reference = ps * px;
            let got = induced.remove(&(s, x)).unwrap_or(0.0);
            worst = worst.max((got - reference).abs());
        }
    }
    for (_, leftover) in induced {
        worst = worst.max(leftover.abs());
    }
    Ok(worst)
}
