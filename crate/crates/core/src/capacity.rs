//! Single-letter covert rate `I(U;X) − I(U;S)` under the marginal constraint
//! `Σ_u P(s,u,x) = P_S(s) P_{X|S}(x|s)`.
//!
//! Every feasible joint is written as a splitting of the base token mass
//! across auxiliary symbols: `P(u,x|s) = P(x|s) q(u|x,s)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::prob::{
    conditional_mutual_information, entropy_of, mutual_information, CondPmf, JointLaw, Pmf,
    ProbError, Var,
};

/// Deterministic auxiliaries are enumerated only below this many maps.
pub const MAX_DETERMINISTIC_MAPS: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Prob(#[from] ProbError),
}

pub type Result<T, E = CapacityError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct CapacityResult {
    pub rate: f64,
    pub key_rate: f64,
    pub argmax: JointLaw,
    /// Whether every deterministic auxiliary was examined.
    pub exhaustive: bool,
}

/// `I(U;X) − I(U;S)` in bits.
pub fn gp_rate(j: &JointLaw) -> f64 {
    mutual_information(j, &[Var::U], &[Var::X]) - mutual_information(j, &[Var::U], &[Var::S])
}

/// `I(U;X|S)` in bits.
pub fn key_rate(j: &JointLaw) -> f64 {
    conditional_mutual_information(j, &[Var::U], &[Var::X], &[Var::S])
}

/// `⌊V²/4⌋ / C(V,2)`.
pub fn corollary_rate(vocab: usize) -> Result<f64> {
    if vocab < 2 {
        return Err(CapacityError::Params(format!("vocabulary size {vocab} < 2")));
    }
    let v = vocab as f64;
    Ok(((vocab * vocab) / 4) as f64 / (v * (v - 1.0) / 2.0))
}

/// Single-letter pair source: states are the unordered pairs `{i,j}` in
/// lexicographic order, uniformly weighted, each with a ½-½ token law.
pub fn pair_law(vocab: usize) -> Result<(Pmf, CondPmf)> {
    if vocab < 2 {
        return Err(CapacityError::Params(format!("vocabulary size {vocab} < 2")));
    }
    let mut rows = Vec::new();
    for i in 0..vocab {
        for j in i + 1..vocab {
            rows.push(Pmf::new(vocab, [(i, 0.5), (j, 0.5)])?);
        }
    }
    let p_s = Pmf::uniform(rows.len())?;
    Ok((p_s, CondPmf::new(rows)?))
}

/// Splitting of the base token mass: `q[s][k][u] = q(u | x_k, s)` where
/// `x_k` is the `k`-th support token of `P_{X|S=s}`.
pub type Split = Vec<Vec<Vec<f64>>>;

/// Feasible joint built from a splitting; satisfies the marginal constraint
/// by construction.
pub fn split_joint(p_s: &Pmf, p_x_given_s: &CondPmf, u_size: usize, q: &Split) -> Result<JointLaw> {
    check_split(p_s, p_x_given_s, u_size, q)?;
    let mut p_u_rows = Vec::with_capacity(p_s.alphabet());
    let mut w = Vec::with_capacity(p_s.alphabet());
    for s in 0..p_s.alphabet() {
        let base = p_x_given_s.row(s);
        let mut pu = vec![0.0; u_size];
        for (k, (_, px)) in base.iter().enumerate() {
            for (u, acc) in pu.iter_mut().enumerate() {
                *acc += px * q[s][k][u];
            }
        }
        let row = Pmf::new(u_size, pu.iter().copied().enumerate())?;
        let laws = row
            .iter()
            .map(|(u, mass)| {
                Pmf::new(
                    base.alphabet(),
                    base.iter()
                        .enumerate()
                        .map(|(k, (x, px))| (x, px * q[s][k][u] / mass)),
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        p_u_rows.push(row);
        w.push(laws);
    }
    Ok(JointLaw::new(p_s.clone(), CondPmf::new(p_u_rows)?, w)?)
}

fn check_split(p_s: &Pmf, p_x_given_s: &CondPmf, u_size: usize, q: &Split) -> Result<()> {
    if p_x_given_s.len() != p_s.alphabet() || q.len() != p_s.alphabet() {
        return Err(CapacityError::Params("splitting does not match the state alphabet".into()));
    }
    for (s, rows) in q.iter().enumerate() {
        if rows.len() != p_x_given_s.row(s).len() || rows.iter().any(|r| r.len() != u_size) {
            return Err(CapacityError::Params(format!("splitting of state {s} has wrong shape")));
        }
    }
    Ok(())
}

/// Dense evaluation of `H(U|S) − H(U|X)` for a splitting, which equals the
/// covert rate of [`split_joint`].
pub fn split_rate(p_s: &Pmf, p_x_given_s: &CondPmf, u_size: usize, q: &Split) -> f64 {
    let x_size = p_x_given_s.alphabet();
    let mut us = vec![0.0; u_size];
    let mut ux = vec![0.0; u_size * x_size];
    let mut px_marg = vec![0.0; x_size];
    let mut h_us = 0.0;
    let mut h_s = 0.0;
    for (s, ps) in p_s.iter() {
        us.iter_mut().for_each(|v| *v = 0.0);
        for (k, (x, px)) in p_x_given_s.row(s).iter().enumerate() {
            let m = ps * px;
            px_marg[x] += m;
            for u in 0..u_size {
                let t = m * q[s][k][u];
                us[u] += t;
                ux[u * x_size + x] += t;
            }
        }
        h_us += entropy_of(us.iter().copied());
        h_s += entropy_of([ps]);
    }
    let h_u_given_s = h_us - h_s;
    let h_u_given_x = entropy_of(ux) - entropy_of(px_marg);
    h_u_given_s - h_u_given_x
}

/// Splitting that sends each token to a fixed auxiliary symbol.
pub fn deterministic_split(p_x_given_s: &CondPmf, u_size: usize, phi: &[usize]) -> Split {
    p_x_given_s
        .rows()
        .iter()
        .map(|row| {
            row.support()
                .iter()
                .map(|&x| {
                    let mut r = vec![0.0; u_size];
                    r[phi[x]] = 1.0;
                    r
                })
                .collect()
        })
        .collect()
}

/// Balanced partition joint: `U = 1` iff `X ≥ ⌊V/2⌋`.
pub fn partition_joint(vocab: usize) -> Result<JointLaw> {
    let (p_s, p_x) = pair_law(vocab)?;
    let phi: Vec<usize> = (0..vocab).map(|x| usize::from(x >= vocab / 2)).collect();
    split_joint(&p_s, &p_x, 2, &deterministic_split(&p_x, 2, &phi))
}

/// Best feasible joint found by enumerating deterministic auxiliaries
/// `U = φ(X)` and refining `restarts` random splittings by coordinate ascent.
///
/// Ties keep the lexicographically smallest `φ` (token 0 most significant).
pub fn brute_force_capacity(
    p_s: &Pmf,
    p_x_given_s: &CondPmf,
    u_size: usize,
    restarts: usize,
    seed: u64,
) -> Result<CapacityResult> {
    if u_size < 2 {
        return Err(CapacityError::Params(format!("auxiliary alphabet {u_size} < 2")));
    }
    if p_x_given_s.len() != p_s.alphabet() {
        return Err(CapacityError::Params("state alphabets differ".into()));
    }
    let x_size = p_x_given_s.alphabet();
    let maps = (0..x_size)
        .try_fold(1usize, |acc, _| acc.checked_mul(u_size))
        .filter(|&n| n <= MAX_DETERMINISTIC_MAPS);

    // The map sending every token to symbol 0 is always feasible.
    let mut best_split = deterministic_split(p_x_given_s, u_size, &vec![0; x_size]);
    let mut best = split_rate(p_s, p_x_given_s, u_size, &best_split);

    if let Some(n) = maps {
        let rates: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let phi = digits(idx, u_size, x_size);
                split_rate(p_s, p_x_given_s, u_size, &deterministic_split(p_x_given_s, u_size, &phi))
            })
            .collect();
        let mut best_idx = 0;
        for (idx, &r) in rates.iter().enumerate() {
            if r > best + 1e-12 {
                best = r;
                best_idx = idx;
            }
        }
        best_split = deterministic_split(p_x_given_s, u_size, &digits(best_idx, u_size, x_size));
    }

    let refined: Vec<(f64, Split)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut q: Split = p_x_given_s
                .rows()
                .iter()
                .map(|row| {
                    (0..row.len())
                        .map(|_| {
                            let raw: Vec<f64> = (0..u_size).map(|_| rng.gen::<f64>() + 1e-3).collect();
                            let t: f64 = raw.iter().sum();
                            raw.into_iter().map(|v| v / t).collect()
                        })
                        .collect()
                })
                .collect();
            let rate = coordinate_ascent(p_s, p_x_given_s, u_size, &mut q);
            (rate, q)
        })
        .collect();
    for (rate, q) in refined {
        if rate > best + 1e-9 {
            best = rate;
            best_split = q;
        }
    }

    let argmax = split_joint(p_s, p_x_given_s, u_size, &best_split)?;
    Ok(CapacityResult {
        rate: gp_rate(&argmax),
        key_rate: key_rate(&argmax),
        argmax,
        exhaustive: maps.is_some(),
    })
}

fn digits(mut idx: usize, base: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = idx % base;
        idx /= base;
    }
    out
}

const ASCENT_SWEEPS: usize = 30;
const GRID: usize = 16;
const GOLDEN_STEPS: usize = 40;

/// Pairwise mass transfers within each splitting row, each optimized by a
/// grid scan followed by golden-section refinement.
fn coordinate_ascent(p_s: &Pmf, p_x: &CondPmf, u_size: usize, q: &mut Split) -> f64 {
    let mut current = split_rate(p_s, p_x, u_size, q);
    for _ in 0..ASCENT_SWEEPS {
        let start = current;
        for s in 0..q.len() {
            if p_s.get(s) == 0.0 {
                continue;
            }
            for k in 0..q[s].len() {
                for a in 0..u_size {
                    for b in a + 1..u_size {
                        let total = q[s][k][a] + q[s][k][b];
                        let eval = |t: f64, q: &mut Split| {
                            q[s][k][a] = t;
                            q[s][k][b] = total - t;
                            split_rate(p_s, p_x, u_size, q)
                        };
                        let mut best_t = q[s][k][a];
                        let mut best_v = current;
                        for g in 0..=GRID {
                            let t = total * g as f64 / GRID as f64;
                            let v = eval(t, q);
                            if v > best_v {
                                best_v = v;
                                best_t = t;
                            }
                        }
                        let step = total / GRID as f64;
                        let (mut lo, mut hi) = ((best_t - step).max(0.0), (best_t + step).min(total));
                        let ratio = (5f64.sqrt() - 1.0) / 2.0;
                        for _ in 0..GOLDEN_STEPS {
                            let m1 = hi - ratio * (hi - lo);
                            let m2 = lo + ratio * (hi - lo);
                            if eval(m1, q) >= eval(m2, q) {
                                hi = m2;
                            } else {
                                lo = m1;
                            }
                        }
                        let t = 0.5 * (lo + hi);
                        let v = eval(t, q);
                        if v > best_v {
                            best_v = v;
                            best_t = t;
                        }
                        eval(best_t, q);
                        current = best_v;
                    }
                }
            }
        }
        if current - start < 1e-12 {
            break;
        }
    }
    current
}

/// `H(U|S) − H(U|X)` on the pair source for the stochastic auxiliary
/// `P(U=1|X=i) = q_i`.
pub fn converse_objective(vocab: usize, q: &[f64]) -> Result<f64> {
    if q.len() != vocab {
        return Err(CapacityError::Params(format!("{} probabilities for V = {vocab}", q.len())));
    }
    if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CapacityError::Params("q must lie in [0, 1]".into()));
    }
    let (p_s, p_x) = pair_law(vocab)?;
    let split: Split = p_x
        .rows()
        .iter()
        .map(|row| row.support().iter().map(|&x| vec![1.0 - q[x], q[x]]).collect())
        .collect();
    Ok(split_rate(&p_s, &p_x, 2, &split))
}

/// Largest converse objective over `samples` uniformly drawn auxiliaries.
pub fn converse_probe(vocab: usize, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(CapacityError::Params("samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..samples {
        let q: Vec<f64> = (0..vocab).map(|_| rng.gen::<f64>()).collect();
        best = best.max(converse_objective(vocab, &q)?);
    }
    Ok(best)
}
