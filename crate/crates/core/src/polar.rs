//! Polar coding of the binary auxiliary block `U ∈ 𝔽₂^L`.
//!
//! Bit vectors are packed into `u32` masks with position `t` (0-based) at
//! bit `t`. All index sets are 0-based positions. The pre-transform vector
//! `V` and the codeword `U` are related by `U = V G^{⊗p}`, an involution.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity;
use crate::prob::{entropy_of, CondPmf, JointLaw, Pmf, ProbError};
use crate::source::{CoverSource, StateId};

/// Largest block length handled by exact enumeration.
pub const MAX_EXACT_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum PolarError {
    #[error("length {0} is not a power of two")]
    BadLength(usize),
    #[error("block length {0} exceeds the exact enumeration limit of {MAX_EXACT_LEN}")]
    TooLong(usize),
    #[error("key has {got} bits, {need} required")]
    KeyTooShort { need: usize, got: usize },
    #[error("message has {got} bits, {need} expected")]
    MessageLength { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("auxiliary block {u:#x} has zero mass in state {state}")]
    ZeroMass { state: StateId, u: u32 },
    #[error("state {0} is outside the joint's support")]
    UnknownState(StateId),
    #[error("token block {0:?} is outside the declared support")]
    OutsideSupport(Vec<u32>),
    #[error("threshold {0} not in (0, 1)")]
    Threshold(f64),
    #[error("invalid joint: {0}")]
    Shape(String),
    #[error(transparent)]
    Prob(#[from] ProbError),
}

pub type Result<T, E = PolarError> = std::result::Result<T, E>;

fn check_len(len: usize) -> Result<usize> {
    if len == 0 || !len.is_power_of_two() {
        return Err(PolarError::BadLength(len));
    }
    Ok(len.trailing_zeros() as usize)
}

/// `u = v G^{⊗p}` over 𝔽₂ on a bit vector, in `O(L log L)`.
pub fn polar_transform(v: &[u8]) -> Result<Vec<u8>> {
    check_len(v.len())?;
    let mut u: Vec<u8> = v.iter().map(|b| b & 1).collect();
    let n = u.len();
    let mut d = 1;
    while d < n {
        for block in (0..n).step_by(2 * d) {
            for i in block..block + d {
                u[i] ^= u[i + d];
            }
        }
        d *= 2;
    }
    Ok(u)
}

/// [`polar_transform`] on a packed block of length `len ≤ 32`.
pub fn polar_mask(mut v: u32, len: usize) -> u32 {
    let mut d = 1;
    while d < len {
        // positions i with bit d of i clear
        let mut low = 0u32;
        for i in 0..len {
            if i & d == 0 {
                low |= 1 << i;
            }
        }
        v ^= (v >> d) & low;
        d *= 2;
    }
    v
}

/// Bitwise XOR of equal-length bit vectors.
pub fn otp(bits: &[u8], key: &[u8]) -> Result<Vec<u8>> {
    if bits.len() != key.len() {
        return Err(PolarError::LengthMismatch(bits.len(), key.len()));
    }
    Ok(bits.iter().zip(key).map(|(b, k)| (b ^ k) & 1).collect())
}

pub fn bits_to_mask(bits: &[u8]) -> u32 {
    bits.iter().enumerate().fold(0, |acc, (t, &b)| acc | (u32::from(b & 1) << t))
}

pub fn mask_to_bits(mask: u32, len: usize) -> Vec<u8> {
    (0..len).map(|t| ((mask >> t) & 1) as u8).collect()
}

/// Per-block joint of state, binary auxiliary block and token block.
///
/// States are indexed locally; `state_ids` maps them back to the source.
/// Token blocks are interned into `tokens`.
#[derive(Debug, Clone)]
pub struct BlockJoint {
    block_len: usize,
    state_ids: Vec<StateId>,
    state_index: HashMap<StateId, usize>,
    joint: JointLaw,
    tokens: Vec<Vec<u32>>,
    x_index: HashMap<Vec<u32>, usize>,
    base: Vec<Vec<(usize, f64)>>,
    /// Per token block, `(v, P(x, v))` sorted by `v`.
    posterior: Vec<Vec<(u32, f64)>>,
}

/// Per-state action: auxiliary law over packed `u` and, for each auxiliary
/// symbol in its support, a token law over the state's candidate indices.
#[derive(Debug, Clone)]
pub struct StateAction {
    pub p_u: Pmf,
    pub w: Vec<Pmf>,
}

impl BlockJoint {
    /// Generic constructor. `base[s]` lists `(x, P(x|s))` for the reference
    /// law used by covertness measurements.
    pub fn new(
        block_len: usize,
        state_ids: Vec<StateId>,
        joint: JointLaw,
        tokens: Vec<Vec<u32>>,
        base: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if block_len > MAX_EXACT_LEN {
            return Err(PolarError::TooLong(block_len));
        }
        check_len(block_len)?;
        if joint.u_size() > 1usize << block_len {
            return Err(PolarError::Shape(format!(
                "auxiliary alphabet {} exceeds 2^{block_len}",
                joint.u_size()
            )));
        }
        if state_ids.len() != joint.s_size() || base.len() != joint.s_size() {
            return Err(PolarError::Shape("state tables disagree with the joint".into()));
        }
        if tokens.len() != joint.x_size() {
            return Err(PolarError::Shape("token table disagrees with the joint".into()));
        }
        let state_index = state_ids.iter().enumerate().map(|(k, &s)| (s, k)).collect();
        let x_index = tokens.iter().enumerate().map(|(k, t)| (t.clone(), k)).collect();
        let mut post: Vec<HashMap<u32, f64>> = vec![HashMap::new(); tokens.len()];
        joint.for_each_triple(|_, u, x, p| {
            *post[x].entry(polar_mask(u as u32, block_len)).or_default() += p;
        });
        let posterior = post
            .into_iter()
            .map(|m| {
                let mut v: Vec<(u32, f64)> = m.into_iter().collect();
                v.sort_by_key(|e| e.0);
                v
            })
            .collect();
        Ok(Self {
            block_len,
            state_ids,
            state_index,
            joint,
            tokens,
            x_index,
            base,
            posterior,
        })
    }

    /// Marginal-preserving joint with the same reference law, for a joint
    /// already expressed over packed auxiliary blocks.
    pub fn from_joint(block_len: usize, joint: JointLaw, tokens: Vec<Vec<u32>>) -> Result<Self> {
        let mut base: Vec<HashMap<usize, f64>> = vec![HashMap::new(); joint.s_size()];
        for s in 0..joint.s_size() {
            for (k, (_, pu)) in joint.p_u_given_s().row(s).iter().enumerate() {
                for (x, px) in joint.w_rows(s)[k].iter() {
                    *base[s].entry(x).or_default() += pu * px;
                }
            }
        }
        let base = base
            .into_iter()
            .map(|m| {
                let mut v: Vec<(usize, f64)> = m.into_iter().collect();
                v.sort_by_key(|e| e.0);
                v
            })
            .collect();
        let ids = (0..joint.s_size()).collect();
        Self::new(block_len, ids, joint, tokens, base)
    }

    /// Deterministic auxiliary `U = label(X)` with `W` the base block law
    /// restricted and renormalized to each label class.
    pub fn from_labeling<F>(src: &dyn CoverSource, z: &Pmf, label: F) -> Result<Self>
    where
        F: Fn(&[u32]) -> u32,
    {
        let mut interner = Interner::default();
        let mut actions = Vec::with_capacity(z.len());
        for &s in z.support() {
            let law = src.block_law(s);
            let mut groups: HashMap<u32, Vec<(usize, f64)>> = HashMap::new();
            for (c, p) in law.law.iter() {
                groups.entry(label(&law.candidates[c])).or_default().push((c, p));
            }
            let mut entries: Vec<(u32, Vec<(usize, f64)>)> = groups.into_iter().collect();
            entries.sort_by_key(|e| e.0);
            let size = 1usize << src.block_len();
            let p_u = Pmf::new(
                size,
                entries.iter().map(|(u, g)| (*u as usize, g.iter().map(|e| e.1).sum::<f64>())),
            )?;
            // Pmf support is sorted by symbol, matching `entries`.
            let w = entries
                .iter()
                .map(|(_, g)| {
                    let mass: f64 = g.iter().map(|e| e.1).sum();
                    Pmf::new(law.candidates.len(), g.iter().map(|&(c, p)| (c, p / mass)))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            actions.push((s, StateAction { p_u, w }));
        }
        Self::assemble(src, z, &actions, &mut interner)
    }

    /// Joint from explicit per-state actions, listed for every state in the
    /// support of `z`.
    pub fn from_actions(src: &dyn CoverSource, z: &Pmf, actions: &[(StateId, StateAction)]) -> Result<Self> {
        Self::assemble(src, z, actions, &mut Interner::default())
    }

    fn assemble(
        src: &dyn CoverSource,
        z: &Pmf,
        actions: &[(StateId, StateAction)],
        interner: &mut Interner,
    ) -> Result<Self> {
        let block_len = src.block_len();
        if block_len > MAX_EXACT_LEN {
            return Err(PolarError::TooLong(block_len));
        }
        let by_state: HashMap<StateId, &StateAction> = actions.iter().map(|(s, a)| (*s, a)).collect();
        let state_ids: Vec<StateId> = z.support().to_vec();
        let mut laws = Vec::with_capacity(state_ids.len());
        for &s in &state_ids {
            let law = src.block_law(s);
            let ids: Vec<usize> = law.candidates.iter().map(|c| interner.intern(c)).collect();
            laws.push((law, ids));
        }
        let x_size = interner.tokens.len();
        let u_size = 1usize << block_len;
        let mut p_u_rows = Vec::with_capacity(state_ids.len());
        let mut w = Vec::with_capacity(state_ids.len());
        let mut base = Vec::with_capacity(state_ids.len());
        for (k, &s) in state_ids.iter().enumerate() {
            let action = by_state.get(&s).ok_or(PolarError::UnknownState(s))?;
            let (law, ids) = &laws[k];
            if action.w.len() != action.p_u.len() {
                return Err(PolarError::Shape(format!("state {s}: token laws do not match the auxiliary support")));
            }
            let p_u = Pmf::new(u_size, action.p_u.iter())?;
            let rows = action
                .w
                .iter()
                .map(|row| {
                    if row.alphabet() != ids.len() {
                        return Err(PolarError::Shape(format!("state {s}: token law over the wrong candidate list")));
                    }
                    Ok(Pmf::new(x_size, row.iter().map(|(c, p)| (ids[c], p)))?)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut b: Vec<(usize, f64)> = law.law.iter().map(|(c, p)| (ids[c], p)).collect();
            b.sort_by_key(|e| e.0);
            p_u_rows.push(p_u);
            w.push(rows);
            base.push(b);
        }
        let local_z = Pmf::new(state_ids.len(), z.probs().iter().copied().enumerate())?;
        let joint = JointLaw::new(local_z, CondPmf::new(p_u_rows)?, w)?;
        let tokens = std::mem::take(&mut interner.tokens);
        Self::new(block_len, state_ids, joint, tokens, base)
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn joint(&self) -> &JointLaw {
        &self.joint
    }

    pub fn state_ids(&self) -> &[StateId] {
        &self.state_ids
    }

    /// Local index of a source state.
    pub fn state_index(&self, state: StateId) -> Option<usize> {
        self.state_index.get(&state).copied()
    }

    pub fn tokens(&self, x: usize) -> &[u32] {
        &self.tokens[x]
    }

    pub fn token_blocks(&self) -> &[Vec<u32>] {
        &self.tokens
    }

    pub fn x_of(&self, tokens: &[u32]) -> Option<usize> {
        self.x_index.get(tokens).copied()
    }

    /// Reference law `P(x|s)` of a local state.
    pub fn base(&self, local: usize) -> &[(usize, f64)] {
        &self.base[local]
    }

    /// `(v, P(x, v))` for a token block, sorted by `v`.
    pub fn posterior(&self, x: usize) -> &[(u32, f64)] {
        &self.posterior[x]
    }

    /// `P(V = v | S = s)` over all `2^L` pre-transform vectors.
    pub fn v_law(&self, local: usize) -> Vec<f64> {
        let mut out = vec![0.0; 1 << self.block_len];
        for (u, p) in self.joint.p_u_given_s().row(local).iter() {
            out[polar_mask(u as u32, self.block_len) as usize] += p;
        }
        out
    }

    /// `I(U;X|S)` of the block.
    pub fn key_rate(&self) -> f64 {
        capacity::key_rate(&self.joint)
    }
}

#[derive(Default)]
struct Interner {
    tokens: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl Interner {
    fn intern(&mut self, t: &[u32]) -> usize {
        if let Some(&k) = self.index.get(t) {
            return k;
        }
        let k = self.tokens.len();
        self.tokens.push(t.to_vec());
        self.index.insert(t.to_vec(), k);
        k
    }
}

/// Per-position labelling `u_t = [x_t ≥ ⌊V/2⌋]`.
pub fn token_partition(vocab: usize) -> impl Fn(&[u32]) -> u32 {
    let cut = (vocab / 2) as u32;
    move |x: &[u32]| {
        x.iter()
            .enumerate()
            .fold(0, |acc, (t, &tok)| acc | (u32::from(tok >= cut) << t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarSpec {
    pub p: usize,
    pub block_len: usize,
    pub t_delta: f64,
    pub t_eps: f64,
    pub h_enc: Vec<usize>,
    pub l_enc: Vec<usize>,
    pub h_dec: Vec<usize>,
    pub l_dec: Vec<usize>,
    /// Message positions `H_enc ∩ L_dec`, ascending.
    pub message: Vec<usize>,
    pub r0_bits: usize,
    pub otp_bits: usize,
    /// `H(V_i | V^{i−1}, S)` per position.
    pub enc_entropy: Vec<f64>,
    /// `H(V_i | V^{i−1}, X)` per position.
    pub dec_entropy: Vec<f64>,
}

impl PolarSpec {
    /// Message bits that are one-time padded in the standard schedule.
    pub fn keyed_bits(&self) -> usize {
        self.otp_bits.min(self.message.len())
    }
}

/// `H(V_i | V^{i−1}, S)` for every position, by exact enumeration.
pub fn encoder_entropies(j: &BlockJoint) -> Vec<f64> {
    let l = j.block_len;
    let mut h = vec![0.0; l + 1];
    for (s, ps) in j.joint.p_s().iter() {
        let pv = j.v_law(s);
        for (i, slot) in h.iter_mut().enumerate().skip(1) {
            *slot += ps * prefix_entropy(pv.iter().enumerate().map(|(v, &p)| (v as u32, p)), i);
        }
    }
    (1..=l).map(|i| (h[i] - h[i - 1]).clamp(0.0, 1.0)).collect()
}

/// `H(V_i | V^{i−1}, X)` for every position, by exact enumeration.
pub fn decoder_entropies(j: &BlockJoint) -> Vec<f64> {
    let l = j.block_len;
    let mut h = vec![0.0; l + 1];
    for list in &j.posterior {
        for (i, slot) in h.iter_mut().enumerate() {
            *slot += prefix_entropy(list.iter().copied(), i);
        }
    }
    (1..=l).map(|i| (h[i] - h[i - 1]).clamp(0.0, 1.0)).collect()
}

/// Entropy of the masses grouped by the first `i` positions.
fn prefix_entropy<I: Iterator<Item = (u32, f64)>>(entries: I, i: usize) -> f64 {
    let mut groups = vec![0.0; 1 << i];
    let mask = (1u32 << i) - 1;
    for (v, p) in entries {
        groups[(v & mask) as usize] += p;
    }
    entropy_of(groups)
}

/// Index sets and message set from exact conditional entropies.
pub fn compute_index_sets(j: &BlockJoint, t_delta: f64, t_eps: f64) -> Result<PolarSpec> {
    for t in [t_delta, t_eps] {
        if !(t > 0.0 && t < 1.0) {
            return Err(PolarError::Threshold(t));
        }
    }
    let l = j.block_len;
    if l > MAX_EXACT_LEN {
        return Err(PolarError::TooLong(l));
    }
    let enc = encoder_entropies(j);
    let dec = decoder_entropies(j);
    let (h_enc, l_enc): (Vec<usize>, Vec<usize>) = (0..l).partition(|&i| enc[i] > 1.0 - t_eps);
    let (h_dec, l_dec): (Vec<usize>, Vec<usize>) = (0..l).partition(|&i| dec[i] >= t_delta);
    let message: Vec<usize> = h_enc.iter().copied().filter(|i| l_dec.contains(i)).collect();
    let otp_bits = (j.key_rate() - 1e-9).max(0.0).ceil() as usize;
    Ok(PolarSpec {
        p: l.trailing_zeros() as usize,
        block_len: l,
        t_delta,
        t_eps,
        r0_bits: h_enc.len() - message.len(),
        h_enc,
        l_enc,
        h_dec,
        l_dec,
        message,
        otp_bits,
        enc_entropy: enc,
        dec_entropy: dec,
    })
}

/// How each position of `V` is filled by the encoder and treated by the
/// decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Message bit `index`, padded with key bit `key` if present.
    Message { index: usize, key: Option<usize> },
    /// Set to key bit `k`; known to the decoder.
    Key(usize),
    /// Set to zero; known to the decoder.
    Zero,
    /// Fresh uniform local randomness.
    Local,
    /// Drawn by successive cancellation.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySchedule {
    roles: Vec<Role>,
    key_len: usize,
}

impl KeySchedule {
    /// The first `min(otp_bits, |M|)` message positions are padded; the rest
    /// of `H_enc` takes local randomness and `L_enc` is sampled.
    pub fn standard(spec: &PolarSpec) -> Self {
        let keyed = spec.keyed_bits();
        let mut roles = vec![Role::Sampled; spec.block_len];
        for &i in &spec.h_enc {
            roles[i] = Role::Local;
        }
        for (index, &i) in spec.message.iter().enumerate() {
            roles[i] = Role::Message {
                index,
                key: (index < keyed).then_some(index),
            };
        }
        Self { roles, key_len: keyed }
    }

    /// Key bits pad message positions first (ascending), then fill `H_enc \ M`
    /// and finally `L_enc`, each by decreasing encoder entropy. Unkeyed
    /// positions of `H_enc \ M` are set to zero.
    pub fn randomized(spec: &PolarSpec, key_bits: usize) -> Self {
        let mut roles = vec![Role::Sampled; spec.block_len];
        for &i in &spec.h_enc {
            roles[i] = Role::Zero;
        }
        let mut next = 0;
        for (index, &i) in spec.message.iter().enumerate() {
            let key = (next < key_bits).then(|| {
                next += 1;
                next - 1
            });
            roles[i] = Role::Message { index, key };
        }
        let by_entropy = |set: Vec<usize>| {
            let mut v = set;
            v.sort_by(|&a, &b| spec.enc_entropy[b].total_cmp(&spec.enc_entropy[a]).then(a.cmp(&b)));
            v
        };
        let rest: Vec<usize> = spec.h_enc.iter().copied().filter(|i| !spec.message.contains(i)).collect();
        for i in by_entropy(rest).into_iter().chain(by_entropy(spec.l_enc.clone())) {
            if next >= key_bits {
                break;
            }
            roles[i] = Role::Key(next);
            next += 1;
        }
        Self { roles, key_len: next }
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    /// Key bits consumed per block.
    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn message_len(&self) -> usize {
        self.roles.iter().filter(|r| matches!(r, Role::Message { .. })).count()
    }
}

/// Constraint on `V` imposed by the encoder: positions in `mask` must equal
/// `target`; mismatches at `priority` positions cost more when the target is
/// infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Constraint {
    pub mask: u32,
    pub target: u32,
    pub priority: u32,
}

/// Encoder-side restricted law: `P(v|s) 1{v_F = f}` normalized, or, when no
/// positive-mass `v` meets the target, `P(v|s)` restricted to the vectors of
/// least weighted mismatch.
pub fn restricted_law(pv: &[f64], c: Constraint, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; pv.len()];
    let mut z = 0.0;
    for (v, &p) in pv.iter().enumerate() {
        if p > 0.0 && (v as u32) & c.mask == c.target {
            out[v] = p;
            z += p;
        }
    }
    if z == 0.0 {
        let cost = |v: u32| {
            let diff = (v ^ c.target) & c.mask;
            (diff & c.priority).count_ones() as usize * (len + 1) + (diff & !c.priority).count_ones() as usize
        };
        let best = pv
            .iter()
            .enumerate()
            .filter(|e| *e.1 > 0.0)
            .map(|(v, _)| cost(v as u32))
            .min()
            .unwrap_or(0);
        for (v, &p) in pv.iter().enumerate() {
            if p > 0.0 && cost(v as u32) == best {
                out[v] = p;
                z += p;
            }
        }
    }
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

/// Successive cancellation over a restricted law: position `i` is drawn from
/// `Σ_{suffix} P(V_i, suffix | prefix)` with suffixes consistent with the
/// restriction.
fn sc_sample<R: Rng + ?Sized>(law: &[f64], len: usize, rng: &mut R) -> u32 {
    let mut live: Vec<(u32, f64)> = law
        .iter()
        .enumerate()
        .filter(|e| *e.1 > 0.0)
        .map(|(v, &p)| (v as u32, p))
        .collect();
    let mut v = 0u32;
    for i in 0..len {
        let (m0, m1) = split_mass(&live, i);
        let bit = u32::from(rng.gen::<f64>() * (m0 + m1) >= m0);
        v |= bit << i;
        live.retain(|e| (e.0 >> i) & 1 == bit);
    }
    v
}

fn split_mass(live: &[(u32, f64)], i: usize) -> (f64, f64) {
    live.iter().fold((0.0, 0.0), |(a, b), &(v, p)| {
        if (v >> i) & 1 == 0 {
            (a + p, b)
        } else {
            (a, b + p)
        }
    })
}

/// Probability that the successive cancellation sampler emits `v`, as the
/// product of its per-position conditionals.
pub fn sc_path_probability(law: &[f64], len: usize, v: u32) -> f64 {
    let mut live: Vec<(u32, f64)> = law
        .iter()
        .enumerate()
        .filter(|e| *e.1 > 0.0)
        .map(|(w, &p)| (w as u32, p))
        .collect();
    let mut prob = 1.0;
    for i in 0..len {
        let (m0, m1) = split_mass(&live, i);
        let bit = (v >> i) & 1;
        let m = if bit == 0 { m0 } else { m1 };
        if m == 0.0 {
            return 0.0;
        }
        prob *= m / (m0 + m1);
        live.retain(|e| (e.0 >> i) & 1 == bit);
    }
    prob
}

/// Output of [`sc_encode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub v: u32,
    pub u: u32,
}

/// Encoder constraint for a message and key; `Local` positions draw from
/// `rng`.
pub fn encoder_constraint<R: Rng + ?Sized>(
    schedule: &KeySchedule,
    msg: &[u8],
    key: &[u8],
    rng: &mut R,
) -> Result<Constraint> {
    let need = schedule.message_len();
    if msg.len() != need {
        return Err(PolarError::MessageLength { need, got: msg.len() });
    }
    if key.len() < schedule.key_len() {
        return Err(PolarError::KeyTooShort {
            need: schedule.key_len(),
            got: key.len(),
        });
    }
    let mut c = Constraint {
        mask: 0,
        target: 0,
        priority: 0,
    };
    for (i, role) in schedule.roles.iter().enumerate() {
        let bit = match *role {
            Role::Message { index, key: k } => {
                c.priority |= 1 << i;
                msg[index] ^ k.map_or(0, |k| key[k])
            }
            Role::Key(k) => key[k],
            Role::Zero => 0,
            Role::Local => u8::from(rng.gen::<bool>()),
            Role::Sampled => continue,
        };
        c.mask |= 1 << i;
        c.target |= u32::from(bit & 1) << i;
    }
    Ok(c)
}

/// Encodes one block for the source state `state`.
pub fn sc_encode<R: Rng + ?Sized>(
    j: &BlockJoint,
    schedule: &KeySchedule,
    state: StateId,
    msg: &[u8],
    key: &[u8],
    rng: &mut R,
) -> Result<Encoded> {
    let local = j.state_index(state).ok_or(PolarError::UnknownState(state))?;
    let c = encoder_constraint(schedule, msg, key, rng)?;
    let law = restricted_law(&j.v_law(local), c, j.block_len);
    let v = sc_sample(&law, j.block_len, rng);
    Ok(Encoded {
        v,
        u: polar_mask(v, j.block_len),
    })
}

/// Draws a token block from `W(·|u, s)`; returns its interned id.
pub fn emit_tokens<R: Rng + ?Sized>(j: &BlockJoint, state: StateId, u: u32, rng: &mut R) -> Result<usize> {
    let local = j.state_index(state).ok_or(PolarError::UnknownState(state))?;
    let w = j.joint.w(local, u as usize).ok_or(PolarError::ZeroMass { state, u })?;
    Ok(w.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeRule {
    /// Position-by-position argmax of the suffix-marginalized posterior.
    #[default]
    Successive,
    /// Block-wise argmax of `P(x, v)`.
    BlockMap,
}

/// Recovers the message bits of one block from its token block id.
pub fn map_decode(j: &BlockJoint, schedule: &KeySchedule, x: usize, key: &[u8], rule: DecodeRule) -> Result<Vec<u8>> {
    if key.len() < schedule.key_len() {
        return Err(PolarError::KeyTooShort {
            need: schedule.key_len(),
            got: key.len(),
        });
    }
    let (mut known_mask, mut known) = (0u32, 0u32);
    for (i, role) in schedule.roles.iter().enumerate() {
        let bit = match *role {
            Role::Key(k) => key[k],
            Role::Zero => 0,
            _ => continue,
        };
        known_mask |= 1 << i;
        known |= u32::from(bit & 1) << i;
    }
    let list = j.posterior.get(x).map(Vec::as_slice).unwrap_or(&[]);
    let mut live: Vec<(u32, f64)> = list.iter().copied().filter(|e| e.0 & known_mask == known).collect();
    if live.iter().all(|e| e.1 == 0.0) {
        live = list.to_vec();
    }
    let v = match rule {
        DecodeRule::BlockMap => live
            .iter()
            .fold(None, |best: Option<(u32, f64)>, &(v, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((v, p)),
            })
            .map_or(0, |e| e.0),
        DecodeRule::Successive => {
            let mut v = 0u32;
            for i in 0..j.block_len {
                let (m0, m1) = split_mass(&live, i);
                let bit = u32::from(m1 > m0);
                v |= bit << i;
                live.retain(|e| (e.0 >> i) & 1 == bit);
            }
            v
        }
    };
    let mut msg = vec![0u8; schedule.message_len()];
    for (i, role) in schedule.roles.iter().enumerate() {
        if let Role::Message { index, key: k } = *role {
            msg[index] = ((v >> i) & 1) as u8 ^ k.map_or(0, |k| key[k]);
        }
    }
    Ok(msg)
}

/// Exact law of the encoder output `V` in a local state for a fixed message,
/// averaged over uniform key bits and local randomness.
pub fn induced_v_law(j: &BlockJoint, schedule: &KeySchedule, local: usize, msg: &[u8]) -> Result<Vec<f64>> {
    let need = schedule.message_len();
    if msg.len() != need {
        return Err(PolarError::MessageLength { need, got: msg.len() });
    }
    let len = j.block_len;
    let (mut fixed_mask, mut fixed, mut random_mask, mut priority) = (0u32, 0u32, 0u32, 0u32);
    for (i, role) in schedule.roles.iter().enumerate() {
        match *role {
            Role::Message { index, key } => {
                priority |= 1 << i;
                if key.is_some() {
                    random_mask |= 1 << i;
                } else {
                    fixed_mask |= 1 << i;
                    fixed |= u32::from(msg[index] & 1) << i;
                }
            }
            Role::Zero => fixed_mask |= 1 << i,
            Role::Key(_) | Role::Local => random_mask |= 1 << i,
            Role::Sampled => {}
        }
    }
    let mask = fixed_mask | random_mask;
    let weight = 0.5f64.powi(random_mask.count_ones() as i32);
    let pv = j.v_law(local);

    let mut z = vec![0.0; 1 << len];
    for (v, &p) in pv.iter().enumerate() {
        if p > 0.0 {
            z[(v as u32 & mask) as usize] += p;
        }
    }
    let mut out = vec![0.0; 1 << len];
    for (v, &p) in pv.iter().enumerate() {
        let f = v as u32 & mask;
        if p > 0.0 && f & fixed_mask == fixed {
            out[v] += weight * p / z[f as usize];
        }
    }
    // Targets that no positive-mass vector meets fall back to the relaxed law.
    let mut sub = random_mask;
    loop {
        let target = fixed | sub;
        if z[target as usize] == 0.0 {
            let law = restricted_law(&pv, Constraint { mask, target, priority }, len);
            for (o, p) in out.iter_mut().zip(law) {
                *o += weight * p;
            }
        }
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & random_mask;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transform_examples() {
        assert_eq!(polar_transform(&[1, 1]).unwrap(), vec![0, 1]);
        assert_eq!(polar_transform(&[1]).unwrap(), vec![1]);
        assert!(matches!(polar_transform(&[0, 1, 1]), Err(PolarError::BadLength(3))));
        assert!(polar_transform(&[]).is_err());
    }

    #[test]
    fn mask_transform_agrees_with_vector_transform() {
        for len in [1usize, 2, 4, 8, 16] {
            for v in (0u32..(1 << len)).step_by(7) {
                let bits = mask_to_bits(v, len);
                let expect = bits_to_mask(&polar_transform(&bits).unwrap());
                assert_eq!(polar_mask(v, len), expect);
            }
        }
    }

    #[test]
    fn transform_matches_kronecker_matrix() {
        // G^{⊗2} rows: 1000, 1100, 1010, 1111
        let g2 = [[1, 0, 0, 0], [1, 1, 0, 0], [1, 0, 1, 0], [1, 1, 1, 1]];
        for v in 0u32..16 {
            let bits = mask_to_bits(v, 4);
            let mut u = [0u8; 4];
            for (r, row) in g2.iter().enumerate() {
                for c in 0..4 {
                    u[c] ^= bits[r] * row[c];
                }
            }
            assert_eq!(polar_transform(&bits).unwrap(), u.to_vec());
        }
    }

    #[test]
    fn otp_examples() {
        assert_eq!(otp(&[1, 0, 1], &[0, 0, 0]).unwrap(), vec![1, 0, 1]);
        assert_eq!(otp(&[1, 0, 1], &[1, 1, 0]).unwrap(), vec![0, 1, 1]);
        assert!(otp(&[1], &[]).is_err());
    }

    fn single_state(probs: &[(u32, f64)], len: usize) -> BlockJoint {
        // One state; tokens equal the auxiliary bits.
        let size = 1usize << len;
        let p_u = Pmf::new(size, probs.iter().map(|&(u, p)| (u as usize, p))).unwrap();
        let w: Vec<Pmf> = p_u.support().iter().map(|&u| Pmf::point(size, u).unwrap()).collect();
        let joint = JointLaw::new(Pmf::point(1, 0).unwrap(), CondPmf::new(vec![p_u]).unwrap(), vec![w]).unwrap();
        let tokens = (0..size as u32).map(|u| mask_to_bits(u, len).into_iter().map(u32::from).collect()).collect();
        BlockJoint::from_joint(len, joint, tokens).unwrap()
    }

    #[test]
    fn uniform_auxiliary_puts_everything_in_h_enc() {
        let probs: Vec<(u32, f64)> = (0..4).map(|u| (u, 0.25)).collect();
        let size = 4;
        let p_u = Pmf::new(size, probs.iter().map(|&(u, p)| (u as usize, p))).unwrap();
        // U independent of the token: a single token block for every u.
        let w: Vec<Pmf> = (0..4).map(|_| Pmf::point(1, 0).unwrap()).collect();
        let joint = JointLaw::new(Pmf::point(1, 0).unwrap(), CondPmf::new(vec![p_u]).unwrap(), vec![w]).unwrap();
        let j = BlockJoint::from_joint(2, joint, vec![vec![0, 0]]).unwrap();
        let spec = compute_index_sets(&j, 0.1, 0.1).unwrap();
        assert_eq!(spec.h_enc, vec![0, 1]);
        assert!(spec.l_dec.is_empty());
        assert!(spec.message.is_empty());
    }

    #[test]
    fn deterministic_auxiliary_empties_h_enc() {
        let j = single_state(&[(2, 1.0)], 2);
        let spec = compute_index_sets(&j, 0.1, 0.1).unwrap();
        assert!(spec.h_enc.is_empty());
        assert_eq!(spec.l_enc, vec![0, 1]);
    }

    #[test]
    fn correlated_two_position_instance() {
        // P(u) over (u1,u2): 00:0.4, 01:0.1, 10:0.2, 11:0.3 (u1 at bit 0)
        let j = single_state(&[(0b00, 0.4), (0b10, 0.1), (0b01, 0.2), (0b11, 0.3)], 2);
        let spec = compute_index_sets(&j, 0.1, 0.1).unwrap();
        let h1 = crate::prob::binary_entropy(0.7);
        assert!((spec.enc_entropy[0] - h1).abs() < 1e-12);
        assert_eq!(spec.h_enc, vec![1]);
        assert_eq!(spec.message, vec![1]);
    }

    #[test]
    fn restricted_law_falls_back_to_nearest_vectors() {
        let pv = [0.0, 0.5, 0.0, 0.5];
        let c = Constraint {
            mask: 0b01,
            target: 0b00,
            priority: 0,
        };
        assert_eq!(restricted_law(&pv, c, 2), vec![0.0, 0.5, 0.0, 0.5]);
        let c = Constraint {
            mask: 0b11,
            target: 0b10,
            priority: 0b10,
        };
        assert_eq!(restricted_law(&pv, c, 2), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let j = single_state(&[(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)], 2);
        let spec = compute_index_sets(&j, 0.1, 0.1).unwrap();
        let sched = KeySchedule::standard(&spec);
        let msg = vec![1; sched.message_len()];
        let key = vec![0; sched.key_len()];
        let a = sc_encode(&j, &sched, 0, &msg, &key, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sc_encode(&j, &sched, 0, &msg, &key, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.u, polar_mask(a.v, 2));
    }

    #[test]
    fn short_key_is_rejected() {
        let j = single_state(&[(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)], 2);
        let spec = compute_index_sets(&j, 0.1, 0.1).unwrap();
        let sched = KeySchedule::standard(&spec);
        assert!(sched.key_len() > 0);
        let msg = vec![0; sched.message_len()];
        let err = sc_encode(&j, &sched, 0, &msg, &[], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(PolarError::KeyTooShort { .. })));
    }

    #[test]
    fn emit_rejects_zero_mass_auxiliary() {
        let j = single_state(&[(1, 1.0)], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(emit_tokens(&j, 0, 2, &mut rng), Err(PolarError::ZeroMass { .. })));
        assert_eq!(j.tokens(emit_tokens(&j, 0, 1, &mut rng).unwrap()), &[1, 0]);
    }

    #[test]
    fn randomized_schedule_order() {
        let spec = PolarSpec {
            p: 2,
            block_len: 4,
            t_delta: 0.1,
            t_eps: 0.5,
            h_enc: vec![2, 3],
            l_enc: vec![0, 1],
            h_dec: vec![],
            l_dec: vec![0, 1, 2, 3],
            message: vec![3],
            r0_bits: 1,
            otp_bits: 1,
            enc_entropy: vec![0.1, 0.3, 0.9, 1.0],
            dec_entropy: vec![0.0; 4],
        };
        let s = KeySchedule::randomized(&spec, 0);
        assert_eq!(s.roles(), &[Role::Sampled, Role::Sampled, Role::Zero, Role::Message { index: 0, key: None }]);
        let s = KeySchedule::randomized(&spec, 3);
        assert_eq!(
            s.roles(),
            &[Role::Sampled, Role::Key(2), Role::Key(1), Role::Message { index: 0, key: Some(0) }]
        );
        let s = KeySchedule::randomized(&spec, 9);
        assert_eq!(s.key_len(), 4);
    }
}
