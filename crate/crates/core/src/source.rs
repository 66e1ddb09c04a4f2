//! Block-autoregressive cover sources.
//!
//! A source exposes a finite set of block states, the base law of each
//! state over a list of candidate token blocks, an initial state law, and a
//! transition from `(state, realized candidate)` to the next block's state.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{Pmf, ProbError, PROB_TOL, RENORM_TOL};

pub type StateId = usize;

/// Upper bound on the number of enumerated block states of a pair source.
pub const MAX_PAIR_STATES: usize = 1 << 20;

/// Version written into block-law files.
pub const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("invalid source parameters: {0}")]
    Params(String),
    #[error("block-law file schema violation: {0}")]
    Schema(String),
    #[error("weights of state {state} sum to {sum}")]
    WeightSum { state: u64, sum: f64 },
    #[error("state {state} refers to undefined child state {child}")]
    DanglingChild { state: u64, child: u64 },
    #[error("state {state} at depth {depth}: {reason}")]
    Depth { state: u64, depth: usize, reason: String },
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SourceError> = std::result::Result<T, E>;

/// Base law of one block state over its candidate token blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLaw {
    pub candidates: Vec<Vec<u32>>,
    /// Law over indices into `candidates`.
    pub law: Pmf,
}

impl BlockLaw {
    /// Index of the candidate with exactly these tokens.
    pub fn find(&self, tokens: &[u32]) -> Option<usize> {
        self.candidates.iter().position(|c| c.as_slice() == tokens)
    }
}

/// What follows a realized block.
#[derive(Debug, Clone, Copy)]
pub enum Next<'a> {
    /// Last block of the horizon.
    Leaf,
    /// Deterministic successor state.
    State(StateId),
    /// Successor drawn afresh from this law (memoryless sources).
    Resample(&'a Pmf),
}

pub trait CoverSource: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn block_len(&self) -> usize;
    /// Number of blocks `B`.
    fn depth(&self) -> usize;
    fn num_states(&self) -> usize;
    /// State law of the first block.
    fn initial(&self) -> &Pmf;
    fn block_law(&self, state: StateId) -> BlockLaw;
    /// Successor of `state` after emitting `candidate` in block `block`
    /// (1-based).
    fn transition(&self, state: StateId, candidate: usize, block: usize) -> Next<'_>;
}

/// Draws the per-block state path under the base law.
pub fn sample_trajectory<R: Rng + ?Sized>(src: &dyn CoverSource, rng: &mut R) -> Vec<StateId> {
    let mut path = Vec::with_capacity(src.depth());
    let mut state = src.initial().sample(rng);
    for block in 1..=src.depth() {
        path.push(state);
        let cand = src.block_law(state).law.sample(rng);
        state = match src.transition(state, cand, block) {
            Next::Leaf => break,
            Next::State(s) => s,
            Next::Resample(law) => law.sample(rng),
        };
    }
    path
}

/// States that can occur in each block, 1-based block `b` at index `b - 1`.
pub fn reachable_states(src: &dyn CoverSource) -> Vec<Vec<StateId>> {
    let mut out = Vec::with_capacity(src.depth());
    let mut current: Vec<StateId> = src.initial().support().to_vec();
    for block in 1..=src.depth() {
        out.push(current.clone());
        if block == src.depth() {
            break;
        }
        let mut next = std::collections::BTreeSet::new();
        let mut resampled: Vec<&Pmf> = Vec::new();
        for &s in &current {
            let law = src.block_law(s);
            for c in 0..law.candidates.len() {
                match src.transition(s, c, block) {
                    Next::Leaf => {}
                    Next::State(t) => {
                        next.insert(t);
                    }
                    Next::Resample(p) => {
                        if !resampled.iter().any(|q| std::ptr::eq(*q, p)) {
                            resampled.push(p);
                        }
                    }
                }
            }
        }
        for p in resampled {
            next.extend(p.support().iter().copied());
        }
        current = next.into_iter().collect();
    }
    out
}

/// Per-block state laws under the base (unwatermarked) token law.
pub fn base_state_laws(src: &dyn CoverSource) -> Result<Vec<Pmf>> {
    let mut laws = vec![src.initial().clone()];
    for block in 1..src.depth() {
        let z = &laws[block - 1];
        let mut next: BTreeMap<StateId, f64> = BTreeMap::new();
        let mut resampled: Vec<(&Pmf, f64)> = Vec::new();
        for (s, ps) in z.iter() {
            let law = src.block_law(s);
            for (c, pc) in law.law.iter() {
                match src.transition(s, c, block) {
                    Next::Leaf => {}
                    Next::State(t) => *next.entry(t).or_default() += ps * pc,
                    Next::Resample(p) => match resampled.iter_mut().find(|e| std::ptr::eq(e.0, p)) {
                        Some(e) => e.1 += ps * pc,
                        None => resampled.push((p, ps * pc)),
                    },
                }
            }
        }
        for (p, mass) in resampled {
            for (t, pt) in p.iter() {
                *next.entry(t).or_default() += mass * pt;
            }
        }
        laws.push(Pmf::new(src.num_states(), next)?);
    }
    Ok(laws)
}

/// Pair source whose per-token states are two-point token laws,
/// drawn i.i.d. across positions and blocks. The two points are uniform
/// unless [`PairSource::with_second_prob`] tilts them.
///
/// Block states are `L`-tuples of per-token pair states, numbered in mixed
/// radix with position 1 least significant. Candidate `c` of a block state
/// picks the second token of the pair at position `t` iff bit `t` of `c` is
/// set.
#[derive(Debug, Clone)]
pub struct PairSource {
    vocab: usize,
    block_len: usize,
    depth: usize,
    pairs: Vec<(u32, u32)>,
    token_prior: Pmf,
    initial: Pmf,
    second_prob: f64,
}

/// Number of unordered token pairs `C(V, 2)`.
pub fn pair_count(vocab: usize) -> usize {
    vocab * vocab.saturating_sub(1) / 2
}

impl PairSource {
    /// Every unordered pair `{i, j}` of the vocabulary is a per-token state,
    /// uniformly weighted.
    pub fn new(vocab: usize, block_len: usize, depth: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(SourceError::Params(format!("vocabulary size {vocab} < 2")));
        }
        let mut pairs = Vec::with_capacity(pair_count(vocab));
        for i in 0..vocab as u32 {
            for j in i + 1..vocab as u32 {
                pairs.push((i, j));
            }
        }
        let prior = Pmf::uniform(pairs.len())?;
        Self::from_pairs(vocab, block_len, depth, pairs, prior)
    }

    /// Lumped form of [`PairSource::new`] for large vocabularies.
    ///
    /// With the tokens split into `A = [0, ⌊V/2⌋)` and `B = [⌊V/2⌋, V)`, a
    /// pair state is only distinguished by its class: one token on each
    /// side, both in `A`, or both in `B`. Each class is represented by one
    /// pair and carries the total mass of its members. Every quantity that
    /// depends on the state through the partition auxiliary is preserved.
    ///
    /// `cross_mass` overrides the class mass of cross pairs (the rest is
    /// split between the two same-side classes in their natural ratio).
    pub fn classes(
        vocab: usize,
        block_len: usize,
        depth: usize,
        cross_mass: Option<f64>,
    ) -> Result<Self> {
        if vocab < 2 {
            return Err(SourceError::Params(format!("vocabulary size {vocab} < 2")));
        }
        let a = (vocab / 2) as u32;
        let b = vocab as u32 - a;
        let total = pair_count(vocab) as f64;
        let choose2 = |n: u32| (n as f64) * (n as f64 - 1.0) / 2.0;
        let natural = [
            (a as f64) * (b as f64) / total,
            choose2(a) / total,
            choose2(b) / total,
        ];
        let masses = match cross_mass {
            None => natural,
            Some(c) => {
                if !(c > 0.0 && c <= 1.0) {
                    return Err(SourceError::Params(format!("cross mass {c} not in (0, 1]")));
                }
                let same = natural[1] + natural[2];
                if same <= 0.0 && c < 1.0 {
                    return Err(SourceError::Params(format!(
                        "V = {vocab} has no same-side pairs to carry mass {}",
                        1.0 - c
                    )));
                }
                let scale = if same > 0.0 { (1.0 - c) / same } else { 0.0 };
                [c, natural[1] * scale, natural[2] * scale]
            }
        };
        let reps = [(0, a), (0, 1), (a, a + 1)];
        let mut pairs = Vec::new();
        let mut probs = Vec::new();
        for (rep, m) in reps.into_iter().zip(masses) {
            if m > 0.0 {
                pairs.push(rep);
                probs.push(m);
            }
        }
        let prior = Pmf::from_probs(&probs)?;
        Self::from_pairs(vocab, block_len, depth, pairs, prior)
    }

    fn from_pairs(
        vocab: usize,
        block_len: usize,
        depth: usize,
        pairs: Vec<(u32, u32)>,
        token_prior: Pmf,
    ) -> Result<Self> {
        if block_len == 0 || block_len > 16 {
            return Err(SourceError::Params(format!("block length {block_len} not in 1..=16")));
        }
        if depth == 0 {
            return Err(SourceError::Params("depth must be at least 1".into()));
        }
        let n = pairs.len();
        let states = (0..block_len)
            .try_fold(1usize, |acc, _| acc.checked_mul(n))
            .filter(|&s| s <= MAX_PAIR_STATES)
            .ok_or_else(|| {
                SourceError::Params(format!(
                    "{n}^{block_len} block states exceed the enumeration limit; use the class form"
                ))
            })?;
        let mut probs = Vec::with_capacity(states);
        for id in 0..states {
            let mut p = 1.0;
            let mut rest = id;
            for _ in 0..block_len {
                p *= token_prior.get(rest % n);
                rest /= n;
            }
            probs.push(p);
        }
        let initial = Pmf::from_probs(&probs)?;
        Ok(Self {
            vocab,
            block_len,
            depth,
            pairs,
            token_prior,
            initial,
            second_prob: 0.5,
        })
    }

    /// Per-token pair states in their numbering order.
    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn token_prior(&self) -> &Pmf {
        &self.token_prior
    }

    /// Probability of the second token of every pair, `1/2` by default.
    pub fn with_second_prob(mut self, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(SourceError::Params(format!("second-token probability {theta} not in (0, 1)")));
        }
        self.second_prob = theta;
        Ok(self)
    }

    pub fn second_prob(&self) -> f64 {
        self.second_prob
    }

    /// Per-token pair indices of a block state, position 1 first.
    pub fn decompose(&self, state: StateId) -> Vec<usize> {
        let n = self.pairs.len();
        let mut rest = state;
        (0..self.block_len)
            .map(|_| {
                let r = rest % n;
                rest /= n;
                r
            })
            .collect()
    }

    /// Inverse of [`PairSource::decompose`].
    pub fn compose(&self, pair_indices: &[usize]) -> StateId {
        let n = self.pairs.len();
        pair_indices.iter().rev().fold(0, |acc, &r| acc * n + r)
    }
}

impl CoverSource for PairSource {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn block_len(&self) -> usize {
        self.block_len
    }

    fn depth(&self) -> usize {
        self.depth
    }

    fn num_states(&self) -> usize {
        self.initial.alphabet()
    }

    fn initial(&self) -> &Pmf {
        &self.initial
    }

    fn block_law(&self, state: StateId) -> BlockLaw {
        let per_token = self.decompose(state);
        let count = 1usize << self.block_len;
        let candidates = (0..count)
            .map(|c| {
                per_token
                    .iter()
                    .enumerate()
                    .map(|(t, &r)| {
                        let (i, j) = self.pairs[r];
                        if c >> t & 1 == 1 {
                            j
                        } else {
                            i
                        }
                    })
                    .collect()
            })
            .collect();
        let theta = self.second_prob;
        let law = Pmf::new(
            count,
            (0..count).map(|c| {
                let ones = (c as u32).count_ones() as i32;
                (c, theta.powi(ones) * (1.0 - theta).powi(self.block_len as i32 - ones))
            }),
        )
        .expect("product law");
        BlockLaw { candidates, law }
    }

    fn transition(&self, _state: StateId, _candidate: usize, block: usize) -> Next<'_> {
        if block >= self.depth {
            Next::Leaf
        } else {
            Next::Resample(&self.initial)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileCandidate {
    pub tokens: Vec<u32>,
    pub weight: f64,
    pub next_state: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileState {
    pub id: u64,
    pub candidates: Vec<FileCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileInitial {
    pub state: u64,
    pub prob: f64,
}

/// On-disk block-law document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct BlockLawFile {
    pub version: u32,
    pub V: usize,
    pub L: usize,
    pub B: usize,
    pub Q: usize,
    pub states: Vec<FileState>,
    pub initial: Vec<FileInitial>,
}

impl BlockLawFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SourceError::Schema(e.to_string()))
    }

    /// Canonical serialization: sorted keys, no whitespace, states and
    /// initial entries ordered by id, reals with 17 significant digits.
    pub fn to_canonical(&self) -> String {
        let mut states: Vec<&FileState> = self.states.iter().collect();
        states.sort_by_key(|s| s.id);
        let mut initial: Vec<&FileInitial> = self.initial.iter().collect();
        initial.sort_by_key(|i| i.state);

        let mut out = String::new();
        write!(out, "{{\"B\":{},\"L\":{},\"Q\":{},\"V\":{},\"initial\":[", self.B, self.L, self.Q, self.V)
            .unwrap();
        for (k, i) in initial.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{{\"prob\":{},\"state\":{}}}", canonical_real(i.prob), i.state).unwrap();
        }
        out.push_str("],\"states\":[");
        for (k, s) in states.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str("{\"candidates\":[");
            for (m, c) in s.candidates.iter().enumerate() {
                if m > 0 {
                    out.push(',');
                }
                let next = c.next_state.map_or_else(|| "null".to_string(), |n| n.to_string());
                let tokens: Vec<String> = c.tokens.iter().map(u32::to_string).collect();
                write!(
                    out,
                    "{{\"next_state\":{},\"tokens\":[{}],\"weight\":{}}}",
                    next,
                    tokens.join(","),
                    canonical_real(c.weight)
                )
                .unwrap();
            }
            write!(out, "],\"id\":{}}}", s.id).unwrap();
        }
        write!(out, "],\"version\":{}}}\n", self.version).unwrap();
        out
    }
}

/// A real with 17 significant digits in exponent notation.
pub fn canonical_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Depth-`B` tree source loaded from a block-law file.
#[derive(Debug, Clone)]
pub struct FileSource {
    doc: BlockLawFile,
    /// File state id per dense index.
    ids: Vec<u64>,
    laws: Vec<BlockLaw>,
    children: Vec<Vec<Option<StateId>>>,
    depth_of: Vec<usize>,
    initial: Pmf,
}

impl FileSource {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(BlockLawFile::parse(text)?)
    }

    pub fn from_doc(doc: BlockLawFile) -> Result<Self> {
        if doc.version != FILE_VERSION {
            return Err(SourceError::Schema(format!("unsupported version {}", doc.version)));
        }
        if doc.L == 0 || doc.L > 16 {
            return Err(SourceError::Schema(format!("L = {} not in 1..=16", doc.L)));
        }
        if doc.B == 0 || doc.Q == 0 || doc.V == 0 {
            return Err(SourceError::Schema("V, B and Q must be positive".into()));
        }
        let mut index: HashMap<u64, StateId> = HashMap::new();
        for (k, s) in doc.states.iter().enumerate() {
            if index.insert(s.id, k).is_some() {
                return Err(SourceError::Schema(format!("duplicate state id {}", s.id)));
            }
        }

        let mut laws = Vec::with_capacity(doc.states.len());
        let mut children = Vec::with_capacity(doc.states.len());
        for s in &doc.states {
            if s.candidates.is_empty() {
                return Err(SourceError::Schema(format!("state {} has no candidates", s.id)));
            }
            if s.candidates.len() > doc.Q {
                return Err(SourceError::Schema(format!(
                    "state {} has {} candidates, more than Q = {}",
                    s.id,
                    s.candidates.len(),
                    doc.Q
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for c in &s.candidates {
                if c.tokens.len() != doc.L {
                    return Err(SourceError::Schema(format!(
                        "state {}: candidate of length {} in a block of length {}",
                        s.id,
                        c.tokens.len(),
                        doc.L
                    )));
                }
                if let Some(t) = c.tokens.iter().find(|&&t| t as usize >= doc.V) {
                    return Err(SourceError::Schema(format!(
                        "state {}: token {t} outside vocabulary of {}",
                        s.id, doc.V
                    )));
                }
                if !seen.insert(&c.tokens) {
                    return Err(SourceError::Schema(format!(
                        "state {}: duplicate candidate {:?}",
                        s.id, c.tokens
                    )));
                }
                if !c.weight.is_finite() || c.weight < 0.0 {
                    return Err(SourceError::Schema(format!(
                        "state {}: invalid weight {}",
                        s.id, c.weight
                    )));
                }
            }
            let sum: f64 = s.candidates.iter().map(|c| c.weight).sum();
            if (sum - 1.0).abs() > RENORM_TOL {
                return Err(SourceError::WeightSum { state: s.id, sum });
            }
            let law = Pmf::new(
                s.candidates.len(),
                s.candidates.iter().map(|c| c.weight).enumerate(),
            )?;
            let mut kids = Vec::with_capacity(s.candidates.len());
            for c in &s.candidates {
                match c.next_state {
                    None => kids.push(None),
                    Some(child) => match index.get(&child) {
                        Some(&k) => kids.push(Some(k)),
                        None => return Err(SourceError::DanglingChild { state: s.id, child }),
                    },
                }
            }
            laws.push(BlockLaw {
                candidates: s.candidates.iter().map(|c| c.tokens.clone()).collect(),
                law,
            });
            children.push(kids);
        }

        let mut init = Vec::with_capacity(doc.initial.len());
        let mut seen_roots = std::collections::HashSet::new();
        for i in &doc.initial {
            let k = *index.get(&i.state).ok_or_else(|| {
                SourceError::Schema(format!("initial law refers to undefined state {}", i.state))
            })?;
            if !seen_roots.insert(k) {
                return Err(SourceError::Schema(format!("state {} listed twice in initial", i.state)));
            }
            init.push((k, i.prob));
        }
        let init_sum: f64 = init.iter().map(|&(_, p)| p).sum();
        if (init_sum - 1.0).abs() > RENORM_TOL {
            return Err(SourceError::Schema(format!("initial law sums to {init_sum}")));
        }
        let initial = Pmf::new(doc.states.len(), init)?;

        // Depth labelling: roots are block 1, children one deeper.
        let mut depth_of = vec![0usize; doc.states.len()];
        let mut frontier: Vec<StateId> = doc
            .initial
            .iter()
            .map(|i| index[&i.state])
            .collect();
        for &r in &frontier {
            depth_of[r] = 1;
        }
        while let Some(s) = frontier.pop() {
            let d = depth_of[s];
            for (c, kid) in children[s].iter().enumerate() {
                match *kid {
                    None if d < doc.B => {
                        return Err(SourceError::Depth {
                            state: doc.states[s].id,
                            depth: d,
                            reason: format!("candidate {c} has no next_state before depth B = {}", doc.B),
                        })
                    }
                    Some(_) if d >= doc.B => {
                        return Err(SourceError::Depth {
                            state: doc.states[s].id,
                            depth: d,
                            reason: format!("candidate {c} has a next_state at depth B"),
                        })
                    }
                    None => {}
                    Some(k) => {
                        if depth_of[k] == 0 {
                            depth_of[k] = d + 1;
                            frontier.push(k);
                        } else if depth_of[k] != d + 1 {
                            return Err(SourceError::Depth {
                                state: doc.states[k].id,
                                depth: depth_of[k],
                                reason: format!("also reached at depth {}", d + 1),
                            });
                        }
                    }
                }
            }
        }
        if let Some(k) = depth_of.iter().position(|&d| d == 0) {
            return Err(SourceError::Schema(format!(
                "state {} is unreachable from the initial law",
                doc.states[k].id
            )));
        }

        let ids = doc.states.iter().map(|s| s.id).collect();
        Ok(Self {
            doc,
            ids,
            laws,
            children,
            depth_of,
            initial,
        })
    }

    pub fn document(&self) -> &BlockLawFile {
        &self.doc
    }

    /// File-level id of a dense state index.
    pub fn file_id(&self, state: StateId) -> u64 {
        self.ids[state]
    }

    /// Block (1-based) at which `state` occurs.
    pub fn state_depth(&self, state: StateId) -> usize {
        self.depth_of[state]
    }

    pub fn to_canonical(&self) -> String {
        self.doc.to_canonical()
    }

    /// Canonical document of an arbitrary source, enumerating its state tree.
    ///
    /// Memoryless sources are not trees and are rejected.
    pub fn export(src: &dyn CoverSource) -> Result<BlockLawFile> {
        let mut states = BTreeMap::new();
        let reach = reachable_states(src);
        let q = reach
            .iter()
            .flatten()
            .map(|&s| src.block_law(s).candidates.len())
            .max()
            .unwrap_or(1);
        for (b, layer) in reach.iter().enumerate() {
            for &s in layer {
                let law = src.block_law(s);
                let mut candidates = Vec::with_capacity(law.candidates.len());
                for (c, tokens) in law.candidates.iter().enumerate() {
                    let next_state = match src.transition(s, c, b + 1) {
                        Next::Leaf => None,
                        Next::State(t) => Some(t as u64),
                        Next::Resample(_) => {
                            return Err(SourceError::Params(
                                "memoryless sources have no tree form".into(),
                            ))
                        }
                    };
                    candidates.push(FileCandidate {
                        tokens: tokens.clone(),
                        weight: law.law.get(c),
                        next_state,
                    });
                }
                states.insert(s as u64, FileState { id: s as u64, candidates });
            }
        }
        Ok(BlockLawFile {
            version: FILE_VERSION,
            V: src.vocab_size(),
            L: src.block_len(),
            B: src.depth(),
            Q: q,
            states: states.into_values().collect(),
            initial: src
                .initial()
                .iter()
                .map(|(s, p)| FileInitial { state: s as u64, prob: p })
                .collect(),
        })
    }
}

impl CoverSource for FileSource {
    fn vocab_size(&self) -> usize {
        self.doc.V
    }

    fn block_len(&self) -> usize {
        self.doc.L
    }

    fn depth(&self) -> usize {
        self.doc.B
    }

    fn num_states(&self) -> usize {
        self.laws.len()
    }

    fn initial(&self) -> &Pmf {
        &self.initial
    }

    fn block_law(&self, state: StateId) -> BlockLaw {
        self.laws[state].clone()
    }

    fn transition(&self, state: StateId, candidate: usize, _block: usize) -> Next<'_> {
        match self.children[state][candidate] {
            Some(k) => Next::State(k),
            None => Next::Leaf,
        }
    }
}

/// Checks that every state's block law sums to one within [`PROB_TOL`].
pub fn block_laws_normalized(src: &dyn CoverSource) -> bool {
    reachable_states(src).iter().flatten().all(|&s| {
        let total: f64 = src.block_law(s).law.probs().iter().sum();
        (total - 1.0).abs() <= PROB_TOL
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pair_source_rejects_tiny_vocabulary() {
        assert!(matches!(PairSource::new(1, 1, 1), Err(SourceError::Params(_))));
    }

    #[test]
    fn pair_source_v2_is_single_uniform_state() {
        let src = PairSource::new(2, 3, 1).unwrap();
        assert_eq!(src.num_states(), 1);
        let law = src.block_law(0);
        assert_eq!(law.candidates.len(), 8);
        assert!(law.law.probs().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn pair_source_v4_l1_has_six_half_half_states() {
        let src = PairSource::new(4, 1, 1).unwrap();
        assert_eq!(src.num_states(), 6);
        for s in 0..6 {
            assert!((src.initial().get(s) - 1.0 / 6.0).abs() < 1e-15);
            let law = src.block_law(s);
            let (i, j) = src.pairs()[s];
            assert_eq!(law.candidates, vec![vec![i], vec![j]]);
            assert_eq!(law.law.probs(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn pair_source_v4_l2_product_law() {
        let src = PairSource::new(4, 2, 1).unwrap();
        let a = src.pairs().iter().position(|&p| p == (0, 1)).unwrap();
        let b = src.pairs().iter().position(|&p| p == (2, 3)).unwrap();
        let law = src.block_law(src.compose(&[a, b]));
        let mut got: Vec<Vec<u32>> = law.candidates.clone();
        got.sort();
        assert_eq!(got, vec![vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3]]);
        assert!(law.law.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn class_source_masses() {
        let src = PairSource::classes(4, 1, 1, None).unwrap();
        // A = {0,1}, B = {2,3}: 4 cross pairs, one in each side
        assert_eq!(src.pairs(), &[(0, 2), (0, 1), (2, 3)]);
        let p = src.token_prior().probs();
        assert!((p[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 6.0).abs() < 1e-15);
        let tilted = PairSource::classes(3, 1, 1, Some(0.35)).unwrap();
        assert_eq!(tilted.pairs(), &[(0, 1), (1, 2)]);
        assert!((tilted.token_prior().get(0) - 0.35).abs() < 1e-15);
        assert!(PairSource::classes(2, 1, 1, Some(0.5)).is_err());
    }

    #[test]
    fn trajectory_is_deterministic_given_seed() {
        let src = PairSource::new(4, 1, 5).unwrap();
        let a = sample_trajectory(&src, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_trajectory(&src, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    fn minimal_doc() -> String {
        r#"{"version":1,"V":3,"L":2,"B":1,"Q":1,
            "states":[{"id":7,"candidates":[{"tokens":[0,2],"weight":1.0,"next_state":null}]}],
            "initial":[{"state":7,"prob":1.0}]}"#
            .to_string()
    }

    #[test]
    fn minimal_file_is_deterministic() {
        let src = FileSource::from_json(&minimal_doc()).unwrap();
        assert_eq!(src.num_states(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(sample_trajectory(&src, &mut rng), vec![0]);
        }
        assert_eq!(src.block_law(0).candidates, vec![vec![0, 2]]);
    }

    #[test]
    fn file_weights_pass_through() {
        let text = r#"{"version":1,"V":2,"L":1,"B":1,"Q":2,
            "states":[{"id":0,"candidates":[
                {"tokens":[0],"weight":0.7,"next_state":null},
                {"tokens":[1],"weight":0.3,"next_state":null}]}],
            "initial":[{"state":0,"prob":1.0}]}"#;
        let src = FileSource::from_json(text).unwrap();
        assert_eq!(src.block_law(0).law.probs(), &[0.7, 0.3]);
    }

    #[test]
    fn file_errors_are_distinct() {
        let bad_weight = minimal_doc().replace("\"weight\":1.0", "\"weight\":0.9");
        assert!(matches!(
            FileSource::from_json(&bad_weight),
            Err(SourceError::WeightSum { state: 7, .. })
        ));

        let dangling = r#"{"version":1,"V":2,"L":1,"B":2,"Q":1,
            "states":[{"id":0,"candidates":[{"tokens":[0],"weight":1.0,"next_state":5}]}],
            "initial":[{"state":0,"prob":1.0}]}"#;
        assert!(matches!(
            FileSource::from_json(dangling),
            Err(SourceError::DanglingChild { state: 0, child: 5 })
        ));

        let unknown_key = minimal_doc().replace("\"Q\":1", "\"Q\":1,\"extra\":0");
        assert!(matches!(
            FileSource::from_json(&unknown_key),
            Err(SourceError::Schema(_))
        ));

        let early_leaf = minimal_doc().replace("\"B\":1", "\"B\":2");
        assert!(matches!(
            FileSource::from_json(&early_leaf),
            Err(SourceError::Depth { .. })
        ));

        let too_many = minimal_doc().replace("\"Q\":1", "\"Q\":0");
        assert!(FileSource::from_json(&too_many).is_err());
    }

    #[test]
    fn canonical_real_has_17_digits() {
        assert_eq!(canonical_real(0.7), "6.9999999999999996e-1");
        assert_eq!(canonical_real(1.0), "1.0000000000000000e0");
        let back: f64 = canonical_real(0.1).parse().unwrap();
        assert_eq!(back, 0.1);
    }
}
