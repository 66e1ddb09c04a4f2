//! Multi-block embedding and detection, and the rate/BER and TV/key-bits
//! evaluation loops.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polar::{
    compute_index_sets, emit_tokens, induced_v_law, map_decode, polar_mask, sc_encode, token_partition,
    BlockJoint, DecodeRule, KeySchedule, PolarError, PolarSpec,
};
use crate::prob::ProbError;
use crate::source::{base_state_laws, CoverSource, Next, SourceError, StateId};

/// Per-block message sets above this size are sampled rather than enumerated.
pub const MAX_ENUMERATED_MESSAGES: usize = 256;
/// Messages drawn per block when not enumerated.
pub const SAMPLED_MESSAGES: usize = 64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected {need} tokens, got {got}")]
    TokenCount { need: usize, got: usize },
    #[error("state {state} produced token block {tokens:?} outside its candidate list")]
    Transition { state: StateId, tokens: Vec<u32> },
    #[error(transparent)]
    Polar(#[from] PolarError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Prob(#[from] ProbError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Everything shared by encoder and decoder: the source, the per-block
/// joints with their codes, and the key schedules.
#[derive(Clone)]
pub struct WatermarkConfig {
    source: Arc<dyn CoverSource>,
    joints: Arc<Vec<BlockJoint>>,
    specs: Vec<PolarSpec>,
    schedules: Vec<KeySchedule>,
    pub decode_rule: DecodeRule,
}

impl std::fmt::Debug for WatermarkConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WatermarkConfig")
            .field("blocks", &self.joints.len())
            .field("specs", &self.specs)
            .field("decode_rule", &self.decode_rule)
            .finish()
    }
}

impl WatermarkConfig {
    /// Builds codes for every block with the standard key schedule.
    pub fn new(source: Arc<dyn CoverSource>, joints: Vec<BlockJoint>, t_delta: f64, t_eps: f64) -> Result<Self> {
        let joints = Arc::new(joints);
        let specs = joints
            .iter()
            .map(|j| compute_index_sets(j, t_delta, t_eps))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_specs(source, joints, specs)
    }

    /// Reuses already computed codes.
    pub fn from_specs(source: Arc<dyn CoverSource>, joints: Arc<Vec<BlockJoint>>, specs: Vec<PolarSpec>) -> Result<Self> {
        if joints.is_empty() || joints.len() > source.depth() {
            return Err(PipelineError::Config(format!(
                "{} block joints for a source of depth {}",
                joints.len(),
                source.depth()
            )));
        }
        if specs.len() != joints.len() {
            return Err(PipelineError::Config("one code per block joint is required".into()));
        }
        for (j, s) in joints.iter().zip(&specs) {
            if j.block_len() != source.block_len() || s.block_len != source.block_len() {
                return Err(PipelineError::Config("block length disagrees with the source".into()));
            }
        }
        let schedules = specs.iter().map(KeySchedule::standard).collect();
        Ok(Self {
            source,
            joints,
            specs,
            schedules,
            decode_rule: DecodeRule::default(),
        })
    }

    /// Same codes, with `key_bits` key bits per block placed by
    /// [`KeySchedule::randomized`].
    pub fn with_randomized_keys(&self, key_bits: usize) -> Self {
        let mut out = self.clone();
        out.schedules = self.specs.iter().map(|s| KeySchedule::randomized(s, key_bits)).collect();
        out
    }

    pub fn source(&self) -> &dyn CoverSource {
        self.source.as_ref()
    }

    pub fn joints(&self) -> &[BlockJoint] {
        &self.joints
    }

    pub fn specs(&self) -> &[PolarSpec] {
        &self.specs
    }

    pub fn schedules(&self) -> &[KeySchedule] {
        &self.schedules
    }

    pub fn blocks(&self) -> usize {
        self.joints.len()
    }

    pub fn message_len(&self) -> usize {
        self.schedules.iter().map(KeySchedule::message_len).sum()
    }

    pub fn key_len(&self) -> usize {
        self.schedules.iter().map(KeySchedule::key_len).sum()
    }

    /// `Σ_b |M_b| / (B · L)` bits per token.
    pub fn rate(&self) -> f64 {
        self.message_len() as f64 / (self.blocks() * self.source.block_len()) as f64
    }

    fn split<'a>(&self, bits: &'a [u8], len: impl Fn(&KeySchedule) -> usize) -> Vec<&'a [u8]> {
        let mut out = Vec::with_capacity(self.blocks());
        let mut at = 0;
        for s in &self.schedules {
            let n = len(s);
            out.push(&bits[at..at + n]);
            at += n;
        }
        out
    }
}

/// Partition-auxiliary joints for the first `blocks` blocks, with each
/// block's state law the base pushforward.
pub fn partition_joints(src: &dyn CoverSource, blocks: usize) -> Result<Vec<BlockJoint>> {
    let laws = base_state_laws(src)?;
    let label = token_partition(src.vocab_size());
    laws.iter()
        .take(blocks)
        .map(|z| Ok(BlockJoint::from_labeling(src, z, &label)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedded {
    pub tokens: Vec<u32>,
    pub states: Vec<StateId>,
    /// Interned token block id per block.
    pub blocks: Vec<usize>,
}

/// Embeds `msg` into one realization of the cover process.
pub fn embed<R: Rng + ?Sized>(cfg: &WatermarkConfig, msg: &[u8], key: &[u8], rng: &mut R) -> Result<Embedded> {
    if msg.len() != cfg.message_len() {
        return Err(PipelineError::Config(format!(
            "message has {} bits, the code carries {}",
            msg.len(),
            cfg.message_len()
        )));
    }
    if key.len() < cfg.key_len() {
        return Err(PolarError::KeyTooShort {
            need: cfg.key_len(),
            got: key.len(),
        }
        .into());
    }
    let src = cfg.source();
    let msgs = cfg.split(msg, KeySchedule::message_len);
    let keys = cfg.split(key, KeySchedule::key_len);
    let mut out = Embedded {
        tokens: Vec::with_capacity(cfg.blocks() * src.block_len()),
        states: Vec::with_capacity(cfg.blocks()),
        blocks: Vec::with_capacity(cfg.blocks()),
    };
    let mut state = src.initial().sample(rng);
    for b in 0..cfg.blocks() {
        let joint = &cfg.joints[b];
        let enc = sc_encode(joint, &cfg.schedules[b], state, msgs[b], keys[b], rng)?;
        let x = emit_tokens(joint, state, enc.u, rng)?;
        let tokens = joint.tokens(x);
        out.tokens.extend_from_slice(tokens);
        out.states.push(state);
        out.blocks.push(x);
        if b + 1 < cfg.blocks() {
            state = advance(src, state, tokens, b + 1, rng)?;
        }
    }
    Ok(out)
}

fn advance<R: Rng + ?Sized>(src: &dyn CoverSource, state: StateId, tokens: &[u32], block: usize, rng: &mut R) -> Result<StateId> {
    let cand = src.block_law(state).find(tokens).ok_or_else(|| PipelineError::Transition {
        state,
        tokens: tokens.to_vec(),
    })?;
    match src.transition(state, cand, block) {
        Next::State(t) => Ok(t),
        Next::Resample(law) => Ok(law.sample(rng)),
        Next::Leaf => Err(PipelineError::Config(format!("source ends before block {}", block + 1))),
    }
}

/// Recovers the message from a token sequence.
pub fn detect(cfg: &WatermarkConfig, tokens: &[u32], key: &[u8]) -> Result<Vec<u8>> {
    let l = cfg.source.block_len();
    let need = cfg.blocks() * l;
    if tokens.len() != need {
        return Err(PipelineError::TokenCount { need, got: tokens.len() });
    }
    if key.len() < cfg.key_len() {
        return Err(PolarError::KeyTooShort {
            need: cfg.key_len(),
            got: key.len(),
        }
        .into());
    }
    let keys = cfg.split(key, KeySchedule::key_len);
    let mut msg = Vec::with_capacity(cfg.message_len());
    for (b, block) in tokens.chunks(l).enumerate() {
        let joint = &cfg.joints[b];
        let x = joint.x_of(block).ok_or_else(|| PolarError::OutsideSupport(block.to_vec()))?;
        msg.extend(map_decode(joint, &cfg.schedules[b], x, keys[b], cfg.decode_rule)?);
    }
    Ok(msg)
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_bits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.gen::<bool>())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ber: f64,
    pub ci95: f64,
    pub rate_bits_per_token: f64,
    pub trials: usize,
    pub bits: usize,
    pub bit_errors: usize,
    /// Mean `−log₂ P_base(x|s)` per emitted block; a distortion proxy, not a
    /// model perplexity.
    pub log_loss_proxy: f64,
    /// Same with a wrong key at the detector.
    pub wrong_key_ber: f64,
}

/// Monte Carlo BER of uniformly random messages and keys. Trial `t` uses
/// stream `t` of a ChaCha generator seeded with `seed`.
pub fn run_ber(cfg: &WatermarkConfig, trials: usize, seed: u64) -> Result<RunReport> {
    let results: Vec<(usize, usize, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            let msg = random_bits(cfg.message_len(), &mut rng);
            let key = random_bits(cfg.key_len(), &mut rng);
            let out = embed(cfg, &msg, &key, &mut rng)?;
            let got = detect(cfg, &out.tokens, &key)?;
            let errors = msg.iter().zip(&got).filter(|(a, b)| a != b).count();
            let wrong: Vec<u8> = key.iter().map(|k| k ^ 1).collect();
            let wrong_errors = if key.is_empty() {
                errors
            } else {
                let got = detect(cfg, &out.tokens, &wrong)?;
                msg.iter().zip(&got).filter(|(a, b)| a != b).count()
            };
            let mut loss = 0.0;
            for (b, (&s, &x)) in out.states.iter().zip(&out.blocks).enumerate() {
                let joint = &cfg.joints[b];
                let local = joint.state_index(s).ok_or(PolarError::UnknownState(s))?;
                let p = joint.base(local).iter().find(|e| e.0 == x).map_or(0.0, |e| e.1);
                loss += -p.log2();
            }
            Ok((errors, wrong_errors, loss / out.blocks.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let bits = trials * cfg.message_len();
    let bit_errors: usize = results.iter().map(|r| r.0).sum();
    let wrong: usize = results.iter().map(|r| r.1).sum();
    let loss: f64 = results.iter().map(|r| r.2).sum::<f64>() / trials.max(1) as f64;
    let ber = if bits == 0 { 0.0 } else { bit_errors as f64 / bits as f64 };
    let ci95 = if bits == 0 { 0.0 } else { 1.96 * (ber * (1.0 - ber) / bits as f64).sqrt() };
    Ok(RunReport {
        ber,
        ci95,
        rate_bits_per_token: cfg.rate(),
        trials,
        bits,
        bit_errors,
        log_loss_proxy: loss,
        wrong_key_ber: if bits == 0 { 0.0 } else { wrong as f64 / bits as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub t_delta: f64,
    pub t_eps: f64,
    pub report: RunReport,
}

/// BER at each `(T_δ, T_ε)` threshold pair. Point `k` uses seed
/// `seed + k`.
pub fn ber_sweep(
    source: Arc<dyn CoverSource>,
    joints: Vec<BlockJoint>,
    thresholds: &[(f64, f64)],
    trials: usize,
    seed: u64,
) -> Result<Vec<BerPoint>> {
    let joints = Arc::new(joints);
    thresholds
        .iter()
        .enumerate()
        .map(|(k, &(t_delta, t_eps))| {
            let specs = joints
                .iter()
                .map(|j| compute_index_sets(j, t_delta, t_eps))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = WatermarkConfig::from_specs(source.clone(), joints.clone(), specs)?;
            Ok(BerPoint {
                t_delta,
                t_eps,
                report: run_ber(&cfg, trials, seed.wrapping_add(k as u64))?,
            })
        })
        .collect()
}

/// Weighted least-squares non-decreasing fit (pool adjacent violators).
pub fn isotonic_increasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            if blocks[n - 2].0 <= blocks[n - 1].0 {
                break;
            }
            let (v2, w2, c2) = blocks.pop().unwrap();
            let (v1, w1, c1) = blocks.pop().unwrap();
            let w = w1 + w2;
            let mean = if w > 0.0 { (v1 * w1 + v2 * w2) / w } else { 0.5 * (v1 + v2) };
            blocks.push((mean, w, c1 + c2));
        }
    }
    blocks.into_iter().flat_map(|(v, _, c)| std::iter::repeat(v).take(c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TvMode {
    /// Exact enumeration over states, keys and local randomness.
    Exact,
    /// Plug-in estimate from `trials` encoder runs per block.
    MonteCarlo { trials: usize, seed: u64 },
}

/// `Σ_s P(s) TV(P̃(·|s, m), P(·|s))` for one block.
pub fn block_tv_exact(joint: &BlockJoint, schedule: &KeySchedule, msg: &[u8]) -> Result<f64> {
    let len = joint.block_len();
    let p_s = joint.joint().p_s();
    let parts = (0..p_s.len())
        .into_par_iter()
        .map(|k| {
            let local = p_s.support()[k];
            let ps = p_s.probs()[k];
            let law = induced_v_law(joint, schedule, local, msg)?;
            let mut induced: HashMap<usize, f64> = HashMap::new();
            for (v, &pv) in law.iter().enumerate() {
                if pv == 0.0 {
                    continue;
                }
                let u = polar_mask(v as u32, len) as usize;
                let w = joint.joint().w(local, u).ok_or(PolarError::ZeroMass {
                    state: joint.state_ids()[local],
                    u: u as u32,
                })?;
                for (x, px) in w.iter() {
                    *induced.entry(x).or_default() += pv * px;
                }
            }
            let mut diff = 0.0;
            for &(x, pb) in joint.base(local) {
                diff += (induced.remove(&x).unwrap_or(0.0) - pb).abs();
            }
            diff += induced.values().map(|p| p.abs()).sum::<f64>();
            Ok(ps * 0.5 * diff)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

/// Plug-in TV between empirical `(s, x)` frequencies and the base joint.
pub fn block_tv_monte_carlo(
    joint: &BlockJoint,
    schedule: &KeySchedule,
    msg: &[u8],
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let p_s = joint.joint().p_s();
    let counts: Vec<(usize, usize)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            let local = p_s.sample(&mut rng);
            let state = joint.state_ids()[local];
            let key = random_bits(schedule.key_len(), &mut rng);
            let enc = sc_encode(joint, schedule, state, msg, &key, &mut rng)?;
            Ok((local, emit_tokens(joint, state, enc.u, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut freq: HashMap<(usize, usize), f64> = HashMap::new();
    for c in counts {
        *freq.entry(c).or_default() += 1.0 / trials as f64;
    }
    let mut diff = 0.0;
    for (local, ps) in p_s.iter() {
        for &(x, pb) in joint.base(local) {
            diff += (freq.remove(&(local, x)).unwrap_or(0.0) - ps * pb).abs();
        }
    }
    diff += freq.values().sum::<f64>();
    Ok(0.5 * diff)
}

/// Mean over blocks of the per-block TV for message `msg`.
pub fn induced_tv(cfg: &WatermarkConfig, msg: &[u8], mode: TvMode) -> Result<f64> {
    if msg.len() != cfg.message_len() {
        return Err(PipelineError::Config(format!(
            "message has {} bits, the code carries {}",
            msg.len(),
            cfg.message_len()
        )));
    }
    let msgs = cfg.split(msg, KeySchedule::message_len);
    let mut total = 0.0;
    for b in 0..cfg.blocks() {
        total += match mode {
            TvMode::Exact => block_tv_exact(&cfg.joints[b], &cfg.schedules[b], msgs[b])?,
            TvMode::MonteCarlo { trials, seed } => {
                block_tv_monte_carlo(&cfg.joints[b], &cfg.schedules[b], msgs[b], trials, seed.wrapping_add(b as u64))?
            }
        };
    }
    Ok(total / cfg.blocks() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvPoint {
    pub key_bits: usize,
    pub avg_tv: f64,
    /// Half-width of the normal interval over sampled messages; zero when
    /// every message is enumerated.
    pub ci95: f64,
}

/// Average exact TV over messages for each key-bit count, with key bits
/// placed by [`KeySchedule::randomized`].
pub fn tv_sweep(cfg: &WatermarkConfig, key_bit_counts: &[usize], seed: u64) -> Result<Vec<TvPoint>> {
    key_bit_counts
        .iter()
        .map(|&k| {
            let c = cfg.with_randomized_keys(k);
            let mut avg = 0.0;
            let mut var = 0.0;
            let mut sampled = false;
            for b in 0..c.blocks() {
                let n = c.schedules[b].message_len();
                let messages: Vec<Vec<u8>> = if n < usize::BITS as usize && (1usize << n) <= MAX_ENUMERATED_MESSAGES {
                    (0..1u32 << n).map(|m| (0..n).map(|t| ((m >> t) & 1) as u8).collect()).collect()
                } else {
                    sampled = true;
                    let mut rng = trial_rng(seed, b as u64);
                    (0..SAMPLED_MESSAGES).map(|_| random_bits(n, &mut rng)).collect()
                };
                let tvs = messages
                    .iter()
                    .map(|m| block_tv_exact(&c.joints[b], &c.schedules[b], m))
                    .collect::<Result<Vec<_>>>()?;
                let mean = tvs.iter().sum::<f64>() / tvs.len() as f64;
                let sd2 = tvs.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (tvs.len().max(2) - 1) as f64;
                avg += mean;
                var += sd2 / tvs.len() as f64;
            }
            let blocks = c.blocks() as f64;
            Ok(TvPoint {
                key_bits: k,
                avg_tv: avg / blocks,
                ci95: if sampled { 1.96 * var.sqrt() / blocks } else { 0.0 },
            })
        })
        .collect()
}
