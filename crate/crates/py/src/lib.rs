//! Python bindings: cover sources, capacity helpers and the watermark codec.

use std::sync::Arc;

use covertmark_core::capacity::{self, brute_force_capacity, pair_law};
use covertmark_core::cmdp::{primal_dual_train, CmdpConfig};
use covertmark_core::pipeline::{self, partition_joints, WatermarkConfig};
use covertmark_core::polar;
use covertmark_core::prob::{self, Pmf};
use covertmark_core::source::{CoverSource, FileSource, PairSource};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

// `Vec<u8>` would come back as `bytes`.
fn widen(bits: Vec<u8>) -> Vec<u32> {
    bits.into_iter().map(u32::from).collect()
}

/// `⌊V²/4⌋ / C(V,2)`, the pair-source capacity in bits per token.
#[pyfunction]
fn corollary_rate(vocab: usize) -> PyResult<f64> {
    capacity::corollary_rate(vocab).map_err(value_err)
}

/// Best `(rate, key_rate, exhaustive)` on the pair source over binary
/// auxiliaries.
#[pyfunction]
#[pyo3(signature = (vocab, restarts = 0, seed = 0))]
fn pair_capacity(py: Python<'_>, vocab: usize, restarts: usize, seed: u64) -> PyResult<(f64, f64, bool)> {
    py.detach(|| {
        let (p_s, p_x) = pair_law(vocab)?;
        let best = brute_force_capacity(&p_s, &p_x, 2, restarts, seed)?;
        Ok((best.rate, best.key_rate, best.exhaustive))
    })
    .map_err(|e: capacity::CapacityError| value_err(e))
}

/// `u = v G^{⊗p}` over GF(2); the length must be a power of two.
#[pyfunction]
fn polar_transform(bits: Vec<u8>) -> PyResult<Vec<u32>> {
    polar::polar_transform(&bits).map(widen).map_err(value_err)
}

/// Total variation between two dense probability vectors.
#[pyfunction]
fn tv_distance(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let p = Pmf::from_probs(&p).map_err(value_err)?;
    let q = Pmf::from_probs(&q).map_err(value_err)?;
    prob::tv_distance(&p, &q).map_err(value_err)
}

#[pyclass(frozen)]
struct Source {
    inner: Arc<dyn CoverSource>,
}

#[pymethods]
impl Source {
    /// Pair source: every unordered token pair is a per-token state.
    #[staticmethod]
    #[pyo3(signature = (vocab, block_len, blocks))]
    fn pair(vocab: usize, block_len: usize, blocks: usize) -> PyResult<Self> {
        let src = PairSource::new(vocab, block_len, blocks).map_err(value_err)?;
        Ok(Source { inner: Arc::new(src) })
    }

    /// Pair source lumped into cross and same-side classes.
    #[staticmethod]
    #[pyo3(signature = (vocab, block_len, blocks, cross_mass = None, second_prob = None))]
    fn pair_classes(
        vocab: usize,
        block_len: usize,
        blocks: usize,
        cross_mass: Option<f64>,
        second_prob: Option<f64>,
    ) -> PyResult<Self> {
        let mut src = PairSource::classes(vocab, block_len, blocks, cross_mass).map_err(value_err)?;
        if let Some(theta) = second_prob {
            src = src.with_second_prob(theta).map_err(value_err)?;
        }
        Ok(Source { inner: Arc::new(src) })
    }

    /// Block-law file contents.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let src = FileSource::from_json(text).map_err(value_err)?;
        Ok(Source { inner: Arc::new(src) })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let src = FileSource::load(path).map_err(value_err)?;
        Ok(Source { inner: Arc::new(src) })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn block_len(&self) -> usize {
        self.inner.block_len()
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.inner.depth()
    }

    fn __repr__(&self) -> String {
        format!(
            "Source(V={}, L={}, B={}, states={})",
            self.inner.vocab_size(),
            self.inner.block_len(),
            self.inner.depth(),
            self.inner.num_states()
        )
    }
}

#[pyclass(frozen, get_all)]
struct BerReport {
    ber: f64,
    ci95: f64,
    rate: f64,
    trials: usize,
    bits: usize,
    bit_errors: usize,
    wrong_key_ber: f64,
    log_loss_proxy: f64,
}

#[pymethods]
impl BerReport {
    fn __repr__(&self) -> String {
        format!("BerReport(ber={:.4}, ci95={:.4}, rate={:.4}, trials={})", self.ber, self.ci95, self.rate, self.trials)
    }
}

/// Polar watermark over a cover source with per-block partition or trained
/// joints.
#[pyclass(frozen)]
struct Watermark {
    cfg: WatermarkConfig,
}

#[pymethods]
impl Watermark {
    #[new]
    #[pyo3(signature = (source, t_delta = 0.25, t_eps = 0.25, joint = "partition", iterations = 500, epsilon = 0.1, seed = 0))]
    fn new(
        py: Python<'_>,
        source: &Source,
        t_delta: f64,
        t_eps: f64,
        joint: &str,
        iterations: usize,
        epsilon: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let src = source.inner.clone();
        let joints = match joint {
            "partition" => partition_joints(src.as_ref(), src.depth()).map_err(value_err)?,
            "cmdp" => {
                let cfg = CmdpConfig {
                    iterations,
                    epsilon,
                    ..CmdpConfig::default()
                };
                let out = py.detach(|| primal_dual_train(src.as_ref(), &cfg, seed)).map_err(value_err)?;
                out.block_joints(src.as_ref()).map_err(value_err)?
            }
            other => return Err(value_err(format!("unknown joint kind {other:?}"))),
        };
        let cfg = WatermarkConfig::new(src, joints, t_delta, t_eps).map_err(value_err)?;
        Ok(Watermark { cfg })
    }

    #[getter]
    fn message_len(&self) -> usize {
        self.cfg.message_len()
    }

    #[getter]
    fn key_len(&self) -> usize {
        self.cfg.key_len()
    }

    /// Message bits per token.
    #[getter]
    fn rate(&self) -> f64 {
        self.cfg.rate()
    }

    /// Copy keyed with `key_bits` bits per block, padding message positions first.
    fn with_key_bits(&self, key_bits: usize) -> Self {
        Watermark {
            cfg: self.cfg.with_randomized_keys(key_bits),
        }
    }

    #[pyo3(signature = (message, key, seed = 0))]
    fn embed(&self, message: Vec<u8>, key: Vec<u8>, seed: u64) -> PyResult<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = pipeline::embed(&self.cfg, &message, &key, &mut rng).map_err(value_err)?;
        Ok(out.tokens)
    }

    fn detect(&self, tokens: Vec<u32>, key: Vec<u8>) -> PyResult<Vec<u32>> {
        pipeline::detect(&self.cfg, &tokens, &key).map(widen).map_err(value_err)
    }

    #[pyo3(signature = (trials = 2000, seed = 0))]
    fn run_ber(&self, py: Python<'_>, trials: usize, seed: u64) -> PyResult<BerReport> {
        let r = py.detach(|| pipeline::run_ber(&self.cfg, trials, seed)).map_err(value_err)?;
        Ok(BerReport {
            ber: r.ber,
            ci95: r.ci95,
            rate: r.rate_bits_per_token,
            trials: r.trials,
            bits: r.bits,
            bit_errors: r.bit_errors,
            wrong_key_ber: r.wrong_key_ber,
            log_loss_proxy: r.log_loss_proxy,
        })
    }

    /// `(key_bits, avg_tv, ci95)` per requested key size.
    #[pyo3(signature = (key_bits, seed = 0))]
    fn tv_sweep(&self, py: Python<'_>, key_bits: Vec<usize>, seed: u64) -> PyResult<Vec<(usize, f64, f64)>> {
        let points = py.detach(|| pipeline::tv_sweep(&self.cfg, &key_bits, seed)).map_err(value_err)?;
        Ok(points.into_iter().map(|p| (p.key_bits, p.avg_tv, p.ci95)).collect())
    }
}

#[pymodule]
fn covertmark(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(corollary_rate, m)?)?;
    m.add_function(wrap_pyfunction!(pair_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(polar_transform, m)?)?;
    m.add_function(wrap_pyfunction!(tv_distance, m)?)?;
    m.add_class::<Source>()?;
    m.add_class::<BerReport>()?;
    m.add_class::<Watermark>()?;
    Ok(())
}
