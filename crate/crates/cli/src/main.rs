//! `covertmark`: capacity, training, code construction and sweeps.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use covertmark_core::capacity::{brute_force_capacity, corollary_rate, gp_rate, key_rate, pair_law, partition_joint};
use covertmark_core::cmdp::{primal_dual_train, TrainOutput};
use covertmark_core::manifest::{Manifest, MANIFEST_FILE};
use covertmark_core::pipeline::{ber_sweep, partition_joints, tv_sweep, WatermarkConfig};
use covertmark_core::polar::BlockJoint;
use covertmark_core::source::CoverSource;
use serde::Serialize;

use config::{build_source, ConfigError, ExperimentConfig, JointKind};

/// Largest vocabulary whose deterministic auxiliaries are enumerated.
const EXHAUSTIVE_VOCAB: usize = 20;

#[derive(Parser)]
#[command(name = "covertmark", version, about = "Covert multi-bit watermarking experiments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gelfand-Pinsker rate of the pair source.
    Capacity {
        /// Vocabulary size, as `V=4` or `4`.
        #[arg(long, conflicts_with = "config")]
        pair: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Primal-dual policy training.
    Train {
        #[arg(long, required_unless_present = "from_manifest")]
        config: Option<PathBuf>,
        /// Rerun the configuration and seed recorded in a manifest.
        #[arg(long, conflicts_with = "config")]
        from_manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-block index sets as JSON.
    BuildCode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rate/BER sweep over threshold pairs.
    RunBer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// TV/key-bits sweep.
    RunTv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Capacity { pair, config, out } => cmd_capacity(pair, config, out),
        Command::Train {
            config,
            from_manifest,
            out,
        } => {
            let loaded = match (config, from_manifest) {
                (Some(path), _) => Loaded::from_file(&path)?,
                (None, Some(path)) => Loaded::from_manifest(&path)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            cmd_train(loaded, out)
        }
        Command::BuildCode { config, out } => cmd_build_code(Loaded::from_file(&config)?, out),
        Command::RunBer { config, out } => cmd_run_ber(Loaded::from_file(&config)?, out),
        Command::RunTv { config, out } => cmd_run_tv(Loaded::from_file(&config)?, out),
    }
}

/// A parsed configuration with the seed override applied.
struct Loaded {
    cfg: ExperimentConfig,
    bytes: Vec<u8>,
    base: PathBuf,
}

impl Loaded {
    fn from_file(path: &Path) -> Result<Self, Failure> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::Config)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Failure::Config(e.into()))?;
        let cfg = ExperimentConfig::parse(text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::finish(cfg, bytes, base)
    }

    fn from_manifest(path: &Path) -> Result<Self, Failure> {
        let m = Manifest::load(path).map_err(|e| Failure::Config(e.into()))?;
        let mut cfg: ExperimentConfig = serde_json::from_value(m.config.clone()).map_err(|e| Failure::Config(e.into()))?;
        cfg.validate()?;
        // the recorded seed wins over the environment
        cfg.seed = m.seed;
        let bytes = serde_json::to_vec(&m.config).map_err(|e| Failure::Runtime(e.into()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { cfg, bytes, base })
    }

    fn finish(mut cfg: ExperimentConfig, bytes: Vec<u8>, base: PathBuf) -> Result<Self, Failure> {
        if let Ok(s) = std::env::var("COVERTMARK_SEED") {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Failure::Config(anyhow!("COVERTMARK_SEED={s:?} is not an unsigned integer")))?;
        }
        Ok(Self { cfg, bytes, base })
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.cfg.output_dir.clone())
    }

    fn manifest(&self, command: &str, source_bytes: Option<&[u8]>) -> Result<Manifest, Failure> {
        let value = serde_json::to_value(&self.cfg).map_err(|e| Failure::Runtime(e.into()))?;
        let mut m = Manifest::new(command, value, self.cfg.seed);
        m.add_input("config", &self.bytes);
        if let Some(b) = source_bytes {
            m.add_input("source", b);
        }
        Ok(m)
    }

    fn source(&self) -> Result<(Arc<dyn CoverSource>, Option<Vec<u8>>), Failure> {
        build_source(&self.cfg, &self.base).map_err(Failure::Config)
    }
}

/// Writes outputs and the manifest, or prints to stdout without a directory.
struct Outputs {
    dir: Option<PathBuf>,
    manifest: Manifest,
}

impl Outputs {
    fn new(dir: Option<PathBuf>, manifest: Manifest) -> anyhow::Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(Self { dir, manifest })
    }

    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        match &self.dir {
            Some(d) => {
                fs::write(d.join(name), contents).with_context(|| format!("writing {name}"))?;
                self.manifest.add_output(name, contents.as_bytes());
            }
            None => print!("{contents}"),
        }
        Ok(())
    }

    fn finish(self) -> anyhow::Result<()> {
        if let Some(d) = &self.dir {
            self.manifest.write(d)?;
            eprintln!("wrote {}", d.join(MANIFEST_FILE).display());
        }
        Ok(())
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?)
}

fn pretty<T: Serialize>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct CapacityReport {
    V: usize,
    rate: f64,
    key_rate: f64,
    corollary_rate: f64,
    exhaustive: bool,
}

fn parse_pair(arg: &str) -> Result<usize, Failure> {
    let v = arg.strip_prefix("V=").unwrap_or(arg);
    v.parse()
        .map_err(|_| Failure::Config(anyhow!("--pair expects V=<size>, got {arg:?}")))
}

fn cmd_capacity(pair: Option<String>, config: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let (vocab, restarts, seed, loaded) = match (pair, config) {
        (Some(p), _) => (parse_pair(&p)?, 0, 0, None),
        (None, Some(path)) => {
            let l = Loaded::from_file(&path)?;
            let v = match l.cfg.source {
                config::SourceSpec::Pair { V, .. } | config::SourceSpec::PairClasses { V, .. } => V,
                config::SourceSpec::File { .. } => {
                    return Err(Failure::Config(anyhow!("capacity needs a pair source")));
                }
            };
            (v, l.cfg.restarts, l.cfg.seed, Some(l))
        }
        (None, None) => return Err(Failure::Config(anyhow!("give --pair V=<size> or --config <file>"))),
    };
    if vocab < 2 {
        return Err(Failure::Config(anyhow!("vocabulary size {vocab} < 2")));
    }
    let report = if vocab <= EXHAUSTIVE_VOCAB {
        let (p_s, p_x) = pair_law(vocab).map_err(anyhow::Error::from)?;
        let r = brute_force_capacity(&p_s, &p_x, 2, restarts, seed).map_err(anyhow::Error::from)?;
        CapacityReport {
            V: vocab,
            rate: r.rate,
            key_rate: r.key_rate,
            corollary_rate: corollary_rate(vocab).map_err(anyhow::Error::from)?,
            exhaustive: r.exhaustive,
        }
    } else {
        let j = partition_joint(vocab).map_err(anyhow::Error::from)?;
        CapacityReport {
            V: vocab,
            rate: gp_rate(&j),
            key_rate: key_rate(&j),
            corollary_rate: corollary_rate(vocab).map_err(anyhow::Error::from)?,
            exhaustive: false,
        }
    };
    println!("rate {:.4} key_rate {:.4}", report.rate, report.key_rate);
    let Some(dir) = out.or_else(|| loaded.as_ref().and_then(|l| l.cfg.output_dir.clone())) else {
        return Ok(());
    };
    let manifest = match &loaded {
        Some(l) => l.manifest("capacity", None)?,
        None => Manifest::new("capacity", serde_json::json!({ "pair": { "V": vocab } }), seed),
    };
    let mut outputs = Outputs::new(Some(dir), manifest)?;
    outputs.write("capacity.json", &pretty(&report)?)?;
    outputs.finish()?;
    Ok(())
}

fn train(l: &Loaded, src: &dyn CoverSource) -> anyhow::Result<TrainOutput> {
    let cfg = l.cfg.cmdp_config(src.block_len());
    Ok(primal_dual_train(src, &cfg, l.cfg.seed)?)
}

#[derive(Serialize)]
struct LawRow {
    block: usize,
    state: usize,
    z: f64,
    p_u: Vec<(usize, f64)>,
    w: Vec<Vec<(usize, f64)>>,
}

fn cmd_train(l: Loaded, out: Option<PathBuf>) -> Outcome {
    let (src, bytes) = l.source()?;
    l.cfg.cmdp_config(src.block_len()).validate(src.block_len()).map_err(|e| Failure::Config(e.into()))?;
    let result = train(&l, src.as_ref())?;
    let mut outputs = Outputs::new(l.out_dir(out), l.manifest("train", bytes.as_deref())?)?;
    outputs.write("train_log.csv", &to_csv(&result.log)?)?;
    if outputs.dir.is_some() {
        let mut laws = Vec::new();
        for law in &result.laws {
            for (s, a) in &law.action {
                laws.push(LawRow {
                    block: law.block,
                    state: *s,
                    z: law.z.get(*s),
                    p_u: a.p_u.iter().collect(),
                    w: a.w.iter().map(|r| r.iter().collect()).collect(),
                });
            }
        }
        outputs.write("laws.json", &pretty(&laws)?)?;
        outputs.write("policy.json", &pretty(&result.policy)?)?;
    }
    eprintln!(
        "final reward {:.6} cost {:.6} beta {:.6}",
        result.final_reward, result.final_cost, result.final_beta
    );
    outputs.finish()?;
    Ok(())
}

fn joints(l: &Loaded, src: &dyn CoverSource) -> anyhow::Result<Vec<BlockJoint>> {
    match l.cfg.joint {
        JointKind::Partition => Ok(partition_joints(src, src.depth())?),
        JointKind::Cmdp => train(l, src)?.block_joints(src).map_err(Into::into),
    }
}

fn watermark(l: &Loaded) -> Result<(WatermarkConfig, Option<Vec<u8>>), Failure> {
    let (src, bytes) = l.source()?;
    let js = joints(l, src.as_ref())?;
    let mut cfg = WatermarkConfig::new(src, js, l.cfg.t_delta, l.cfg.t_eps).map_err(anyhow::Error::from)?;
    cfg.decode_rule = l.cfg.decode_rule;
    Ok((cfg, bytes))
}

fn cmd_build_code(l: Loaded, out: Option<PathBuf>) -> Outcome {
    let (cfg, bytes) = watermark(&l)?;
    let mut outputs = Outputs::new(l.out_dir(out), l.manifest("build-code", bytes.as_deref())?)?;
    outputs.write("codes.json", &pretty(&cfg.specs())?)?;
    outputs.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct BerRow {
    t_delta: f64,
    t_eps: f64,
    rate: f64,
    ber: f64,
    ci95: f64,
    trials: usize,
    wrong_key_ber: f64,
    log_loss_proxy: f64,
}

fn cmd_run_ber(l: Loaded, out: Option<PathBuf>) -> Outcome {
    let (src, bytes) = l.source()?;
    let js = joints(&l, src.as_ref())?;
    let points = ber_sweep(src, js, &l.cfg.ber_points(), l.cfg.trials, l.cfg.seed).map_err(anyhow::Error::from)?;
    let rows: Vec<BerRow> = points
        .iter()
        .map(|p| BerRow {
            t_delta: p.t_delta,
            t_eps: p.t_eps,
            rate: p.report.rate_bits_per_token,
            ber: p.report.ber,
            ci95: p.report.ci95,
            trials: p.report.trials,
            wrong_key_ber: p.report.wrong_key_ber,
            log_loss_proxy: p.report.log_loss_proxy,
        })
        .collect();
    let mut outputs = Outputs::new(l.out_dir(out), l.manifest("run-ber", bytes.as_deref())?)?;
    outputs.write("ber.csv", &to_csv(&rows)?)?;
    outputs.finish()?;
    Ok(())
}

fn cmd_run_tv(l: Loaded, out: Option<PathBuf>) -> Outcome {
    let (cfg, bytes) = watermark(&l)?;
    let points = tv_sweep(&cfg, &l.cfg.key_bits, l.cfg.seed).map_err(anyhow::Error::from)?;
    let mut outputs = Outputs::new(l.out_dir(out), l.manifest("run-tv", bytes.as_deref())?)?;
    outputs.write("tv.csv", &to_csv(&points)?)?;
    outputs.finish()?;
    Ok(())
}
