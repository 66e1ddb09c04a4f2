//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use covertmark_core::capacity::{brute_force_capacity, corollary_rate, gp_rate, pair_law, partition_joint, converse_probe};
use covertmark_core::cmdp::{fd_gradient, lagrangian, primal_dual_train, CmdpConfig, CmdpProblem, Policy};
use covertmark_core::pipeline::{
    ber_sweep, block_tv_exact, isotonic_increasing, partition_joints, run_ber, tv_sweep, WatermarkConfig,
};
use covertmark_core::polar::{
    compute_index_sets, polar_transform, restricted_law, sc_path_probability, BlockJoint, Constraint, KeySchedule,
};
use covertmark_core::prob::{CondPmf, JointLaw, Pmf};
use covertmark_core::source::{CoverSource, FileSource, PairSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn closed_form() -> Check {
    let start = Instant::now();
    for v in 2..=6 {
        let (p_s, p_x) = pair_law(v).map_err(|e| e.to_string())?;
        let best = brute_force_capacity(&p_s, &p_x, 2, 0, 0).map_err(|e| e.to_string())?;
        let formula = corollary_rate(v).map_err(|e| e.to_string())?;
        ensure(best.exhaustive, format!("V={v}: search not exhaustive"))?;
        ensure((best.rate - formula).abs() <= 1e-6, format!("V={v}: brute force {} vs {formula}", best.rate))?;
    }
    for v in 2..=64 {
        let r = gp_rate(&partition_joint(v).map_err(|e| e.to_string())?);
        let formula = corollary_rate(v).map_err(|e| e.to_string())?;
        ensure((r - formula).abs() <= 1e-9, format!("V={v}: partition {r} vs {formula}"))?;
    }
    let rates: Vec<f64> = (2..=1000).map(|v| corollary_rate(v).unwrap()).collect();
    ensure(rates.windows(2).all(|w| w[1] <= w[0] + 1e-15), "rate not monotone in V")?;
    let last = rates[rates.len() - 1];
    ensure((last - 0.5).abs() < 1e-3, format!("r(1000) = {last}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("V=2..6 exact, partition exact to V=64, r(1000)={last:.4}, {:.2?}", start.elapsed()))
}

fn converse() -> Check {
    let best = converse_probe(4, 10_000, 17).map_err(|e| e.to_string())?;
    ensure(best <= 2.0 / 3.0 + 1e-9, format!("probe reached {best}"))?;
    Ok(format!("max over 10^4 auxiliaries {best:.6} ≤ 2/3"))
}

fn polar() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let p = rng.gen_range(0..=10);
        let v: Vec<u8> = (0..1usize << p).map(|_| rng.gen_range(0..2)).collect();
        let u = polar_transform(&v).map_err(|e| e.to_string())?;
        ensure(polar_transform(&u).map_err(|e| e.to_string())? == v, format!("vector {i} (p={p}) not an involution"))?;
    }
    let src = PairSource::classes(1000, 8, 1, None).map_err(|e| e.to_string())?;
    let j = &partition_joints(&src, 1).map_err(|e| e.to_string())?[0];
    for local in 0..j.state_ids().len() {
        let mass: f64 = j.v_law(local).iter().sum();
        ensure((mass - 1.0).abs() <= 1e-9, format!("state {local}: mass {mass}"))?;
    }
    let mut worst: f64 = 0.0;
    for len in 1..=8usize {
        for _ in 0..10 {
            let w: Vec<f64> = (0..1 << len).map(|_| rng.gen::<f64>().powi(3)).collect();
            let z: f64 = w.iter().sum();
            let pv: Vec<f64> = w.into_iter().map(|x| x / z).collect();
            let mask: u32 = rng.gen::<u32>() & ((1u32 << len) - 1);
            let target = rng.gen::<u32>() & mask;
            let zc: f64 = (0..pv.len()).filter(|&v| v as u32 & mask == target).map(|v| pv[v]).sum();
            let law = restricted_law(&pv, Constraint { mask, target, priority: 0 }, len);
            let tv: f64 = (0..pv.len())
                .map(|v| {
                    let oracle = if v as u32 & mask == target { pv[v] / zc } else { 0.0 };
                    (sc_path_probability(&law, len, v as u32) - oracle).abs()
                })
                .sum::<f64>()
                / 2.0;
            worst = worst.max(tv);
        }
    }
    ensure(worst <= 1e-9, format!("sampler TV {worst:e}"))?;
    Ok(format!("involution ×1000, mass exact at L=8, sampler TV ≤ {worst:.1e}"))
}

fn ber() -> Check {
    let start = Instant::now();
    let src: Arc<dyn CoverSource> = Arc::new(PairSource::classes(1000, 8, 2, None).map_err(|e| e.to_string())?);
    let joints = partition_joints(src.as_ref(), 2).map_err(|e| e.to_string())?;
    let cfg = WatermarkConfig::new(src.clone(), joints.clone(), 0.5, 0.25).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = cfg.specs().iter().map(|s| s.message.len()).collect();
    ensure(sizes == [3, 3], format!("|M| per block {sizes:?}"))?;
    ensure((cfg.rate() - 0.375).abs() < 1e-12, format!("rate {}", cfg.rate()))?;
    let report = run_ber(&cfg, 2000, 11).map_err(|e| e.to_string())?;
    ensure(report.ber < 0.10, format!("BER {:.4} ± {:.4}", report.ber, report.ci95))?;

    let thresholds: Vec<(f64, f64)> = [0.05, 0.1, 0.25, 0.5, 0.75].iter().map(|&te| (0.5, te)).collect();
    let mut points = ber_sweep(src, joints, &thresholds, 2000, 12).map_err(|e| e.to_string())?;
    points.sort_by(|a, b| a.report.rate_bits_per_token.total_cmp(&b.report.rate_bits_per_token));
    let mut rates: Vec<f64> = points.iter().map(|p| p.report.rate_bits_per_token).collect();
    rates.dedup();
    ensure(rates.len() >= 4, format!("only {} distinct rates", rates.len()))?;
    let bers: Vec<f64> = points.iter().map(|p| p.report.ber).collect();
    let weights: Vec<f64> = points.iter().map(|p| p.report.bits as f64).collect();
    let fit = isotonic_increasing(&bers, &weights);
    for (p, f) in points.iter().zip(&fit) {
        ensure(
            (p.report.ber - f).abs() <= p.report.ci95.max(1e-12),
            format!("rate {:.3}: BER {:.4} off monotone fit {f:.4} by more than {:.4}", p.report.rate_bits_per_token, p.report.ber, p.report.ci95),
        )?;
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    let curve: Vec<String> = points.iter().map(|p| format!("{:.3}:{:.3}", p.report.rate_bits_per_token, p.report.ber)).collect();
    Ok(format!("BER {:.4} ± {:.4} at rate 0.375; curve {}; {:.1?}", report.ber, report.ci95, curve.join(" "), start.elapsed()))
}

fn two_position_joint() -> BlockJoint {
    let p_u = Pmf::new(4, [(0, 0.4), (2, 0.1), (1, 0.2), (3, 0.3)]).unwrap();
    let w = p_u.support().iter().map(|&u| Pmf::point(4, u).unwrap()).collect();
    let joint = JointLaw::new(Pmf::point(1, 0).unwrap(), CondPmf::new(vec![p_u]).unwrap(), vec![w]).unwrap();
    let tokens = (0..4u32).map(|u| vec![u & 1, u >> 1]).collect();
    BlockJoint::from_joint(2, joint, tokens).unwrap()
}

fn covertness() -> Check {
    let j = two_position_joint();
    let spec = compute_index_sets(&j, 0.5, 0.1).map_err(|e| e.to_string())?;
    let keyed = block_tv_exact(&j, &KeySchedule::randomized(&spec, 1), &[0]).map_err(|e| e.to_string())?;
    let bare = block_tv_exact(&j, &KeySchedule::randomized(&spec, 0), &[0]).map_err(|e| e.to_string())?;
    ensure((keyed - 0.1).abs() <= 1e-12 && (bare - 0.4).abs() <= 1e-12, format!("hand instance {keyed} / {bare}"))?;

    let src = PairSource::classes(3, 8, 1, Some(0.4)).and_then(|s| s.with_second_prob(0.35)).map_err(|e| e.to_string())?;
    let src: Arc<dyn CoverSource> = Arc::new(src);
    let joints = partition_joints(src.as_ref(), 1).map_err(|e| e.to_string())?;
    let key_rate = joints[0].key_rate();
    let cfg = WatermarkConfig::new(src, joints, 0.5, 0.5).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = (0..=8).collect();
    let points = tv_sweep(&cfg, &counts, 5).map_err(|e| e.to_string())?;
    let tv: Vec<f64> = points.iter().map(|p| p.avg_tv).collect();
    let argmin = (0..tv.len()).min_by(|&a, &b| tv[a].total_cmp(&tv[b])).unwrap();
    let target = (key_rate - 1e-9).ceil() as usize;
    ensure(argmin.abs_diff(target) <= 1, format!("minimum at {argmin}, ⌈I(U;X|S)⌉ = {target}"))?;
    ensure(argmin + 1 < tv.len() && tv[argmin + 1] > tv[argmin], "TV does not rise after the minimum")?;
    ensure(tv[tv.len() - 1] > tv[argmin], "TV at the largest key is not above the minimum")?;
    let curve: Vec<String> = tv.iter().map(|t| format!("{t:.4}")).collect();
    Ok(format!("hand instance exact; min at {argmin} key bits (target {target}); TV [{}]", curve.join(", ")))
}

fn five_point(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let at = |d: f64| {
                let mut p = x.to_vec();
                p[i] += d;
                f(&p)
            };
            (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
        })
        .collect()
}

fn cmdp() -> Check {
    let start = Instant::now();
    let src = PairSource::new(4, 1, 2).map_err(|e| e.to_string())?;
    let problem = CmdpProblem::new(&src);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let policy = Policy::random(&problem, 2, 1.0, seed).map_err(|e| e.to_string())?;
        let f = |p: &[f64]| lagrangian(&policy, p, &problem, 0.9, 0.7);
        let g = fd_gradient(f, policy.params(), 1e-4).map_err(|e| e.to_string())?;
        let oracle = five_point(|p| f(p).unwrap(), policy.params(), 1e-3);
        let num = g.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = oracle.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    ensure(worst <= 1e-4, format!("gradient relative error {worst:e}"))?;

    let src = PairSource::new(4, 1, 1).map_err(|e| e.to_string())?;
    let cfg = CmdpConfig {
        epsilon: 1.0,
        iterations: 500,
        u_block_size: 2,
        ..CmdpConfig::default()
    };
    let free = primal_dual_train(&src, &cfg, 0).map_err(|e| e.to_string())?;
    ensure(free.final_reward >= 0.666, format!("reward {}", free.final_reward))?;

    let doc = r#"{"version":1,"V":2,"L":1,"B":1,"Q":2,"states":[{"id":0,"candidates":[
        {"tokens":[0],"weight":1.0,"next_state":null},{"tokens":[1],"weight":0.0,"next_state":null}]}],
        "initial":[{"state":0,"prob":1.0}]}"#;
    let bound_src = FileSource::from_json(doc).map_err(|e| e.to_string())?;
    let bound_cfg = CmdpConfig {
        epsilon: 0.0,
        u_block_size: 2,
        ..CmdpConfig::default()
    };
    let bound = primal_dual_train(&bound_src, &bound_cfg, 0).map_err(|e| e.to_string())?;
    ensure(
        bound.final_cost <= bound_cfg.epsilon + 1e-3,
        format!("binding cost {} > ε + 1e-3", bound.final_cost),
    )?;
    let beta_ok = free.log.iter().chain(&bound.log).all(|r| r.beta >= 0.0);
    ensure(beta_ok, "β went negative")?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "gradient error {worst:.1e}; reward {:.5}; binding cost {:.1e} (max β {:.3}); {:.1?}",
        free.final_reward,
        bound.final_cost,
        bound.log.iter().map(|r| r.beta).fold(0.0, f64::max),
        start.elapsed()
    ))
}

fn reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = r#"{"source":{"kind":"pair","V":4,"L":1,"B":2},"trials":300,"seed":9,
        "joint":"cmdp","cmdp":{"iterations":60},
        "thresholds":[[0.5,0.1],[0.5,0.5],[0.5,0.9]]}"#;
    fs::write(dir.path().join("c.json"), cfg).map_err(|e| e.to_string())?;
    let mut files = 0;
    for cmd in ["train", "run-ber", "run-tv"] {
        for run in ["a", "b"] {
            let out = Command::new(env!("CARGO_BIN_EXE_covertmark"))
                .args([cmd, "--config", "c.json", "--out", &format!("{cmd}-{run}")])
                .current_dir(dir.path())
                .env_remove("COVERTMARK_SEED")
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.success(), format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr)))?;
        }
        let a = dir.path().join(format!("{cmd}-a"));
        let mut names: Vec<_> = fs::read_dir(&a).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            let x = fs::read(a.join(&name)).map_err(|e| e.to_string())?;
            let y = fs::read(dir.path().join(format!("{cmd}-b")).join(&name)).map_err(|e| e.to_string())?;
            ensure(x == y, format!("{cmd}/{} differs between runs", name.to_string_lossy()))?;
            files += 1;
        }
    }
    Ok(format!("{files} output files byte-identical across two runs"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 7] = [
        ("closed-form capacity", closed_form),
        ("converse probe", converse),
        ("polar correctness", polar),
        ("end-to-end rate/BER", ber),
        ("covertness curve", covertness),
        ("cmdp training", cmdp),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
