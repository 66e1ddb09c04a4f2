use std::sync::Arc;

use covertmark_core::pipeline::{
    block_tv_exact, detect, embed, induced_tv, partition_joints, run_ber, tv_sweep, TvMode, WatermarkConfig,
};
use covertmark_core::polar::{
    compute_index_sets, polar_mask, restricted_law, sc_encode, sc_path_probability, BlockJoint, Constraint,
    KeySchedule, Role,
};
use covertmark_core::prob::{CondPmf, JointLaw, Pmf};
use covertmark_core::source::{CoverSource, PairSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One state, `L = 2`, `X = U`, with `P(u₁u₂)` = 00: .4, 01: .1, 10: .2, 11: .3.
fn two_position_joint() -> BlockJoint {
    // packed u = u₁ + 2u₂
    let p_u = Pmf::new(4, [(0, 0.4), (2, 0.1), (1, 0.2), (3, 0.3)]).unwrap();
    let w = p_u.support().iter().map(|&u| Pmf::point(4, u).unwrap()).collect();
    let joint = JointLaw::new(Pmf::point(1, 0).unwrap(), CondPmf::new(vec![p_u]).unwrap(), vec![w]).unwrap();
    let tokens = (0..4u32).map(|u| vec![u & 1, u >> 1]).collect();
    BlockJoint::from_joint(2, joint, tokens).unwrap()
}

#[test]
fn hand_computed_tv() {
    let j = two_position_joint();
    let spec = compute_index_sets(&j, 0.5, 0.1).unwrap();
    assert_eq!(spec.message, vec![1]);
    assert_eq!(spec.h_enc, vec![1]);
    // V₂ uniform under the pad, V₁ from P(v₁|v₂): TV = ½(.0667+.0333+.075+.025)
    let keyed = KeySchedule::randomized(&spec, 1);
    for m in [0u8, 1] {
        assert!((block_tv_exact(&j, &keyed, &[m]).unwrap() - 0.1).abs() < 1e-12);
    }
    // no key, m = 0 forces V₂ = 0: P̃ = (2/3, 1/3, 0, 0) against (.4, .2, .3, .1)
    let bare = KeySchedule::randomized(&spec, 0);
    assert!((block_tv_exact(&j, &bare, &[0]).unwrap() - 0.4).abs() < 1e-12);
    assert!((block_tv_exact(&j, &bare, &[1]).unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn sampler_law_equals_restricted_joint() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for len in [1usize, 2, 4, 8] {
        for _ in 0..20 {
            let pv: Vec<f64> = {
                let w: Vec<f64> = (0..1 << len).map(|_| rng.gen::<f64>().powi(3)).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            };
            let mask: u32 = rng.gen::<u32>() & ((1u32 << len) - 1);
            let target: u32 = rng.gen::<u32>() & mask;
            // oracle: direct conditioning
            let z: f64 = (0..pv.len()).filter(|&v| v as u32 & mask == target).map(|v| pv[v]).sum();
            let law = restricted_law(&pv, Constraint { mask, target, priority: 0 }, len);
            let mut tv = 0.0;
            for v in 0..pv.len() {
                let oracle = if v as u32 & mask == target { pv[v] / z } else { 0.0 };
                tv += (sc_path_probability(&law, len, v as u32) - oracle).abs();
            }
            assert!(tv / 2.0 <= 1e-9, "len {len}: tv {tv}");
        }
    }
}

#[test]
fn empirical_sampler_frequencies() {
    let j = two_position_joint();
    let spec = compute_index_sets(&j, 0.5, 0.1).unwrap();
    let schedule = KeySchedule::randomized(&spec, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 40_000;
    let mut hits = [0usize; 4];
    for _ in 0..n {
        hits[sc_encode(&j, &schedule, 0, &[0], &[], &mut rng).unwrap().v as usize] += 1;
    }
    // V₂ = 0: v ∈ {0, 1} with P(v₁|v₂=0) = (2/3, 1/3)
    assert_eq!(hits[2] + hits[3], 0);
    let f = hits[0] as f64 / n as f64;
    assert!((f - 2.0 / 3.0).abs() < 4.0 * (2.0 / 9.0 / n as f64).sqrt());
}

#[test]
fn pre_transform_law_is_a_bijection_image() {
    let src = PairSource::classes(1000, 8, 1, None).unwrap();
    let j = &partition_joints(&src, 1).unwrap()[0];
    for local in 0..j.state_ids().len() {
        let pv = j.v_law(local);
        assert!((pv.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (u, p) in j.joint().p_u_given_s().row(local).iter() {
            assert_eq!(pv[polar_mask(u as u32, 8) as usize], p);
        }
    }
}

fn small_config() -> WatermarkConfig {
    let src: Arc<dyn CoverSource> = Arc::new(PairSource::new(4, 2, 2).unwrap());
    let joints = partition_joints(src.as_ref(), 2).unwrap();
    WatermarkConfig::new(src, joints, 0.5, 0.5).unwrap()
}

#[test]
fn right_key_recovers_and_runs_repeat() {
    let cfg = small_config();
    assert!(cfg.message_len() > 0);
    let a = run_ber(&cfg, 400, 9).unwrap();
    let b = run_ber(&cfg, 400, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.ber < 0.2, "{a:?}");
    assert!(a.wrong_key_ber > a.ber);
}

#[test]
fn embed_is_seed_deterministic() {
    let cfg = small_config();
    let msg = vec![1u8; cfg.message_len()];
    let key = vec![0u8; cfg.key_len()];
    let a = embed(&cfg, &msg, &key, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = embed(&cfg, &msg, &key, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(detect(&cfg, &a.tokens, &key).unwrap().len(), msg.len());
}

#[test]
fn monte_carlo_tv_tracks_exact_tv() {
    let cfg = small_config().with_randomized_keys(0);
    let msg = vec![0u8; cfg.message_len()];
    let exact = induced_tv(&cfg, &msg, TvMode::Exact).unwrap();
    let mc = induced_tv(&cfg, &msg, TvMode::MonteCarlo { trials: 200_000, seed: 2 }).unwrap();
    // plug-in bias over at most 36·4 cells
    assert!((exact - mc).abs() < 0.02, "exact {exact} mc {mc}");
}

#[test]
fn tv_sweep_is_exact_for_small_message_sets() {
    let cfg = small_config();
    let points = tv_sweep(&cfg, &[0, 1, 2], 0).unwrap();
    assert_eq!(points.len(), 3);
    assert!(points.iter().all(|p| p.ci95 == 0.0 && (0.0..=1.0).contains(&p.avg_tv)));
}

#[test]
fn randomized_schedule_pads_message_first() {
    let cfg = small_config();
    let spec = &cfg.specs()[0];
    let s = KeySchedule::randomized(spec, 1);
    let first = spec.message[0];
    assert_eq!(s.roles()[first], Role::Message { index: 0, key: Some(0) });
}
