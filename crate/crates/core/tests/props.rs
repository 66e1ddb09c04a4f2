use covertmark_core::polar::{mask_to_bits, otp, polar_mask, polar_transform};
use covertmark_core::prob::{
    conditional_entropy, entropy, kl_divergence, mutual_information, tv_distance, CondPmf, JointLaw, Pmf, Var,
};
use proptest::prelude::*;

fn pmf_strategy(n: usize) -> impl Strategy<Value = Pmf> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        Pmf::from_probs(&w.iter().map(|x| x / s).collect::<Vec<_>>()).unwrap()
    })
}

fn joint_strategy() -> impl Strategy<Value = JointLaw> {
    (1usize..4, 1usize..4, 1usize..5).prop_flat_map(|(s, u, x)| {
        (
            pmf_strategy(s),
            prop::collection::vec(pmf_strategy(u), s),
            prop::collection::vec(prop::collection::vec(pmf_strategy(x), u), s),
        )
            .prop_map(|(p_s, rows, w)| JointLaw::new(p_s, CondPmf::new(rows).unwrap(), w).unwrap())
    })
}

/// Dense `P(u, x)` from the factorized joint.
fn dense_ux(j: &JointLaw) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; j.x_size()]; j.u_size()];
    j.for_each_triple(|_, u, x, p| out[u][x] += p);
    out
}

proptest! {
    #[test]
    fn tv_is_a_bounded_metric(p in pmf_strategy(5), q in pmf_strategy(5), r in pmf_strategy(5)) {
        let pq = tv_distance(&p, &q).unwrap();
        prop_assert!((pq - tv_distance(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!(tv_distance(&p, &p).unwrap() == 0.0);
        prop_assert!(pq <= tv_distance(&p, &r).unwrap() + tv_distance(&r, &q).unwrap() + 1e-12);
    }

    #[test]
    fn pinsker_bound(p in pmf_strategy(6), q in pmf_strategy(6)) {
        let tv = tv_distance(&p, &q).unwrap();
        let kl_nats = kl_divergence(&p, &q).unwrap() * std::f64::consts::LN_2;
        prop_assert!(tv <= (kl_nats / 2.0).sqrt() + 1e-12);
    }

    #[test]
    fn mutual_information_three_ways(j in joint_strategy()) {
        let api = mutual_information(&j, &[Var::U], &[Var::X]);
        let ux = dense_ux(&j);
        let pu: Vec<f64> = ux.iter().map(|r| r.iter().sum()).collect();
        let px: Vec<f64> = (0..j.x_size()).map(|x| ux.iter().map(|r| r[x]).sum()).collect();
        let h = |v: &[f64]| -> f64 { v.iter().filter(|&&p| p > 0.0).map(|p| -p * p.log2()).sum() };
        let flat: Vec<f64> = ux.iter().flatten().copied().collect();
        let by_entropies = h(&pu) + h(&px) - h(&flat);
        let by_conditional = h(&pu) - conditional_entropy(&j, &[Var::U], &[Var::X]);
        let mut by_kl = 0.0;
        for (u, row) in ux.iter().enumerate() {
            for (x, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    by_kl += p * (p / (pu[u] * px[x])).log2();
                }
            }
        }
        prop_assert!((api - by_entropies).abs() < 1e-9);
        prop_assert!((api - by_conditional).abs() < 1e-9);
        prop_assert!((api - by_kl).abs() < 1e-9);
        prop_assert!(api >= -1e-12);
        prop_assert!(api <= entropy(&Pmf::from_probs(&pu).unwrap()) + 1e-12);
    }

    #[test]
    fn polar_transform_is_an_involution(p in 0usize..=10, seed in any::<u64>()) {
        let len = 1usize << p;
        let v: Vec<u8> = (0..len).map(|i| ((seed.rotate_left(i as u32 % 64) ^ (i as u64 * 0x9e37)) & 1) as u8).collect();
        prop_assert_eq!(polar_transform(&polar_transform(&v).unwrap()).unwrap(), v);
    }

    #[test]
    fn packed_transform_is_an_involution(p in 0usize..=4, v in any::<u32>()) {
        let len = 1usize << p;
        let v = if len == 32 { v } else { v & ((1 << len) - 1) };
        prop_assert_eq!(polar_mask(polar_mask(v, len), len), v);
        prop_assert_eq!(mask_to_bits(v, len).len(), len);
    }

    #[test]
    fn otp_is_an_involution(bits in prop::collection::vec(0u8..2, 0..64), seed in any::<u64>()) {
        let key: Vec<u8> = (0..bits.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        prop_assert_eq!(otp(&otp(&bits, &key).unwrap(), &key).unwrap(), bits);
    }
}
