//! The sparse engine against the masked-dense reference on random trees.

mod common;

use std::sync::Arc;

use common::compare;
use dendrite::models::stream_rng;
use dendrite::sparse::{pack, unpack, CompiledTree};
use dendrite::tensor::Tensor;
use dendrite::tree::density_gain_init;
use dendrite::TreePlan;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (prop::sample::select(vec![2usize, 4, 16, 32]), 1usize..=11, 1usize..=3, 1usize..=4, any::<u64>())
        .prop_filter("at most 2048 leaves", |&(b, d, o, _, _)| b.pow(d as u32) * o <= 2048)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn f32_backends_agree(c in config()) {
        let d = compare::<f32>(c);
        prop_assert!(d <= 1e-6, "max |diff| {d:e} for {c:?}");
    }

    #[test]
    fn pack_unpack_round_trip((b, depth, outputs, _batch, seed) in config()) {
        let plan = TreePlan::repeated(b.pow(depth as u32), outputs, b).unwrap();
        let params = density_gain_init::<f32, _>(&plan, &mut stream_rng(seed, 1));
        let packed = pack(&plan, &params).unwrap();
        prop_assert_eq!(packed.iter().map(|l| l.weights.len()).sum::<usize>(), plan.weight_count());
        prop_assert_eq!(unpack(&plan, &packed).unwrap(), params);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn f64_backends_agree(c in config()) {
        let d = compare::<f64>(c);
        prop_assert!(d <= 1e-12, "max |diff| {d:e} for {c:?}");
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let c = (4, 3, 2, 3, 17);
    assert_eq!(compare::<f32>(c), compare::<f32>(c));
    let plan = Arc::new(TreePlan::new(64, 1, 4).unwrap());
    let params = density_gain_init::<f32, _>(&plan, &mut stream_rng(1, 1));
    let mut t = CompiledTree::compile(Arc::clone(&plan), &params, 0.1).unwrap();
    let x = Tensor::new((0..128).map(|i| (i as f32).sin()).collect(), &[2, 64]).unwrap();
    let a = t.forward(&x).unwrap().to_vec();
    let b = t.forward(&x).unwrap().to_vec();
    assert_eq!(a, b);
}
