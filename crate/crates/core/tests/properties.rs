mod common;

use common::sse_layer;
use proptest::prelude::*;
use slotset_core::{
    random_partition, relative_discrepancy, split_rows, AggMode, AggregateState, DeepSets, EncoderStack, Matrix, PartialEncoding, Rng, SetEncoder, SlotConfig,
    SlotSample, SlotSetEncoder, SseParams, SseShape,
};

fn mode() -> impl Strategy<Value = AggMode> {
    prop_oneof![Just(AggMode::Sum), Just(AggMode::Mean), Just(AggMode::Max), Just(AggMode::Min)]
}

fn bits(m: &Matrix<f64>) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn assert_consistent(mode: AggMode, got: &Matrix<f64>, want: &Matrix<f64>) -> Result<(), TestCaseError> {
    if mode.is_exact() {
        prop_assert_eq!(bits(got), bits(want));
    } else {
        let r = relative_discrepancy(got, want);
        prop_assert!(r <= 1e-9, "relative discrepancy {}", r);
    }
    Ok(())
}

fn params(seed: u64, d: usize, k: usize, random_slots: bool) -> SseParams<f64> {
    SseParams::init(
        &mut Rng::new(seed),
        SseShape {
            d,
            h: 6,
            d_hat: 5,
            k,
            random_slots,
            bias: seed % 2 == 0,
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_partition_matches_the_full_pass(seed in any::<u64>(), n in 1usize..80, d in 1usize..6, k in 1usize..9, mode in mode(), p_frac in 0.0f64..1.0) {
        let params = params(seed, d, k, true);
        let mut rng = Rng::new(seed ^ 1);
        let x: Matrix<f64> = rng.standard_normals(n, d);
        let p = 1 + ((n - 1) as f64 * p_frac) as usize;
        let parts = split_rows(&x, &random_partition(n, p, &mut rng));
        let full = slotset_core::encode_full(&x, &params, mode, seed).unwrap();
        let streamed = slotset_core::encode_partitioned(&parts, &params, mode, seed).unwrap();
        assert_consistent(mode, &streamed, &full)?;
    }

    #[test]
    fn batch_order_does_not_matter(seed in any::<u64>(), n in 2usize..60, mode in mode()) {
        let params = params(seed, 3, 4, true);
        let mut rng = Rng::new(seed);
        let x: Matrix<f64> = rng.standard_normals(n, 3);
        let mut parts = split_rows(&x, &random_partition(n, 1 + n / 3, &mut rng));
        let a = slotset_core::encode_partitioned(&parts, &params, mode, 7).unwrap();
        parts.reverse();
        let b = slotset_core::encode_partitioned(&parts, &params, mode, 7).unwrap();
        assert_consistent(mode, &a, &b)?;
    }

    #[test]
    fn element_order_does_not_matter(seed in any::<u64>(), n in 1usize..60, mode in mode()) {
        let params = params(seed, 4, 3, true);
        let mut rng = Rng::new(seed);
        let x: Matrix<f64> = rng.standard_normals(n, 4);
        let perm = rng.permutation(n);
        let a = slotset_core::encode_full(&x, &params, mode, 3).unwrap();
        let b = slotset_core::encode_full(&x.select_rows(&perm), &params, mode, 3).unwrap();
        assert_consistent(mode, &b, &a)?;
    }

    #[test]
    fn permuting_slots_permutes_rows_bitwise(seed in any::<u64>(), n in 1usize..40, k in 1usize..10, mode in mode()) {
        let params = params(seed, 3, k, false);
        let SlotConfig::Deterministic { slots } = &params.slots else { unreachable!() };
        let mut rng = Rng::new(seed);
        let x: Matrix<f64> = rng.standard_normals(n, 3);
        let perm = rng.permutation(k);
        let base = SlotSetEncoder::new(&params, SlotSample { slots: slots.clone(), seed: None }).unwrap().encode_full(&x, mode).unwrap();
        let moved = SlotSetEncoder::new(&params, SlotSample { slots: slots.select_rows(&perm), seed: None }).unwrap().encode_full(&x, mode).unwrap();
        prop_assert_eq!(bits(&moved), bits(&base.select_rows(&perm)));
    }

    #[test]
    fn single_slot_sum_is_column_sum_of_values(seed in any::<u64>(), n in 1usize..50) {
        let params = params(seed, 3, 1, true);
        let x: Matrix<f64> = Rng::new(seed).standard_normals(n, 3);
        let got = slotset_core::encode_full(&x, &params, AggMode::Sum, seed).unwrap();
        let want = params.proj_v.apply(&x).unwrap().column_sums();
        prop_assert_eq!(bits(&got), bits(&want));
    }

    #[test]
    fn state_merge_is_associative_and_commutative(seed in any::<u64>(), mode in mode()) {
        let mut rng = Rng::new(seed);
        let part = |rng: &mut Rng| PartialEncoding { values: rng.standard_normals::<f64>(3, 2), count: 1 + rng.below(5) };
        let (a, b, c) = (part(&mut rng), part(&mut rng), part(&mut rng));
        let s = |p: &PartialEncoding<f64>| AggregateState::init(mode, 3, 2).merge(p).unwrap();
        let left = s(&a).merge_states(&s(&b)).unwrap().merge_states(&s(&c)).unwrap();
        let right = s(&a).merge_states(&s(&b).merge_states(&s(&c)).unwrap()).unwrap();
        let swapped = s(&b).merge_states(&s(&a)).unwrap();
        let forward = s(&a).merge_states(&s(&b)).unwrap();
        prop_assert_eq!(left.count(), right.count());
        prop_assert_eq!(swapped.count(), forward.count());
        assert_consistent(mode, left.partial(), right.partial())?;
        assert_consistent(mode, swapped.partial(), forward.partial())?;
        // The identity state is neutral.
        let with_identity = AggregateState::init(mode, 3, 2).merge_states(&left).unwrap();
        prop_assert_eq!(bits(with_identity.partial()), bits(left.partial()));
    }

    #[test]
    fn stacks_and_deepsets_are_consistent(seed in any::<u64>(), n in 1usize..60, mode in mode()) {
        let mut rng = Rng::new(seed);
        let stack = SetEncoder::Sse(EncoderStack::new(vec![
            sse_layer(&mut rng, 3, 6, 4, 5, true, true, mode),
            sse_layer(&mut rng, 4, 8, 3, 1, true, false, AggMode::Sum),
        ]).unwrap());
        let ds = SetEncoder::DeepSets(DeepSets::init(&mut rng, 3, 6, 2, mode));
        let x: Matrix<f64> = rng.standard_normals(n, 3);
        let parts = split_rows(&x, &random_partition(n, 1 + rng.below(n), &mut rng));
        for enc in [stack, ds] {
            let full = enc.encode_full(&x, seed).unwrap();
            let streamed = enc.encode_partitioned(&parts, seed).unwrap();
            assert_consistent(mode, &streamed, &full)?;
        }
    }
}

#[test]
fn single_precision_instantiation_is_consistent() {
    let params: SseParams<f32> = SseParams::init(
        &mut Rng::new(5),
        SseShape {
            d: 4,
            h: 8,
            d_hat: 3,
            k: 6,
            random_slots: true,
            bias: true,
        },
    )
    .unwrap();
    let mut rng = Rng::new(6);
    let x: Matrix<f32> = rng.standard_normals(200, 4);
    let parts = split_rows(&x, &random_partition(200, 17, &mut rng));
    for mode in AggMode::ALL {
        let full = slotset_core::encode_full(&x, &params, mode, 1).unwrap();
        let streamed = slotset_core::encode_partitioned(&parts, &params, mode, 1).unwrap();
        let r = relative_discrepancy(&streamed, &full);
        if mode.is_exact() {
            assert_eq!(streamed, full);
        } else {
            assert!(r <= 1e-5, "{mode}: {r}");
        }
    }
}

#[test]
fn parallel_merge_matches_sequential() {
    let params = params(3, 5, 7, true);
    let mut rng = Rng::new(8);
    let x: Matrix<f64> = rng.standard_normals(500, 5);
    let parts = split_rows(&x, &random_partition(500, 40, &mut rng));
    let enc = SlotSetEncoder::seeded(&params, 2).unwrap();
    for mode in AggMode::ALL {
        let seq = enc.encode_batches(parts.iter(), mode).unwrap();
        let par = enc.encode_batches_parallel(&parts, mode).unwrap();
        if mode.is_exact() {
            assert_eq!(bits(&par), bits(&seq));
        } else {
            assert!(relative_discrepancy(&par, &seq) <= 1e-12);
        }
    }
}
