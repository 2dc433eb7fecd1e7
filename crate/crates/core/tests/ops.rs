mod common;

use graphfi_core::tensor::{bit_flip_element, linear_index, unravel_index, zero_like, DType};
use graphfi_core::OpKind;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_agree_with_reference(kind in prop::sample::select(OpKind::ALL.to_vec()), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::op_case(kind, &mut rng).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn double_flip_restores(seed in any::<u64>(), dtype in prop::sample::select(vec![DType::F32, DType::F64, DType::I64]), rank in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = common::random_shape(&mut rng, rank, 5);
        let t = common::random_f(&mut rng, dtype, &shape);
        for elem in 0..t.len() {
            for bit in [0, dtype.bit_width() / 2, dtype.bit_width() - 1] {
                let once = bit_flip_element(&t, elem, bit).unwrap();
                prop_assert_ne!(once.element_bits(elem).unwrap(), t.element_bits(elem).unwrap());
                prop_assert_eq!(bit_flip_element(&once, elem, bit).unwrap(), t.clone());
            }
        }
        let z = zero_like(&t);
        prop_assert_eq!(z.shape(), t.shape());
        prop_assert!(common::values(&z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn index_mapping_round_trips(shape in prop::collection::vec(1usize..6, 0..5), pick in any::<prop::sample::Index>()) {
        let n: usize = shape.iter().product();
        let i = pick.index(n);
        let coords = unravel_index(&shape, i);
        prop_assert_eq!(linear_index(&shape, &coords), Some(i));
    }
}

#[test]
fn out_of_range_flips_are_errors() {
    let t = graphfi_core::Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(bit_flip_element(&t, 2, 0).is_err());
    assert!(bit_flip_element(&t, 0, 32).is_err());
}
