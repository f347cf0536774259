use deepid::weights::{decode_weights, encode_weights};
use deepid::{ParamStore, Tensor};
use proptest::prelude::*;

fn store() -> impl Strategy<Value = ParamStore> {
    let tensor = prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e3f32..1e3, n).prop_map(move |v| Tensor::from_vec(&shape, v.into_iter().map(f64::from).collect()).unwrap())
    });
    prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", tensor, 0..6)
}

proptest! {
    #[test]
    fn f32_representable_tensors_round_trip(s in store()) {
        let bytes = encode_weights(&s);
        prop_assert_eq!(decode_weights(&bytes).unwrap(), s.clone());
        prop_assert_eq!(encode_weights(&decode_weights(&bytes).unwrap()), bytes);
    }

    #[test]
    fn truncation_is_rejected(s in store(), cut in 1usize..64) {
        let bytes = encode_weights(&s);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_weights(&bytes[..keep]).is_err());
    }
}
