//! Property tests for the numeric invariants that must hold for arbitrary
//! finite inputs.

use f3lab::purify::f3_scale;
use f3lab::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, len)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_along_axis(data in finite_vec(12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row sum {}", s);
        }
    }

    #[test]
    fn clamp_output_is_always_inside_bounds(data in finite_vec(8), lo in -2.0f64..0.0, width in 0.0f64..3.0) {
        let hi = lo + width;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[8], data).unwrap());
        let y = tape.clamp(x, lo, hi).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn f3_scale_range_is_zero_to_beta(data in finite_vec(16), beta in 0.0f64..0.5) {
        let g = Tensor::new(&[16], data).unwrap();
        let m = f3_scale(&g, beta);
        prop_assert!(m.data().iter().all(|&v| v >= 0.0 && v <= beta + 1e-15));
    }

    #[test]
    fn sign_matches_zero_convention(data in finite_vec(8)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[8], data.clone()).unwrap());
        let y = tape.sign(x).unwrap();
        for (&input, &out) in data.iter().zip(tape.value(y).data()) {
            let expected = if input > 0.0 { 1.0 } else if input < 0.0 { -1.0 } else { 0.0 };
            prop_assert_eq!(out, expected);
        }
    }

    #[test]
    fn dataset_roundtrip_through_bytes(n in 1usize..6, seed in 0u64..500) {
        let d = f3lab::data::generate(n, seed, f3lab::data::DEFAULT_MIX, f3lab::data::Split::Eval).unwrap();
        let bytes = d.save_to_bytes().unwrap();
        let loaded = f3lab::data::Dataset::load_from_bytes(&bytes).unwrap();
        prop_assert_eq!(d, loaded);
    }
}
