use mlab_tensor::{ops, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, vals in prop::collection::vec(-50.0f32..50.0, 1..40)) {
        let cols = vals.len();
        let data: Vec<f32> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r as f32 + 1.0))).collect();
        let x = Tensor::from_vec(&[rows, cols], data).unwrap();
        let y = ops::softmax(&x, 1).unwrap();
        for row in y.data().chunks(cols) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6 * cols as f32 + 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn adding_zero_is_bit_identical(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..32)) {
        let x = Tensor::from_vec(&[vals.len()], vals).unwrap();
        let zero = Tensor::scalar(0.0f32);
        let y = ops::elementwise(ops::Elementwise::Add, &[&x, &zero]).unwrap();
        // -0.0 + 0.0 is +0.0; compare by value and bit pattern otherwise.
        for (a, b) in x.data().iter().zip(y.data()) {
            prop_assert!(a == b && (a.to_bits() == b.to_bits() || *a == 0.0));
        }
    }
}
