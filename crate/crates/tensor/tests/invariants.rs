use nmt_tensor::{layer_norm, softmax, Tensor};
use proptest::prelude::*;

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..6, 1..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        (Just(shape), prop::collection::vec(-50.0f64..50.0, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_are_distributions((shape, data) in shape_and_data(), axis_pick in 0usize..3) {
        let axis = axis_pick % shape.len();
        let x = Tensor::from_vec(&shape, data).unwrap();
        let y = softmax(&x, axis).unwrap();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| y.data()[o * len * inner + j * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn layer_norm_rows_are_standardized((shape, data) in shape_and_data()) {
        let d = *shape.last().unwrap();
        prop_assume!(d >= 2);
        let x = Tensor::from_vec(&shape, data).unwrap();
        let eps = 1e-5;
        let y = layer_norm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), eps).unwrap();
        for r in 0..x.len() / d {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            prop_assume!(var > 1e-3);
            let out = y.row(r);
            let mean = out.iter().sum::<f64>() / d as f64;
            let ovar = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-6);
            // normalized variance is var / (var + eps)
            prop_assert!((ovar - 1.0).abs() <= eps / var + 1e-9);
        }
    }
}
