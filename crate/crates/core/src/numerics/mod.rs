//! Dense tensors and the reverse-mode differentiation tape the model is
//! built on.

mod gemm;
pub mod snapshot;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::max_pool_planes;

/// Clears the gradient buffers of every tensor.
pub fn zero_grads<'a>(tensors: impl IntoIterator<Item = &'a mut Tensor>) {
    for t in tensors {
        t.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_scaling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_window_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv_output_dims_and_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 9, 7]));
        let k = tape.constant(Tensor::zeros(vec![4, 3, 3, 3]));
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 5, 4]);

        let bad = tape.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let err = tape.conv2d(x, bad, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let big = tape.constant(Tensor::zeros(vec![1, 3, 12, 12]));
        assert!(tape.conv2d(x, big, None, 1, 1).is_err());
        assert!(tape.conv2d(x, k, None, 0, 1).is_err());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 4, 2, 2]));
        let y = tape.softmax_channel(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let x = tape.constant(t(&[1, 2, 1, 1], &[2f32.ln(), 0.0]));
        let y = tape.softmax_channel(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-6 && (d[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn max_pool_tie_break_and_singleton() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[0.1, 0.9, 0.3, 0.9]));
        let (y, arg) = tape.spatial_max_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.9]);
        assert_eq!(arg, vec![1]); // (0, 1)

        let x = tape.constant(t(&[1, 1, 1, 1], &[0.42]));
        let (y, arg) = tape.spatial_max_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.42]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn backward_linear_and_square() {
        let x = Tensor::from_fn(vec![2, 3], |i| i as f32).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0; 6]);

        let mut x = t(&[2], &[1.0, -2.0]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        grads.accumulate_into(xv, &mut x).unwrap();
        assert_eq!(x.grad().unwrap(), &[2.0, -4.0]);
        // additive accumulation
        grads.accumulate_into(xv, &mut x).unwrap();
        assert_eq!(x.grad().unwrap(), &[4.0, -8.0]);
        zero_grads([&mut x]);
        assert_eq!(x.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(vec![3]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.relu(xv);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unreached_leaves_get_zero_grads() {
        let a = Tensor::full(vec![2], 1.0).with_grad();
        let b = Tensor::full(vec![2], 1.0).with_grad();
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let s = tape.sum(av);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(bv).unwrap(), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 5 * 6)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, 5, 2, 3], vals).unwrap());
            let y = tape.softmax_channel(x).unwrap();
            let d = tape.value(y).data();
            for loc in 0..6 {
                let s: f64 = (0..5).map(|c| d[c * 6 + loc] as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for c in 0..5 {
                    prop_assert!(d[c * 6 + loc] >= 0.0 && d[c * 6 + loc] <= 1.0);
                }
            }
        }

        #[test]
        fn max_pool_matches_scan(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let vals: Vec<f32> = (0..2 * h * w)
                .map(|i| (((i as u64 + 1).wrapping_mul(seed | 1) >> 7) % 1000) as f32 / 1000.0)
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, 2, h, w], vals.clone()).unwrap());
            let (y, arg) = tape.spatial_max_pool(x).unwrap();
            for p in 0..2 {
                let plane = &vals[p * h * w..(p + 1) * h * w];
                let mut best = f32::NEG_INFINITY;
                let mut first = 0;
                for (j, &v) in plane.iter().enumerate() {
                    if v > best { best = v; first = j; }
                }
                prop_assert_eq!(tape.value(y).data()[p], best);
                prop_assert_eq!(arg[p], first);
            }
        }
    }
}
