//! Dense tensors, a per-batch differentiation tape, and the MLP classifier.

mod kernels;
mod mlp;
mod tape;
mod tensor;

pub use kernels::argmax;
pub use mlp::{sgd_step, Activation, Layer, Mlp, Sgd, DEFAULT_HIDDEN};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use crate::error::Result;

/// Row-wise softmax of `scores / temperature`.
pub fn softmax(scores: &Tensor, temperature: f64) -> Result<Tensor> {
    let (r, c) = scores.dims2()?;
    let p = kernels::softmax_rows(scores.data(), c, temperature)?;
    Tensor::matrix(r, c, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng;
    use rand::Rng as _;

    fn layer(w: Vec<Vec<f64>>, b: Vec<f64>) -> Layer {
        let n = b.len();
        Layer { weight: Tensor::from_rows(&w).unwrap(), bias: Tensor::new(vec![n], b).unwrap() }
    }

    fn matmul(a: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                (0..w.len())
                    .map(|o| {
                        let mut s = b[o];
                        for k in 0..row.len() {
                            s += row[k] * w[o][k];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_model_gives_zero_scores() {
        let m = Mlp::from_layers(vec![layer(vec![vec![0.0; 3]; 2], vec![0.0; 2])], Activation::Relu).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let s = m.forward(&x).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let m = Mlp::from_layers(
            vec![layer(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], vec![0.0; 3])],
            Activation::Relu,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -1.5, 2.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn seeded_forward_matches_nested_loop_chain() {
        let m = Mlp::new(4, &[5, 3], 2, Activation::Relu, 7).unwrap();
        let mut r = rng::seeded(3);
        let x: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let mut h = x.clone();
        let n = m.layers().len();
        for (i, l) in m.layers().iter().enumerate() {
            let w: Vec<Vec<f64>> = l.weight.rows().map(<[f64]>::to_vec).collect();
            h = matmul(&h, &w, l.bias.data());
            if i + 1 < n {
                h.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
            }
        }
        let got = m.forward(&Tensor::from_rows(&x).unwrap()).unwrap();
        for (g, e) in got.data().iter().zip(h.iter().flatten()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Mlp::new(4, &[3], 2, Activation::Relu, 1).unwrap();
        let x = Tensor::zeros(vec![2, 5]);
        let err = m.forward(&x).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(err.to_string().contains("[2, 5]"));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let p = softmax(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);

        let p = softmax(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 0.001).unwrap();
        assert!(p.data()[0] >= 1.0 - 1e-9);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(softmax(&s, 0.0).is_err());
        assert!(softmax(&s, -1.0).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut m = Mlp::new(3, &[4], 2, Activation::Relu, 2).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let _ = m.forward_tape(&mut tape, &x).unwrap();
        let c = tape.constant_scalar(3.0);
        tape.backward(c, &mut m).unwrap();
        assert!(m.flat_grads().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_squared_error_gradient_is_twice_err_times_input() {
        let mut m = Mlp::from_layers(
            vec![layer(vec![vec![0.5, -1.0], vec![2.0, 0.25]], vec![0.1, -0.2])],
            Activation::Identity,
        )
        .unwrap();
        let x = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, -2.0]];
        let y = vec![0.3, -0.7, 1.0, 0.0, -2.0, 0.5];
        let mut tape = Tape::new();
        let out = m.forward_tape(&mut tape, &Tensor::from_rows(&x).unwrap()).unwrap();
        let pred = tape.value(out).to_vec();
        let loss = tape.squared_error(out, &y).unwrap();
        tape.backward(loss, &mut m).unwrap();

        // dW[o][k] = Σ_i 2·err[i][o]·x[i][k], db[o] = Σ_i 2·err[i][o]
        let err: Vec<f64> = pred.iter().zip(&y).map(|(p, t)| p - t).collect();
        let l = &m.layers()[0];
        let gw = l.weight.grad().unwrap();
        let gb = l.bias.grad().unwrap();
        for o in 0..2 {
            let mut eb = 0.0;
            for k in 0..2 {
                let mut e = 0.0;
                for i in 0..3 {
                    e += 2.0 * err[i * 2 + o] * x[i][k];
                }
                assert!((gw[o * 2 + k] - e).abs() < 1e-12);
            }
            for i in 0..3 {
                eb += 2.0 * err[i * 2 + o];
            }
            assert!((gb[o] - eb).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_after_softmax_gradient_is_probs_minus_onehot() {
        // Single identity-activation layer: d(mean CE)/d(score) = (p − y)/B.
        let mut m = Mlp::new(3, &[], 4, Activation::Identity, 9).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 1.0], vec![1.5, 0.3, -0.7]]).unwrap();
        let labels = [2usize, 0];
        let mut tape = Tape::new();
        let s = m.forward_tape(&mut tape, &x).unwrap();
        let p = tape.softmax(s, 1.0).unwrap();
        let probs = tape.value(p).to_vec();
        let targets = crate::losses::SoftTargets::onehot(&labels, 4).unwrap();
        let loss = tape.target_ce(p, targets).unwrap();
        tape.backward(loss, &mut m).unwrap();
        let gb = m.layers()[0].bias.grad().unwrap().to_vec();
        for c in 0..4 {
            let mut e = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                e += (probs[i * 4 + c] - if y == c { 1.0 } else { 0.0 }) / 2.0;
            }
            assert!((gb[c] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut m = Mlp::new(2, &[2], 2, Activation::Relu, 1).unwrap();
        let mut tape = Tape::new();
        let s = m.forward_tape(&mut tape, &Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        let l = tape.squared_error(s, &[0.0, 0.0]).unwrap();
        tape.backward(l, &mut m).unwrap();
        assert!(matches!(tape.backward(l, &mut m), Err(Error::TapeConsumed)));
    }

    fn with_grad(m: &mut Mlp, g: f64) {
        let n = m.parameter_count();
        let mut tape = Tape::new();
        let c = tape.constant_scalar(0.0);
        tape.backward(c, m).unwrap();
        // overwrite the zero buffers with a constant gradient
        for l in m.layers_mut() {
            for t in [&mut l.weight, &mut l.bias] {
                t.clear_grad();
                t.accumulate_grad(&vec![g; t.len()]).unwrap();
            }
        }
        assert_eq!(m.flat_grads().unwrap().len(), n);
    }

    #[test]
    fn sgd_zero_lr_leaves_parameters() {
        let mut m = Mlp::new(3, &[2], 2, Activation::Relu, 4).unwrap();
        let before = m.flat_params();
        with_grad(&mut m, 0.7);
        sgd_step(&mut m, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(m.flat_params(), before);
        assert!(m.flat_grads().is_none());
    }

    #[test]
    fn sgd_plain_step() {
        let mut m = Mlp::new(3, &[2], 2, Activation::Relu, 4).unwrap();
        let before = m.flat_params();
        with_grad(&mut m, 0.5);
        sgd_step(&mut m, 0.1, 0.0, 0.0).unwrap();
        for (a, b) in m.flat_params().iter().zip(&before) {
            assert_eq!(*a, b - 0.1 * 0.5);
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut m = Mlp::new(3, &[2], 2, Activation::Relu, 4).unwrap();
        let before = m.flat_params();
        let mut opt = Sgd::new(0.9, 0.0).unwrap();
        for _ in 0..2 {
            with_grad(&mut m, 0.3);
            opt.step(&mut m, 0.05).unwrap();
        }
        for (a, b) in m.flat_params().iter().zip(&before) {
            let expected = b - 0.05 * 0.3 * (1.0 + 1.9);
            assert!((a - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_requires_gradients() {
        let mut m = Mlp::new(3, &[2], 2, Activation::Relu, 4).unwrap();
        assert!(matches!(sgd_step(&mut m, 0.1, 0.9, 0.0), Err(Error::MissingGradient { layer: 0 })));
    }
}
