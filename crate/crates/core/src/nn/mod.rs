//! Minimal differentiable toolkit: dense, recurrent and 1x1-convolution
//! layers on a reverse-mode tape, the two training losses, Adam, and the
//! checkpoint container.

pub mod container;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tape;

pub use container::Container;
pub use layers::{Conv1x1, Dense, GruCell};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParameterStore};
pub use tape::{Backward, Tape, Var};

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_input, check_params};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_dense_gives_zero_output() {
        let mut store = ParameterStore::new();
        store.add_zeros("d.w", vec![3, 4]).unwrap();
        store.add_zeros("d.b", vec![3]).unwrap();
        let d = Dense::bind(&store, "d").unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let y = d.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[0.0; 3]);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut store = ParameterStore::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        store.add("d.w", vec![3, 3], eye).unwrap();
        store.add_zeros("d.b", vec![3]).unwrap();
        let d = Dense::bind(&store, "d").unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.25, -1.0, 7.0]).unwrap();
        let y = d.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[0.25, -1.0, 7.0]);
    }

    #[test]
    fn saturated_update_gate_keeps_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        // Large update-gate bias drives z -> 1, so h' -> h.
        for v in &mut store.get_mut(cell.b_ih).data[4..8] {
            *v = 40.0;
        }
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.3, -0.7, 1.1]).unwrap();
        let h0 = vec![0.5, -0.25, 0.75, 0.1];
        let h = tape.input(h0.clone()).unwrap();
        let h1 = cell.step(&mut tape, x, h).unwrap();
        for (a, b) in tape.value(h1).iter().zip(&h0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_square_loss_closed_form() {
        // L = |Wx - t|^2 via nll with unit variance and a single "joint".
        let mut store = ParameterStore::new();
        store.add("d.w", vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, 1.0, 1.0]).unwrap();
        store.add_zeros("d.b", vec![3]).unwrap();
        let d = Dense::bind(&store, "d").unwrap();
        let x = [0.4, -0.6];
        let t = vec![0.1, 0.2, 0.3];
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.to_vec()).unwrap();
        let y = d.forward(&mut tape, xv).unwrap();
        let lv = tape.constant(vec![0.0]);
        let l = tape.nll(y, lv, t.clone());
        let g = tape.backward_scalar(l).unwrap();
        let wx = tape.value(y).to_vec();
        for r in 0..3 {
            for c in 0..2 {
                let expected = 2.0 * (wx[r] - t[r]) * x[c];
                assert!((g.params.get(d.w)[r * 2 + c] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let d = Dense::new(&mut store, "d", 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, 2.0]).unwrap();
        let _ = d.forward(&mut tape, x).unwrap();
        let c = tape.constant(vec![3.0]);
        let g = tape.backward_scalar(c).unwrap();
        assert!(g.params.is_zero());
    }

    #[test]
    fn composed_model_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        let d = Dense::new(&mut store, "d", 4, 6, &mut rng).unwrap();
        let u = Dense::new(&mut store, "u", 4, 2, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 3)).collect();
        let target = random_vec(&mut rng, 6);

        let run = |store: &ParameterStore| -> (f64, Gradients) {
            let mut tape = Tape::new(store);
            let inputs: Vec<Var> = xs.iter().map(|x| tape.input(x.clone()).unwrap()).collect();
            let h = cell.encode(&mut tape, &inputs).unwrap();
            let e = tape.elu(h);
            let y = d.forward(&mut tape, e).unwrap();
            let lv = u.forward(&mut tape, h).unwrap();
            let l = tape.nll(y, lv, target.clone());
            let g = tape.backward_scalar(l).unwrap();
            (tape.value(l)[0], g.params)
        };
        let (_, analytic) = run(&store);
        let report = check_params(&mut store, &analytic, |s| run(s).0, EPS, 50, &mut rng);
        assert!(report.max_rel_error < TOL, "{report:?}");
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        let conv = Conv1x1::new(&mut store, "c", 2, 3, &mut rng).unwrap();
        let x0 = random_vec(&mut rng, 2 * 5);
        let target: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..1.0)).collect();
        let run = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new(&store);
            let xv = tape.input(x.to_vec()).unwrap();
            let y = conv.forward(&mut tape, xv).unwrap();
            let p = tape.sigmoid(y);
            let l = tape.weighted_bce(p, target.clone(), 4.0);
            let g = tape.backward_scalar(l).unwrap();
            (tape.value(l)[0], g.wrt(xv).to_vec())
        };
        let (_, analytic) = run(&x0);
        let report = check_input(&x0, &analytic, |x| run(x).0, EPS);
        assert!(report.max_rel_error < TOL, "{report:?}");
    }

    #[test]
    fn forward_is_deterministic_and_rejects_non_finite_input() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        assert!(tape.input(vec![f64::INFINITY]).is_err());
    }
}
