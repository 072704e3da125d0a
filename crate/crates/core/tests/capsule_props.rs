mod support;

use dcaps::capsule::{
    capsule_average_pool, capsule_average_pool_var, conv_capsule_grid, dynamic_route, squash, CapsuleGrid,
    ConvCapsuleSpec, RoutingState,
};
use dcaps::numerics::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn grid_dims() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..5, 1usize..5, 1usize..4, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cap_ignores_spatial_order((h, w, n, a, seed) in grid_dims(), perm_seed in any::<u64>()) {
        let t = random(&[h, w, n, a], seed, 3.0);
        let mut cells: Vec<usize> = (0..h * w).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.gen_range(0..=i));
        }
        let block = n * a;
        let mut shuffled = Vec::with_capacity(t.numel());
        for &c in &cells {
            shuffled.extend_from_slice(&t.data()[c * block..(c + 1) * block]);
        }
        let a_grid = CapsuleGrid::new(t.clone()).unwrap();
        let b_grid = CapsuleGrid::new(Tensor::new(vec![h, w, n, a], shuffled).unwrap()).unwrap();
        prop_assert_eq!(capsule_average_pool(&a_grid), capsule_average_pool(&b_grid));
    }

    #[test]
    fn cap_is_linear((h, w, n, a, seed) in grid_dims(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let x = random(&[h, w, n, a], seed, 2.0);
        let y = random(&[h, w, n, a], seed ^ 0x5555, 2.0);
        let mix = Tensor::new(
            vec![h, w, n, a],
            x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + beta * q).collect(),
        ).unwrap();
        let px = capsule_average_pool(&CapsuleGrid::new(x).unwrap());
        let py = capsule_average_pool(&CapsuleGrid::new(y).unwrap());
        let pm = capsule_average_pool(&CapsuleGrid::new(mix).unwrap());
        for i in 0..n {
            for k in 0..a {
                let want = alpha * px[i][k] + beta * py[i][k];
                prop_assert!((pm[i][k] - want).abs() <= 1e-12, "{} vs {}", pm[i][k], want);
            }
        }
    }

    #[test]
    fn cap_on_tape_matches_reference((h, w, n, a, seed) in grid_dims()) {
        let t = random(&[1, h, w, n, a], seed, 2.0);
        let tape = Tape::new();
        let got = capsule_average_pool_var(tape.constant(t.clone())).unwrap().value();
        let want = capsule_average_pool(&CapsuleGrid::new(t.index_first(0).unwrap()).unwrap()).concat();
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn squash_bounds_length_and_keeps_direction(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let s = squash(&v);
        let n_in: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n_out: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n_out < 1.0);
        prop_assert!((n_out - n_in * n_in / (1.0 + n_in * n_in)).abs() < 1e-12);
        if n_in > 1e-6 {
            for (a, b) in v.iter().zip(&s) {
                prop_assert!((a / n_in - b / n_out).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn couplings_sum_to_one_every_iteration(
        n in 1usize..4, s in 1usize..6, o in 1usize..5, a in 1usize..5, r in 1usize..6, seed in any::<u64>()
    ) {
        let tape = Tape::new();
        let u = tape.constant(random(&[n, s, o, a], seed, 2.0));
        let mut trace: Vec<RoutingState<f64>> = Vec::new();
        dynamic_route(u, r, None, Some(&mut trace)).unwrap();
        prop_assert_eq!(trace.len(), r);
        for state in &trace {
            for row in state.couplings.data().chunks(o) {
                let total: f64 = row.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12, "{}", total);
            }
        }
    }

    #[test]
    fn one_iteration_is_squashed_uniform_mean(
        n in 1usize..4, s in 1usize..6, o in 1usize..5, a in 1usize..5, seed in any::<u64>()
    ) {
        let u = random(&[n, s, o, a], seed, 2.0);
        let bias = random(&[o, a], seed ^ 1, 0.5);
        let tape = Tape::new();
        let v = dynamic_route(tape.constant(u.clone()), 1, Some(tape.constant(bias.clone())), None)
            .unwrap()
            .value();
        let ud = u.data();
        for loc in 0..n {
            for j in 0..o {
                let sum: Vec<f64> = (0..a)
                    .map(|k| {
                        (0..s).map(|i| ud[((loc * s + i) * o + j) * a + k] / o as f64).sum::<f64>()
                            + bias.data()[j * a + k]
                    })
                    .collect();
                let want = support::squash(&sum);
                let got = &v.data()[(loc * o + j) * a..][..a];
                for (g, w) in got.iter().zip(&want) {
                    prop_assert!((g - w).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_matches_straight_line_oracle(
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        in_types in 1usize..4,
        out_types in 1usize..4,
        in_atoms in 1usize..5,
        out_atoms in 1usize..5,
        iterations in 1usize..5,
        seed in any::<u64>(),
    ) {
        let spec = ConvCapsuleSpec { kernel, stride, in_types, out_types, in_atoms, out_atoms, routing_iterations: iterations };
        let (h, w) = (3, 3);
        let children = random(&[h, w, in_types, in_atoms], seed, 1.0);
        let transforms = random(&spec.transform_shape(), seed ^ 2, 1.0);
        let bias = random(&spec.bias_shape(), seed ^ 3, 0.3);
        let got = conv_capsule_grid(&CapsuleGrid::new(children.clone()).unwrap(), &spec, &transforms, &bias).unwrap();
        let dims = support::LayerDims { h, w, kernel, stride, in_types, out_types, in_atoms, out_atoms, iterations };
        let (oh, ow, want) = support::conv_capsule_layer(&dims, children.data(), transforms.data(), bias.data());
        prop_assert_eq!((got.height(), got.width()), (oh, ow));
        for (g, w) in got.activations().data().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12, "{} vs {}", g, w);
        }
    }
}

#[test]
fn cap_two_by_two_by_hand() {
    // types 0 and 1, two atoms each, at the four cells of a 2x2 grid
    let values = [
        1.0, 2.0, 0.5, 0.0, //
        3.0, -2.0, 0.5, 1.0, //
        -1.0, 4.0, 0.5, 2.0, //
        5.0, 0.0, 0.5, -3.0,
    ];
    let grid = CapsuleGrid::new(Tensor::<f64>::from_f64(vec![2, 2, 2, 2], &values).unwrap()).unwrap();
    assert_eq!(capsule_average_pool(&grid), vec![vec![2.0, 1.0], vec![0.5, 0.0]]);
}
