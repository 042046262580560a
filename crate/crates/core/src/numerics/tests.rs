use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn scalar_of(t: &Tape<f32>, v: Var) -> f32 {
    t.value(v).item()
}

#[test]
fn cosine_examples() {
    let cases: [([f32; 2], [f32; 2], f32); 3] = [
        ([3.0, 4.0], [3.0, 4.0], 1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 2.0], [2.0, 1.0], 0.8),
    ];
    for (a, b, want) in cases {
        let mut t = Tape::<f32>::new();
        let va = t.constant(Tensor::vector(a.to_vec()));
        let vb = t.constant(Tensor::vector(b.to_vec()));
        let c = cosine_similarity(&mut t, va, vb).unwrap();
        assert!((scalar_of(&t, c) - want).abs() < 1e-6, "{a:?} {b:?}");
    }
}

#[test]
fn cosine_zero_norm_is_an_error() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let b = t.constant(Tensor::vector(vec![1.0, 0.0]));
    assert_eq!(
        cosine_similarity(&mut t, a, b),
        Err(NumericsError::ZeroNorm { op: "cosine" })
    );
}

#[test]
fn cross_entropy_examples() {
    let cases: [([f32; 2], f32); 3] = [
        ([0.0, 0.0], std::f32::consts::LN_2),
        ([1.0, 0.0], (1.0f32 + (-1.0f32).exp()).ln()),
        ([1000.0, 0.0], 0.0),
    ];
    for (logits, want) in cases {
        let mut t = Tape::<f32>::new();
        let l = t.constant(Tensor::vector(logits.to_vec()));
        let ce = softmax_cross_entropy(&mut t, l, 0).unwrap();
        let got = scalar_of(&t, ce);
        assert!(got.is_finite());
        assert!((got - want).abs() < 1e-6, "{logits:?}: {got} vs {want}");
    }
}

#[test]
fn cross_entropy_target_out_of_range() {
    let mut t = Tape::<f32>::new();
    let l = t.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(
        softmax_cross_entropy(&mut t, l, 2),
        Err(NumericsError::TargetOutOfRange { .. })
    ));
}

#[test]
fn grad_check_sum_of_squares() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let report = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        &[x],
        1e-3,
        1e-3,
    )
    .unwrap();
    assert_eq!(report.analytic[0], vec![2.0, 4.0, 6.0]);
    assert!(report.max_rel_error < 1e-4);
    assert!(report.passed);
}

#[test]
fn cosine_gradient_vanishes_at_parallel_input() {
    let x = Tensor::vector(vec![0.3, -0.7, 0.2]);
    let fixed = x.clone();
    let report = grad_check(
        |t, v| {
            let c = t.constant(fixed.clone());
            cosine_similarity(t, v[0], c)
        },
        &[x],
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(
        report.analytic[0].iter().all(|g| g.abs() < 1e-12),
        "{:?}",
        report.analytic
    );
    assert!(
        report.numeric[0].iter().all(|g| g.abs() < 1e-5),
        "{:?}",
        report.numeric
    );
    assert!(report.passed);
}

#[test]
fn grad_check_rejects_non_finite_output() {
    let x = Tensor::vector(vec![1.0]);
    let err = grad_check(|t, v| t.scale(v[0], f64::INFINITY), &[x], 1e-3, 1e-3).unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { .. }));
}

#[test]
fn cosine_is_symmetric_and_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let a: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: f32 = rng.random_range(0.01..100.0);
        let mut t = Tape::<f32>::new();
        let (va, vb) = (
            t.constant(Tensor::vector(a.clone())),
            t.constant(Tensor::vector(b.clone())),
        );
        let vs = t.constant(Tensor::vector(a.iter().map(|x| x * c).collect()));
        let ab = cosine_similarity(&mut t, va, vb).unwrap();
        let ba = cosine_similarity(&mut t, vb, va).unwrap();
        let sb = cosine_similarity(&mut t, vs, vb).unwrap();
        assert_eq!(scalar_of(&t, ab).to_bits(), scalar_of(&t, ba).to_bits());
        assert!((scalar_of(&t, ab) - scalar_of(&t, sb)).abs() < 1e-6);
        assert!(scalar_of(&t, ab).abs() <= 1.0 + 1e-6);
    }
}

/// Random complex-split pairs whose per-dimension angle differences stay at
/// least `ANGLE_KINK_MARGIN` away from 0 and ±π, where `|θ|` has no derivative
/// and central differences straddle the kink. Components near the origin are
/// also rejected: there the angle turns faster than a 1e-3 step resolves.
pub(crate) fn angle_inputs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Tensor<f64>> {
    const ANGLE_KINK_MARGIN: f64 = 0.05;
    let h = cols / 2;
    loop {
        let a = rand_tensor(rng, &[rows, cols]);
        let b = rand_tensor(rng, &[rows, cols]);
        let ok = (0..rows).all(|r| {
            (0..h).all(|k| {
                let (x, y) = (a.data()[r * cols + k], a.data()[r * cols + h + k]);
                let (c, d) = (b.data()[r * cols + k], b.data()[r * cols + h + k]);
                let theta = (y * c - x * d).atan2(x * c + y * d).abs();
                let smallest = x.hypot(y).min(c.hypot(d));
                smallest > 0.2
                    && theta > ANGLE_KINK_MARGIN
                    && theta < std::f64::consts::PI - ANGLE_KINK_MARGIN
            })
        });
        if ok {
            return vec![a, b];
        }
    }
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>;

/// Every primitive, reduced to a scalar through a fixed random projection so
/// that all output elements contribute distinct weights.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn project(t: &mut Tape<f64>, v: Var) -> Result<Var, NumericsError> {
        let n = t.value(v).numel();
        let w: Vec<f64> = (0..n)
            .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let shape = t.shape(v).to_vec();
        let w = t.constant(Tensor::new(shape, w)?);
        let p = t.mul(v, w)?;
        t.sum(p)
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o)
        }),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]], |t, v| {
            let o = t.matmul_t(v[0], v[1])?;
            project(t, o)
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o)
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| {
            let o = t.add_row(v[0], v[1])?;
            project(t, o)
        }),
        ("mul_row", vec![vec![3, 4], vec![4]], |t, v| {
            let o = t.mul_row(v[0], v[1])?;
            project(t, o)
        }),
        ("scale", vec![vec![5]], |t, v| {
            let o = t.scale(v[0], -1.7)?;
            project(t, o)
        }),
        ("add_const", vec![vec![5]], |t, v| {
            let o = t.add_const(v[0], 0.3)?;
            project(t, o)
        }),
        ("gelu", vec![vec![6]], |t, v| {
            let o = t.gelu(v[0])?;
            project(t, o)
        }),
        ("gather", vec![vec![4, 3]], |t, v| {
            let o = t.gather(v[0], &[2, 0, 2, 3])?;
            project(t, o)
        }),
        ("masked_softmax_rows", vec![vec![3, 4]], |t, v| {
            let o = t.masked_softmax_rows(v[0], &[true, false, true, true])?;
            project(t, o)
        }),
        ("layer_norm_rows", vec![vec![3, 5]], |t, v| {
            let o = t.layer_norm_rows(v[0], 1e-5)?;
            project(t, o)
        }),
        ("masked_mean_rows", vec![vec![4, 3]], |t, v| {
            let o = t.masked_mean_rows(v[0], &[true, true, false, true])?;
            project(t, o)
        }),
        ("masked_max_rows", vec![vec![4, 3]], |t, v| {
            let o = t.masked_max_rows(v[0], &[true, false, true, true])?;
            project(t, o)
        }),
        ("select_row", vec![vec![3, 4]], |t, v| {
            let o = t.select_row(v[0], 1)?;
            project(t, o)
        }),
        ("concat_rows", vec![vec![2, 3], vec![3]], |t, v| {
            let o = t.concat_rows(&[v[0], v[1]])?;
            project(t, o)
        }),
        ("normalize_rows", vec![vec![3, 4]], |t, v| {
            let o = t.normalize_rows(v[0])?;
            project(t, o)
        }),
        ("cosine_rows", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let o = t.cosine_rows(v[0], v[1])?;
            project(t, o)
        }),
        ("row_dot", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let o = t.row_dot(v[0], v[1])?;
            project(t, o)
        }),
        ("angle_sim_rows", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let o = t.angle_sim_rows(v[0], v[1])?;
            project(t, o)
        }),
        ("pair_diff", vec![vec![4]], |t, v| {
            let o = t.pair_diff(v[0], &[(0, 1), (2, 1), (3, 0)])?;
            project(t, o)
        }),
        ("log1p_sum_exp", vec![vec![5]], |t, v| t.log1p_sum_exp(v[0])),
        ("cross_entropy_rows", vec![vec![3, 4]], |t, v| {
            let mask = [
                false, true, false, false, false, false, false, false, false, false, true, false,
            ];
            t.cross_entropy_rows(v[0], &[0, 1, 3], Some(&mask))
        }),
        ("bce_with_logits", vec![vec![4]], |t, v| {
            t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0])
        }),
        ("sum", vec![vec![2, 3]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![2, 3]], |t, v| t.mean(v[0])),
    ]
}

#[test]
fn every_primitive_passes_grad_check_over_100_seeds() {
    for (name, shapes, f) in primitive_cases() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = if name == "angle_sim_rows" {
                angle_inputs(&mut rng, shapes[0][0], shapes[0][1])
            } else {
                shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect()
            };
            let report = grad_check(f, &inputs, 1e-3, 1e-3).unwrap();
            assert!(
                report.passed,
                "{name} seed {seed}: max rel error {} at {:?}",
                report.max_rel_error, report.worst
            );
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f32>::new();
        let a = t.param(rand_tensor(&mut rng, &[4, 6]).cast());
        let b = t.param(rand_tensor(&mut rng, &[6, 3]).cast());
        let m = t.matmul(a, b).unwrap();
        let s = t.masked_softmax_rows(m, &[true, true, true]).unwrap();
        let n = t.layer_norm_rows(s, 1e-5).unwrap();
        let l = t.mean(n).unwrap();
        let l2 = t.mul(l, l).unwrap();
        let g = t.backward(l2).unwrap();
        (g.get(a).unwrap().to_vec(), g.get(b).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(
        a1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        a2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        b1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn backward_visits_shared_parents_once_per_use() {
    // x used twice: d(x*x)/dx = 2x
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::vector(vec![3.0]));
    let y = t.mul(x, x).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let c = t.constant(Tensor::vector(vec![5.0, 5.0]));
    let y = t.mul(x, c).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap(), &[5.0, 5.0]);
}

#[test]
fn masked_softmax_gives_zero_weight_to_dropped_columns() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::matrix(1, 3, vec![1.0, 50.0, 2.0]).unwrap());
    let s = t.masked_softmax_rows(x, &[true, false, true]).unwrap();
    let v = t.value(s).data();
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-6);
}

#[test]
fn log1p_sum_exp_of_empty_is_zero() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::vector(vec![]));
    let l = t.log1p_sum_exp(x).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    let mut t = Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).unwrap();
    assert!(t.set_grad(vec![0.0; 3]).is_err());
    t.set_grad(vec![1.0; 4]).unwrap();
    assert_eq!(t.grad().unwrap().len(), 4);
}

#[test]
fn tape_is_send() {
    fn assert_send<S: Send>() {}
    assert_send::<Tape<f32>>();
    assert_send::<Tensor<f32>>();
}
