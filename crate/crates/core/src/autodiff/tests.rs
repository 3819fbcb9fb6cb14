use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn assert_grad_ok(leaves: &[Tensor], f: impl FnMut(&mut Tape, &[Var]) -> crate::Result<Var>) {
    let report = finite_difference_check(leaves, 1e-5, f).unwrap();
    assert!(
        report.max_rel_error < 1e-6,
        "max rel error {} (per leaf {:?})",
        report.max_rel_error,
        report.per_leaf
    );
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::identity(2));
    let col = t.constant(Tensor::matrix(&[vec![1.0], vec![2.0]]).unwrap());
    let out = t.matmul(i2, col).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0]);

    let a = t.param(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
    let b = t.constant(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap());
    let ab = t.matmul(a, b).unwrap();
    assert_eq!(t.value(ab).data(), &[11.0]);
    let s = t.sum(ab);
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[3.0, 4.0]);

    let bad = t.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(t.matmul(a, bad), Err(crate::TkgError::Shape(_))));
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let a = t.param(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);
    let p = t.mul(a, z).unwrap();
    assert_eq!(t.value(p).data(), &[0.0, 0.0]);

    let b2 = t.constant(Tensor::vector(vec![5.0, 7.0]));
    let m = t.mul(a, b2).unwrap();
    let total = t.sum(m);
    t.backward(total).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[5.0, 7.0]);

    let wrong = t.constant(Tensor::vector(vec![1.0]));
    assert!(t.add(a, wrong).is_err());
}

#[test]
fn concat_examples() {
    let mut t = Tape::new();
    let a = t.param(Tensor::vector(vec![1.0, 2.0]));
    let b = t.param(Tensor::vector(vec![3.0]));
    let c = t.concat(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);

    let empty = t.constant(Tensor::vector(vec![]));
    let c2 = t.concat(empty, b).unwrap();
    assert_eq!(t.value(c2).data(), &[3.0]);

    let g = t.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let weighted = t.mul(c, g).unwrap();
    let s = t.sum(weighted);
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[10.0, 20.0]);
    // b also received 1.0 from c2? No: c2 is not on the path to `s`.
    assert_eq!(t.grad(b).unwrap().data(), &[30.0]);

    let m1 = t.constant(Tensor::zeros(&[2, 3]));
    let m2 = t.constant(Tensor::zeros(&[3, 1]));
    assert!(t.concat(m1, m2).is_err());
}

#[test]
fn sigmoid_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.0, -50.0]));
    let y = t.sigmoid(x);
    assert_eq!(t.value(y).data()[0], 0.5);
    let low = t.value(y).data()[1];
    assert!(low < 1e-20 && low > 0.0 && !low.is_nan());
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!((t.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0]]).unwrap());
    let y = t.softmax_rows(x).unwrap();
    let v = t.value(y).data();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert!((v[2] - 2.0 / 3.0).abs() < 1e-15);
    assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn rrelu_examples() {
    let mut t = Tape::new();
    let mut r = rng();
    let x = t.constant(Tensor::vector(vec![-48.0, 5.0]));
    let y = t.rrelu(x, Mode::Eval, 1.0 / 8.0, 1.0 / 3.0, &mut r).unwrap();
    assert!((t.value(y).data()[0] + 11.0).abs() < 1e-12);
    assert_eq!(t.value(y).data()[1], 5.0);

    let yt = t.rrelu(x, Mode::Train, 1.0 / 8.0, 1.0 / 3.0, &mut r).unwrap();
    assert_eq!(t.value(yt).data()[1], 5.0);
    let neg = t.value(yt).data()[0];
    assert!((-16.0..=-6.0).contains(&neg));

    let sample = |seed| {
        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = tape.constant(Tensor::vector(vec![-1.0; 8]));
        let y = tape.rrelu(x, Mode::Train, 0.125, 1.0 / 3.0, &mut r).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(sample(3), sample(3));
    assert!(t.rrelu(x, Mode::Eval, 0.5, 0.2, &mut r).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap());
    let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
    let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = t.layer_norm(x, g, b, 1e-14).unwrap();
    let v = t.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    assert_eq!(&v[2..], &[0.0, 0.0]);
}

#[test]
fn mean_pool_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
    let b = t.constant(Tensor::vector(vec![0.0, 1.0]));
    let m = mean_pool(&mut t, &[a, b]).unwrap();
    assert_eq!(t.value(m).data(), &[0.5, 0.5]);
    let single = mean_pool(&mut t, &[a]).unwrap();
    assert_eq!(t.value(single).data(), &[1.0, 0.0]);
    let xs: Vec<Var> = [2.0, 4.0, 6.0].iter().map(|&v| t.constant(Tensor::vector(vec![v]))).collect();
    let m3 = mean_pool(&mut t, &xs).unwrap();
    assert_eq!(t.value(m3).data(), &[4.0]);
    assert!(matches!(mean_pool(&mut t, &[]), Err(crate::TkgError::Contract(_))));
}

fn zero_gru(t: &mut Tape, d: usize) -> GruVars {
    let mut z = |shape: &[usize]| t.param(Tensor::zeros(shape));
    GruVars {
        w_z: z(&[d, d]),
        u_z: z(&[d, d]),
        b_z: z(&[d]),
        w_r: z(&[d, d]),
        u_r: z(&[d, d]),
        b_r: z(&[d]),
        w_h: z(&[d, d]),
        u_h: z(&[d, d]),
        b_h: z(&[d]),
    }
}

#[test]
fn gru_zero_params() {
    let mut t = Tape::new();
    let p = zero_gru(&mut t, 3);
    let h = t.constant(Tensor::matrix(&[vec![2.0, -4.0, 1.0]]).unwrap());
    let x = t.constant(Tensor::matrix(&[vec![9.0, 9.0, 9.0]]).unwrap());
    let out = gru_cell(&mut t, h, x, &p).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, -2.0, 0.5]);

    let h0 = t.constant(Tensor::zeros(&[1, 3]));
    let out0 = gru_cell(&mut t, h0, x, &p).unwrap();
    assert_eq!(t.value(out0).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gru_gradient_matches_finite_differences() {
    let mut r = rng();
    let d = 4;
    let mut leaves = vec![random(&[2, d], &mut r), random(&[2, d], &mut r)];
    for shape in [[d, d], [d, d]].iter().cycle().take(6) {
        leaves.push(random(shape, &mut r));
    }
    for _ in 0..3 {
        leaves.push(random(&[d], &mut r));
    }
    assert_grad_ok(&leaves, |t, v| {
        let p = GruVars {
            w_z: v[2],
            u_z: v[3],
            w_r: v[4],
            u_r: v[5],
            w_h: v[6],
            u_h: v[7],
            b_z: v[8],
            b_r: v[9],
            b_h: v[10],
        };
        let h = gru_cell(t, v[0], v[1], &p)?;
        let w = t.constant(random(&[2, d], &mut ChaCha8Rng::seed_from_u64(5)));
        let hw = t.mul(h, w)?;
        Ok(t.sum(hw))
    });
}

#[test]
fn backward_basics() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let sq = t.mul(x, x).unwrap();
    t.backward(sq).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let c = t.constant(Tensor::scalar(1.0));
    let twice = t.add(x, x).unwrap();
    let with_c = t.add(twice, c).unwrap();
    t.backward(with_c).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 2.0);
    assert!(t.grad(c).is_none());

    let v = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(v), Err(crate::TkgError::Contract(_))));
}

#[test]
fn backward_is_linear_in_objectives() {
    let mut r = rng();
    let a0 = random(&[3, 3], &mut r);
    let b0 = random(&[3, 3], &mut r);
    let build = |t: &mut Tape, a: Var, b: Var| {
        let ab = t.matmul(a, b).unwrap();
        let f1 = t.sigmoid(ab);
        let o1 = t.sum(f1);
        let sq = t.mul(a, a).unwrap();
        let o2 = t.sum(sq);
        (o1, o2)
    };
    let mut t = Tape::new();
    let (a, b) = (t.param(a0.clone()), t.param(b0.clone()));
    let (o1, o2) = build(&mut t, a, b);
    let both = t.add(o1, o2).unwrap();
    t.backward(both).unwrap();
    let joint = t.grad(a).unwrap().clone();

    let mut t = Tape::new();
    let (a, b) = (t.param(a0), t.param(b0));
    let (o1, o2) = build(&mut t, a, b);
    t.backward(o1).unwrap();
    t.backward(o2).unwrap();
    assert!(t.grad(a).unwrap().max_abs_diff(&joint) < 1e-14);
}

#[test]
fn finite_difference_check_examples() {
    let r = finite_difference_check(&[Tensor::scalar(3.0)], 1e-4, |t, v| t.mul(v[0], v[0])).unwrap();
    assert!(r.max_rel_error < 1e-7);
    let r = finite_difference_check(&[Tensor::scalar(3.0)], 1e-4, |t, _| Ok(t.constant(Tensor::scalar(2.0)))).unwrap();
    assert!(r.max_rel_error < 1e-7);
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut r = rng();
    let fixed = random(&[4, 6], &mut r);

    // linear algebra, elementwise and activations
    let leaves = vec![random(&[4, 3], &mut r), random(&[3, 6], &mut r), random(&[6], &mut r), random(&[5, 3], &mut r)];
    assert_grad_ok(&leaves, |t, v| {
        let ab = t.matmul(v[0], v[1])?;
        let biased = t.add_row(ab, v[2])?;
        let s = t.sigmoid(biased);
        let th = t.tanh(biased);
        let prod = t.mul(s, th)?;
        let diff = t.sub(prod, th)?;
        let aff = t.affine(diff, 0.7, 0.2);
        let bt = t.matmul_bt(v[0], v[3])?;
        let sm = t.softmax_rows(bt)?;
        let w = t.constant(fixed.clone());
        let weighted = t.mul(aff, w)?;
        let a = t.sum(weighted);
        let sq = t.mul(sm, sm)?;
        let b = t.sum(sq);
        t.add(a, b)
    });

    let leaves = vec![random(&[3, 5], &mut r), random(&[5], &mut r), random(&[5], &mut r)];
    assert_grad_ok(&leaves, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let w = t.constant(random(&[3, 5], &mut ChaCha8Rng::seed_from_u64(9)));
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let act = t.rrelu(y, Mode::Eval, 0.125, 1.0 / 3.0, &mut dummy)?;
        let p = t.mul(act, w)?;
        Ok(t.sum(p))
    });

    // structural ops
    let leaves = vec![random(&[4, 3], &mut r), random(&[4, 2], &mut r), random(&[2, 5], &mut r), random(&[3], &mut r)];
    assert_grad_ok(&leaves, |t, v| {
        let c = t.concat(v[0], v[1])?;
        let sl = t.slice_cols(c, 1, 3)?;
        let g = t.gather_rows(sl, &[0, 2, 2, 3, 1])?;
        let w = t.row_sum(v[2])?;
        let x = t.concat_rows(v[0], sl)?;
        let xs = t.row_sum(x)?;
        let wc = t.mul_col(v[2], w)?;
        let s1 = t.mul(g, g)?;
        let a = t.sum(s1);
        let b = t.sum(wc);
        let e = t.mul(xs, xs)?;
        let c = t.sum(e);
        let gv = t.gather_rows(v[3], &[0, 0])?;
        let d = t.sum(gv);
        let ab = t.add(a, b)?;
        let cd = t.add(c, d)?;
        t.add(ab, cd)
    });

    // segment reductions
    let segs = [0usize, 2, 0, 1, 2, 2];
    let leaves = vec![random(&[6, 3], &mut r), random(&[6], &mut r)];
    assert_grad_ok(&leaves, |t, v| {
        let pna = t.segment_pna(v[0], &segs, 3)?;
        let mean = t.segment_mean(v[0], &segs, 4)?;
        let sm = t.segment_softmax(v[1], &segs, 3)?;
        let w = t.constant(random(&[3, 12], &mut ChaCha8Rng::seed_from_u64(2)));
        let p = t.mul(pna, w)?;
        let a = t.sum(p);
        let m2 = t.mul(mean, mean)?;
        let b = t.sum(m2);
        let wx = t.mul_col(v[0], sm)?;
        let sq = t.mul(wx, wx)?;
        let c = t.sum(sq);
        let ab = t.add(a, b)?;
        t.add(ab, c)
    });

    // conv, bce, cosine
    let leaves = vec![
        random(&[2, 5], &mut r),
        random(&[2, 5], &mut r),
        random(&[3, 6], &mut r),
        random(&[3], &mut r),
        random(&[4, 5], &mut r),
        random(&[4, 5], &mut r),
    ];
    assert_grad_ok(&leaves, |t, v| {
        let conv = t.conv_pair(v[0], v[1], v[2], v[3])?;
        let w = t.constant(random(&[15, 2], &mut ChaCha8Rng::seed_from_u64(4)));
        let p = t.matmul(conv, w)?;
        let prob = t.sigmoid(p);
        let loss = t.bce_sum(prob, &[1.0, 0.0, 0.0, 1.0])?;
        let cos = t.row_cosine(v[4], v[5])?;
        let c = t.sum(cos);
        t.add(loss, c)
    });
}

#[test]
fn bce_and_cosine_values() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::vector(vec![0.5]));
    let l = t.bce_sum(p, &[1.0]).unwrap();
    assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);

    let a = t.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
    let b = t.constant(Tensor::matrix(&[vec![0.0, 3.0], vec![2.0, 4.0], vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap());
    let c = t.row_cosine(a, b).unwrap();
    let v = t.value(c).data();
    assert!(v[0].abs() < 1e-15);
    assert!((v[1] - 1.0).abs() < 1e-12);
    assert_eq!(v[2], 0.0);
    assert!((v[3] + 1.0).abs() < 1e-12);
}

#[test]
fn pna_statistics() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(&[vec![1.0, 3.0], vec![5.0, 7.0], vec![4.0, -1.0]]).unwrap());
    let out = t.segment_pna(x, &[0, 0, 1], 2).unwrap();
    let v = t.value(out);
    assert_eq!(v.row(0), &[3.0, 5.0, 5.0, 7.0, 1.0, 3.0, 2.0, 2.0]);
    assert_eq!(v.row(1), &[4.0, -1.0, 4.0, -1.0, 4.0, -1.0, 0.0, 0.0]);
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng();
        let mut t = Tape::new();
        let a = t.param(random(&[3, 4], &mut r));
        let b = t.param(random(&[4, 2], &mut r));
        let ab = t.matmul(a, b).unwrap();
        let act = t.rrelu(ab, Mode::Train, 0.125, 1.0 / 3.0, &mut r).unwrap();
        let s = t.sum(act);
        t.backward(s).unwrap();
        (t.value(s).item().to_bits(), t.grad(a).unwrap().clone(), t.grad(b).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_rows_normalized(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 1..8), 1..5)) {
            let width = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
            let mut t = Tape::new();
            let x = t.constant(Tensor::matrix(&rows).unwrap());
            let y = t.softmax_rows(x).unwrap();
            for i in 0..rows.len() {
                let row = t.value(y).row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }
    }
}
