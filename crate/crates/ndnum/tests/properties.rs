use ndnum::fragment::{read_all_fragments, write_fragment};
use ndnum::{finite_diff_check, Graph, Result, SortPermutation, Tensor, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Moves values within `gap` of zero (or of each other) apart.
fn away_from_zero(v: Vec<f64>, gap: f64) -> Vec<f64> {
    v.into_iter()
        .map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
        .collect()
}

fn spread_ties(mut v: Vec<f64>, gap: f64) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    for w in 1..idx.len() {
        let (p, c) = (idx[w - 1], idx[w]);
        if v[c] - v[p] < gap {
            v[c] = v[p] + gap;
        }
    }
    v
}

fn check(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: Vec<f64>, shape: &[usize]) {
    let t = Tensor::new(shape.to_vec(), x).unwrap();
    let r = finite_diff_check(f, &t, EPS, TOL);
    assert!(r.passed, "{r:?}");
    assert_eq!(r.branch_crossings, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_sub_mul_div(a in values(6), b in values(6)) {
        let b = away_from_zero(b, 0.2);
        let bt = Tensor::new(vec![2, 3], b).unwrap();
        check(|g, x| {
            let c = g.constant(bt.clone());
            let s = g.add(x, c)?;
            let d = g.sub(s, x)?;
            let m = g.mul(x, d)?;
            let q = g.div(m, c)?;
            let y = g.add(q, m)?;
            g.sum(y)
        }, a, &[2, 3]);
    }

    #[test]
    fn div_denominator(a in values(4), b in values(4)) {
        let b = away_from_zero(b, 0.2);
        let at = Tensor::vector(a);
        check(|g, x| {
            let c = g.constant(at.clone());
            let q = g.div(c, x)?;
            g.sum(q)
        }, b, &[4]);
    }

    #[test]
    fn scalar_mul_square_mean(a in values(5), s in -3.0f64..3.0) {
        check(|g, x| {
            let y = g.scalar_mul(x, s)?;
            let y = g.square(y)?;
            g.mean(y)
        }, a, &[5]);
    }

    #[test]
    fn matmul_both_sides(a in values(6), b in values(8)) {
        let bt = Tensor::new(vec![2, 4], b.clone()).unwrap();
        let at = Tensor::new(vec![3, 2], a.clone()).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        check(|g, x| {
            let c = g.constant(bt.clone());
            let wc = g.constant(w.clone());
            let p = g.matmul(x, c)?;
            let p = g.mul(p, wc)?;
            g.sum(p)
        }, a, &[3, 2]);
        check(|g, x| {
            let c = g.constant(at.clone());
            let wc = g.constant(w.clone());
            let p = g.matmul(c, x)?;
            let p = g.mul(p, wc)?;
            g.sum(p)
        }, b, &[2, 4]);
    }

    #[test]
    fn relu_sigmoid(a in values(6)) {
        let a = away_from_zero(a, 1e-3);
        let w = Tensor::vector((0..6).map(|i| 1.0 + i as f64).collect());
        check(|g, x| {
            let wc = g.constant(w.clone());
            let r = g.relu(x)?;
            let s = g.sigmoid(x)?;
            let y = g.add(r, s)?;
            let y = g.mul(y, wc)?;
            g.sum(y)
        }, a, &[6]);
    }

    #[test]
    fn softmax_rows(a in values(6)) {
        let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0]).unwrap();
        check(|g, x| {
            let wc = g.constant(w.clone());
            let s = g.softmax(x)?;
            let y = g.mul(s, wc)?;
            g.sum(y)
        }, a, &[2, 3]);
    }

    #[test]
    fn log_positive(a in prop::collection::vec(0.1f64..3.0, 5)) {
        check(|g, x| {
            let l = g.log(x)?;
            let l = g.square(l)?;
            g.sum(l)
        }, a, &[5]);
    }

    #[test]
    fn reshape_concat_gather(a in values(6)) {
        let w = Tensor::vector((0..9).map(|i| (i as f64) - 4.0).collect());
        check(|g, x| {
            let r = g.reshape(x, &[3, 2])?;
            let c = g.concat(&[r, r], 1)?;
            let t = g.gather(c, vec![0, 5, 5, 7, 11, 2, 3, 3, 9], &[9])?;
            let wc = g.constant(w.clone());
            let y = g.mul(t, wc)?;
            let y = g.square(y)?;
            g.sum(y)
        }, a, &[6]);
    }

    #[test]
    fn sort_rows(a in values(8)) {
        // sort each row of a 2×4 matrix; ties pushed apart
        let mut v = spread_ties(a[..4].to_vec(), 1e-3);
        v.extend(spread_ties(a[4..].to_vec(), 1e-3));
        let w = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 1.0]).unwrap();
        check(|g, x| {
            let (s, _) = g.sort_with_permutation(x)?;
            let wc = g.constant(w.clone());
            let y = g.mul(s, wc)?;
            let y = g.square(y)?;
            g.sum(y)
        }, v, &[2, 4]);
    }

    #[test]
    fn grad_reverse_scaled(a in values(4), factor in 0.0f64..3.0) {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(a.clone()));
        let r = g.grad_reverse(x, factor).unwrap();
        prop_assert_eq!(g.value(r).data(), &a[..]);
        let sq = g.square(r).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        for (gv, xv) in grads.get(x).unwrap().data().iter().zip(&a) {
            prop_assert!((gv - (-factor * 2.0 * xv)).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_subexpressions_accumulate(a in values(3)) {
        // y = x², root = sum(y·y + y + sigmoid(y))
        check(|g, x| {
            let y = g.square(x)?;
            let yy = g.mul(y, y)?;
            let s = g.sigmoid(y)?;
            let t = g.add(yy, y)?;
            let t = g.add(t, s)?;
            g.sum(t)
        }, a, &[3]);
    }

    #[test]
    fn sort_output_is_input_permuted(a in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(a.clone()));
        let (s, perms) = g.sort_with_permutation(x).unwrap();
        let p = &perms[0];
        prop_assert!(p.is_bijection());
        prop_assert_eq!(p.apply(&a), g.value(s).data().to_vec());
        prop_assert!(g.value(s).data().windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(p, &SortPermutation::of(&a));
    }

    #[test]
    fn fragments_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 1..4),
        name_seed in "[a-z.]{0,12}",
    ) {
        let mut buf = Vec::new();
        let mut expect = Vec::new();
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), (0..n).map(|k| k as f64 * -0.5 + i as f64).collect()).unwrap();
            let name = format!("{name_seed}{i}");
            write_fragment(&mut buf, &name, &t);
            expect.push((name, t));
        }
        let back = read_all_fragments(&buf, 0).unwrap();
        prop_assert_eq!(back.len(), expect.len());
        for ((n1, t1), (n2, t2)) in back.iter().zip(&expect) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }
    }
}
