use detalign::ota::{exact_1d_w2, sample_projections, sliced_w2, DecoderFeatures, Domain, ProjectionSet};
use detalign::rng::stream;
use ndnum::{Graph, Tensor};
use proptest::prelude::*;

fn loss(a: &Tensor, b: &Tensor, p: &ProjectionSet) -> f64 {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let fa = DecoderFeatures::new(&g, va, Domain::Source).unwrap();
    let fb = DecoderFeatures::new(&g, vb, Domain::Target).unwrap();
    let l = sliced_w2(&mut g, &fa, &fb, p).unwrap();
    g.scalar(l)
}

fn sets() -> impl Strategy<Value = (Tensor, Tensor, ProjectionSet, Vec<usize>)> {
    (1usize..=8, 1usize..=6, 1usize..=8, any::<u64>()).prop_flat_map(|(n, d, k, seed)| {
        let vals = prop::collection::vec(-3.0f64..3.0, 2 * n * d);
        let perm = Just((0..n).collect::<Vec<_>>()).prop_shuffle();
        (vals, perm).prop_map(move |(v, perm)| {
            let a = Tensor::matrix(n, d, v[..n * d].to_vec()).unwrap();
            let b = Tensor::matrix(n, d, v[n * d..].to_vec()).unwrap();
            let p = sample_projections(k, d, &mut stream(seed, "props")).unwrap();
            (a, b, p, perm)
        })
    })
}

fn permuted(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = x.shape()[1];
    Tensor::matrix(perm.len(), d, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap()
}

proptest! {
    #[test]
    fn symmetric_and_nonnegative((a, b, p, _) in sets()) {
        let ab = loss(&a, &b, &p);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, loss(&b, &a, &p));
    }

    #[test]
    fn row_order_does_not_matter((a, b, p, perm) in sets()) {
        prop_assert_eq!(loss(&permuted(&a, &perm), &b, &p), loss(&a, &b, &p));
        prop_assert_eq!(loss(&a, &permuted(&b, &perm), &p), loss(&a, &b, &p));
        prop_assert_eq!(loss(&a, &permuted(&a, &perm), &p), 0.0);
    }

    #[test]
    fn per_direction_terms_match_assignment((a, b, p, _) in sets()) {
        let mut total = 0.0;
        for k in 0..p.count() {
            let th = p.row(k);
            let proj = |x: &Tensor| (0..x.shape()[0]).map(|i| th.iter().zip(x.row(i)).map(|(u, v)| u * v).sum()).collect::<Vec<f64>>();
            total += exact_1d_w2(&proj(&a), &proj(&b)).unwrap();
        }
        prop_assert!((loss(&a, &b, &p) - total).abs() <= 1e-9 * (1.0 + total));
    }

    /// Shifting an aligned target along one direction by `c` costs `n·c²` on
    /// that direction.
    #[test]
    fn translation_along_direction(n in 1usize..=8, c in -2.0f64..2.0, seed in any::<u64>()) {
        let d = 3;
        let p = sample_projections(1, d, &mut stream(seed, "shift")).unwrap();
        let th = p.row(0).to_vec();
        let a = Tensor::matrix(n, d, (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::matrix(n, d, (0..n * d).map(|i| a.data()[i] + c * th[i % d]).collect()).unwrap();
        let expected = n as f64 * c * c;
        prop_assert!((loss(&a, &b, &p) - expected).abs() <= 1e-9 * (1.0 + expected));
    }
}

#[test]
fn hand_example() {
    let p = ProjectionSet::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let b = Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap();
    assert_eq!(loss(&a, &b, &p), 4.0);
}
