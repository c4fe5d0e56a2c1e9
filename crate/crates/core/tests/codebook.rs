use proptest::prelude::*;
use xmodal_core::autodiff::{squared_distance, DiffValue, Matrix};
use xmodal_core::codebook::{commitment_loss_with, ema_update, nearest_rows, quantize, usage_stats, Codebook, CommitmentMode, Modality};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn brute_nearest(entries: &Matrix, f: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, e) in entries.iter_rows().enumerate() {
        let d: f64 = e.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_rows_agrees_with_brute_force(entries in matrix(12, 4), features in matrix(20, 4)) {
        let got = nearest_rows(&entries, &features);
        for (i, f) in features.iter_rows().enumerate() {
            prop_assert_eq!(got[i], brute_nearest(&entries, f));
        }
    }

    // Duplicated codewords and features sitting exactly on them stress the tie rule.
    #[test]
    fn ties_resolve_to_lowest_index(entries in matrix(6, 3), picks in prop::collection::vec(0usize..6, 10)) {
        let doubled = Matrix::from_fn(12, 3, |r, c| entries.get(r % 6, c));
        let features = doubled.select_rows(&picks);
        for (i, k) in nearest_rows(&doubled, &features).into_iter().enumerate() {
            prop_assert!(k < 6);
            prop_assert_eq!(squared_distance(features.row(i), doubled.row(k)), 0.0);
            prop_assert_eq!(k, brute_nearest(&doubled, features.row(i)));
        }
    }

    #[test]
    fn ema_contracts_geometrically(e0 in matrix(2, 3), batch in matrix(4, 3), gamma in 0.5f64..0.99) {
        let mut book = Codebook::new(e0.clone(), gamma).unwrap();
        let m: Vec<f64> = (0..3).map(|c| (0..4).map(|r| batch.get(r, c)).sum::<f64>() / 4.0).collect();
        let top = batch.select_rows(&[0, 1]);
        let bottom = batch.select_rows(&[2, 3]);
        let d0 = squared_distance(e0.row(1), &m).sqrt();
        for t in 1..=20 {
            ema_update(&mut book, (&top, &[1, 1]), (&bottom, &[1, 1])).unwrap();
            let dt = squared_distance(book.entries.row(1), &m).sqrt();
            prop_assert!((dt - gamma.powi(t) * d0).abs() < 1e-12);
        }
        prop_assert_eq!(book.entries.row(0), e0.row(0));
    }

    #[test]
    fn usage_fraction_and_perplexity_are_bounded(a in prop::collection::vec(0usize..8, 1..30), b in prop::collection::vec(0usize..8, 1..30)) {
        let mut book = Codebook::new(Matrix::zeros(8, 2), 0.9).unwrap();
        book.record_usage(Modality::Image, &a);
        book.record_usage(Modality::Points, &b);
        let s = usage_stats(&book);
        prop_assert!((0.0..=1.0).contains(&s.joint_fraction));
        prop_assert!(s.perplexity >= 1.0 - 1e-12 && s.perplexity <= 8.0 + 1e-9);
    }
}

#[test]
fn quantize_forward_is_codeword_and_backward_is_identity() {
    let mut book = Codebook::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), 0.9).unwrap();
    let f = DiffValue::param(Matrix::from_rows(&[[0.9, 0.2], [0.1, 0.7]]));
    let (q, idx) = quantize(&f, &mut book, Some(Modality::Points)).unwrap();
    assert_eq!(idx, vec![0, 1]);
    assert_eq!(q.value(), Matrix::identity(2));
    q.sum().backward().unwrap();
    assert_eq!(f.grad(), Matrix::filled(2, 2, 1.0));
    assert_eq!(book.usage_3d, vec![1, 1]);
}

#[test]
fn per_modality_commitment_differs_from_anchored_only_when_assignments_differ() {
    let entries = DiffValue::constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    let f2 = DiffValue::param(Matrix::from_rows(&[[0.8, 0.1]]));
    let f3 = DiffValue::param(Matrix::from_rows(&[[0.7, 0.3]]));
    let a = commitment_loss_with(&f2, &f3, &entries, CommitmentMode::Anchored3d).unwrap().item();
    let p = commitment_loss_with(&f2, &f3, &entries, CommitmentMode::PerModality).unwrap().item();
    assert_eq!(a, p);
    let f2 = DiffValue::param(Matrix::from_rows(&[[0.1, 0.8]]));
    let a = commitment_loss_with(&f2, &f3, &entries, CommitmentMode::Anchored3d).unwrap().item();
    let p = commitment_loss_with(&f2, &f3, &entries, CommitmentMode::PerModality).unwrap().item();
    assert!(p < a);
}
