//! Property tests for the cross-module invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;

use quatrain_core::corpus::{build_vocab, decode_line, encode_line, segment_greedy, Poem};
use quatrain_core::numkernel::{clip_gradients, softmax, Matrix, ParamStore};

proptest! {
    /// segment_greedy output always concatenates back to its input,
    /// for any dictionary.
    #[test]
    fn segmentation_concatenates_back(
        line in "[a-g]{0,12}",
        dict_words in prop::collection::vec("[a-g]{1,4}", 0..8),
    ) {
        let dictionary: BTreeSet<String> = dict_words.into_iter().collect();
        let segments = segment_greedy(&dictionary, &line);
        prop_assert_eq!(segments.concat(), line);
    }

    /// softmax output sums to 1 within 1e-12 and stays finite for any
    /// finite input.
    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-300.0f64..300.0, 1..12)) {
        let y = softmax(&xs);
        prop_assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));
        let total: f64 = y.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    /// encode∘decode is identity on UNK-free lines; decode∘encode is
    /// identity on marker-free id sequences within vocab.
    #[test]
    fn encode_decode_round_trip(line in "[a-k]{1,10}") {
        let vocab = build_vocab(
            &[Poem::new("p", "", vec!["abcdefghijk".into()])],
            1,
        );
        let ids = encode_line(&vocab, &line, false);
        let with_markers = encode_line(&vocab, &line, true);
        prop_assert_eq!(with_markers.len(), ids.len() + 2);
        prop_assert_eq!(decode_line(&vocab, &ids), line);
    }

    /// clip_gradients is idempotent and the post-clip norm never
    /// exceeds the bound.
    #[test]
    fn clipping_is_idempotent(
        grads in prop::collection::vec(-10.0f64..10.0, 1..16),
        max_norm in 0.1f64..5.0,
    ) {
        let n = grads.len();
        let mut store = ParamStore::new();
        store.insert("w", Matrix::zeros(n, 1));
        store.grad_mut("w").unwrap().data_mut().copy_from_slice(&grads);
        clip_gradients(&mut store, max_norm).unwrap();
        let once = store.grad("w").unwrap().data().to_vec();
        let norm: f64 = once.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm <= max_norm + 1e-9);
        clip_gradients(&mut store, max_norm).unwrap();
        prop_assert_eq!(store.grad("w").unwrap().data(), once.as_slice());
    }
}
