//! Property tests for the cross-module invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use flowsem::graph::{acyclicity_penalty, shd, shd_with, spectral_norm, EdgePattern};
use flowsem::sem::{epsilon_observed, solve_fixed_point, InterventionMask, LinearSem, SemModel};
use flowsem::synth::{read_dataset, write_dataset, Dataset, Record};

fn pattern_strategy(k: usize) -> impl Strategy<Value = EdgePattern> {
    prop::collection::vec(prop::bool::ANY, k * k).prop_map(move |bits| {
        let mut p = EdgePattern::empty(k).unwrap();
        for j in 0..k {
            for l in 0..k {
                if j != l && bits[j * k + l] {
                    p.set_edge(j, l, true);
                }
            }
        }
        p
    })
}

proptest! {
    #[test]
    fn shd_is_symmetric_zero_iff_equal(a in pattern_strategy(6), b in pattern_strategy(6)) {
        let d = shd(&a, &b).unwrap();
        prop_assert_eq!(d, shd(&b, &a).unwrap());
        prop_assert_eq!(d == 0, a == b);
        // never more than the number of touched pairs when reversals count double
        let d2 = shd_with(&a, &b, true).unwrap();
        prop_assert!(d <= d2);
    }

    #[test]
    fn acyclicity_penalty_zero_for_forward_edges(bits in prop::collection::vec(0.0f64..2.0, 25)) {
        // strictly upper-triangular support is nilpotent
        let mut m = DMatrix::zeros(5, 5);
        for j in 0..5 {
            for l in (j + 1)..5 {
                m[(j, l)] = bits[j * 5 + l];
            }
        }
        prop_assert!(acyclicity_penalty(&m).unwrap() < 1e-9);

        // adding any back edge makes a cycle whenever a forward path exists
        let mut cyclic = m.clone();
        if cyclic[(0, 1)] > 0.0 {
            cyclic[(1, 0)] = 1.0;
            prop_assert!(acyclicity_penalty(&cyclic).unwrap() > 1e-9);
        }
    }

    #[test]
    fn fixed_point_round_trips_noise(
        raw in prop::collection::vec(-1.0f64..1.0, 16),
        eps_raw in prop::collection::vec(-2.0f64..2.0, 4),
        clamp in -1.5f64..1.5,
    ) {
        let k = 4;
        let mut b = DMatrix::from_fn(k, k, |j, l| if j == l { 0.0 } else { raw[j * k + l] });
        let norm = spectral_norm(&b);
        if norm > 0.8 {
            b *= 0.8 / norm;
        }
        let model = SemModel::Linear(LinearSem::new(b).unwrap());
        let mask = SemModel::full_mask(k);
        let iv = InterventionMask::clamp(k, &[(1, clamp)]);
        let eps = DVector::from_vec(eps_raw);
        let tol = 1e-10;
        let x = solve_fixed_point(&model, &mask, &iv, &eps, tol, 5000).unwrap();
        let recovered = epsilon_observed(&model, &mask, &x, &iv);
        for (slot, &coord) in iv.observed_indices().iter().enumerate() {
            prop_assert!((recovered[slot] - eps[coord]).abs() < 10.0 * tol);
        }
        // the intervened coordinate holds its clamp exactly
        prop_assert_eq!(x[1], clamp);
    }

    #[test]
    fn dataset_round_trip_preserves_everything(
        values in prop::collection::vec(-1e6f64..1e6, 12),
        missing in prop::collection::vec(prop::bool::ANY, 12),
        intervened in prop::collection::vec(0usize..4, 3),
    ) {
        let k = 4;
        let mut data = Dataset::new(k);
        for row in 0..3 {
            let node = intervened[row];
            let mut r = vec![1u8; k];
            let mut s = vec![1u8; k];
            s[node] = 0;
            let mut y = DVector::zeros(k);
            for j in 0..k {
                let lost = missing[row * k + j] && j != node;
                r[j] = u8::from(!lost);
                y[j] = if lost { f64::NAN } else { values[row * k + j] };
            }
            data.push(Record { y, r, s }).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.csv");
        write_dataset(&data, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in data.records().iter().zip(back.records()) {
            prop_assert_eq!(&a.r, &b.r);
            prop_assert_eq!(&a.s, &b.s);
            for j in 0..k {
                if a.r[j] == 1 {
                    prop_assert_eq!(a.y[j].to_bits(), b.y[j].to_bits());
                }
            }
        }
    }

    #[test]
    fn checkpoint_values_round_trip_bit_exact(raw in prop::collection::vec(-10.0f64..10.0, 9)) {
        let b = DMatrix::from_fn(3, 3, |j, l| if j == l { 0.0 } else { raw[j * 3 + l] });
        let model = SemModel::Linear(LinearSem::new(b).unwrap());
        let text = serde_json::to_string(&model).unwrap();
        let back: SemModel = serde_json::from_str(&text).unwrap();
        match (&model, &back) {
            (SemModel::Linear(a), SemModel::Linear(c)) => {
                for (x, y) in a.weights().iter().zip(c.weights().iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            _ => prop_assert!(false),
        }
    }
}
