mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::{dense, fd_gradient, oracle_loss, oracle_predict};
use pnlf_core::factor_model::sigmoid;
use pnlf_core::io;
use pnlf_core::pid_optimizer::{advance_state, pid_delta, PidStepper};
use pnlf_core::sparse_tensor::synth_low_rank;
use pnlf_core::trainer::evaluate;
use pnlf_core::{
    ControllerState, Entry, FactorMatrix, FactorSet, Hyperparams, RegMode, SparseTensor,
    SplitSets,
};

fn factor_set(dims: [usize; 3], rank: usize, lo: f64, hi: f64) -> impl Strategy<Value = FactorSet> {
    let n = (dims[0] + dims[1] + dims[2]) * rank;
    prop::collection::vec(lo..hi, n).prop_map(move |v| {
        let (a, rest) = v.split_at(dims[0] * rank);
        let (b, c) = rest.split_at(dims[1] * rank);
        FactorSet::from_matrices(
            FactorMatrix::from_vec(dims[0], rank, a.to_vec()),
            FactorMatrix::from_vec(dims[1], rank, b.to_vec()),
            FactorMatrix::from_vec(dims[2], rank, c.to_vec()),
        )
        .unwrap()
    })
}

fn tensor() -> impl Strategy<Value = SparseTensor> {
    (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(a, b, c)| {
            let cells = a * b * c;
            (
                Just([a, b, c]),
                prop::collection::btree_map(0..cells, 0.0f64..1e4, 1..=cells.min(40)),
            )
        })
        .prop_map(|(dims, cells)| {
            let entries = cells
                .into_iter()
                .map(|(cell, v)| {
                    let k = cell / (dims[0] * dims[1]);
                    let rem = cell % (dims[0] * dims[1]);
                    Entry::new(rem / dims[1], rem % dims[1], k, v)
                })
                .collect();
            SparseTensor::from_entries(dims, entries).unwrap()
        })
}

fn ratios() -> impl Strategy<Value = [f64; 3]> {
    (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| {
        let w = (1.0 - a) * b;
        [1.0 - a - w, a, w]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn split_partitions_exactly(n in 1usize..500, r in ratios(), seed in any::<u64>()) {
        prop_assume!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let s = SplitSets::new(n, r, seed).unwrap();
        let mut seen = HashSet::new();
        for idx in s.train.iter().chain(&s.validation).chain(&s.test) {
            prop_assert!(*idx < n);
            prop_assert!(seen.insert(*idx), "index {} appears twice", idx);
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(SplitSets::new(n, r, seed).unwrap(), s);
    }
}

proptest! {
    #[test]
    fn scaling_round_trip_and_range(t in tensor(), target in 0.5f64..100.0) {
        let (lo, hi) = t.value_range();
        prop_assume!(hi > lo);
        let (scaled, p) = t.scale_linear(target).unwrap();
        for (a, b) in t.entries().iter().zip(scaled.entries()) {
            prop_assert!((0.0..=target).contains(&b.value));
            let back = p.unscale(b.value);
            prop_assert!((back - a.value).abs() <= 1e-12 * a.value.abs().max(hi.abs()));
        }
    }

    #[test]
    fn synthetic_values_in_open_range(
        a in 2usize..8, b in 2usize..8, c in 2usize..6, rank in 1usize..4,
        seed in any::<u64>(), density in 0.05f64..1.0,
    ) {
        let s = synth_low_rank([a, b, c], rank, seed, 0.0, density).unwrap();
        for e in s.tensor.entries() {
            prop_assert!(e.value > 0.0 && e.value < rank as f64);
        }
    }

    #[test]
    fn predictions_bounded(f in factor_set([3, 4, 2], 3, -30.0, 30.0), i in 0usize..3, j in 0usize..4, k in 0usize..2) {
        let p = f.predict(i, j, k).unwrap();
        prop_assert!(p > 0.0 && p < 3.0);
        prop_assert_eq!(p, oracle_predict(&dense(&f), i, j, k));
    }

    #[test]
    fn objective_is_sum_of_instance_losses(
        f in factor_set([3, 2, 2], 2, -4.0, 4.0),
        values in prop::collection::vec(0.0f64..3.0, 12),
        lambda in 0.0f64..0.1,
    ) {
        let entries: Vec<Entry> = (0..12)
            .map(|c| Entry::new(c / 4, (c / 2) % 2, c % 2, values[c]))
            .collect();
        let d = dense(&f);
        let want: f64 = entries.iter().map(|e| oracle_loss(&d, e, lambda)).sum();
        let got = f.objective(&entries, lambda).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences(
        f in factor_set([2, 3, 2], 3, -4.0, 2.0),
        y in 0.0f64..3.0,
        lambda in prop::sample::select(vec![0.0, 0.001, 0.01]),
        (i, j, k) in (0usize..2, 0usize..3, 0usize..2),
    ) {
        let e = Entry::new(i, j, k, y);
        let g = f.instance_gradients(&e, lambda, RegMode::Analytic).unwrap();
        let d = dense(&f);
        for (mode, row) in [&g.u, &g.o, &g.m].into_iter().enumerate() {
            for (r, &an) in row.iter().enumerate() {
                let fd = fd_gradient(&d, &e, lambda, mode, r, 1e-3);
                let tol = (1e-6 * an.abs().max(fd.abs())).max(1e-9);
                prop_assert!((an - fd).abs() <= tol, "mode {} r {}: {} vs {}", mode, r, an, fd);
            }
        }
    }

    #[test]
    fn mode_permutation_permutes_gradients(
        f in factor_set([2, 3, 4], 2, -4.0, 4.0),
        y in 0.0f64..2.0,
        lambda in 0.0f64..0.05,
    ) {
        // Rotate modes (U, O, M) -> (O, M, U) together with the entry.
        let rotated = FactorSet::from_matrices(f.o().clone(), f.m().clone(), f.u().clone()).unwrap();
        let e = Entry::new(1, 2, 3, y);
        let er = Entry::new(2, 3, 1, y);
        let g = f.instance_gradients(&e, lambda, RegMode::Analytic).unwrap();
        let gr = rotated.instance_gradients(&er, lambda, RegMode::Analytic).unwrap();
        prop_assert!((g.prediction - gr.prediction).abs() <= 1e-14);
        for (a, b) in [(&g.u, &gr.m), (&g.o, &gr.u), (&g.m, &gr.o)] {
            for (x, z) in a.iter().zip(b) {
                prop_assert!((x - z).abs() <= 1e-14, "{} vs {}", x, z);
            }
        }
    }

    #[test]
    fn reg_modes_agree_without_regularization(f in factor_set([2, 2, 2], 3, -5.0, 5.0), y in 0.0f64..3.0) {
        let e = Entry::new(1, 0, 1, y);
        let a = f.instance_gradients(&e, 0.0, RegMode::Analytic).unwrap();
        let p = f.instance_gradients(&e, 0.0, RegMode::Paper).unwrap();
        prop_assert_eq!(a, p);
    }

    #[test]
    fn controller_state_follows_recurrence(
        seed in any::<u64>(),
        c_i in 0.0f64..0.8, c_d in 0.0f64..0.5, alpha in 0.05f64..1.0,
        visits in prop::collection::vec((0usize..3, 0usize..2, 0usize..2, 0.0f64..2.0), 1..30),
    ) {
        let h = Hyperparams { eta: 0.05, lambda: 0.01, c_i, c_d, alpha, rank: 2, ..Default::default() };
        let mut f = FactorSet::init([3, 2, 2], 2, seed).unwrap();
        let mut state = ControllerState::for_factors(&f);
        let mut stepper = PidStepper::new(2);
        // Shadow bookkeeping: (integral, previous, visited) per (mode, row, r).
        let mut shadow = std::collections::HashMap::new();
        for (i, j, k, y) in visits {
            let e = Entry::new(i, j, k, y);
            let before = f.clone();
            let g = before.instance_gradients(&e, h.lambda, h.reg_mode).unwrap();
            stepper.step(&mut f, &mut state, &e, &h).unwrap();
            for (mode, (row, grads)) in [(i, &g.u), (j, &g.o), (k, &g.m)].into_iter().enumerate() {
                let (old_mat, new_mat, st) = match mode {
                    0 => (before.u(), f.u(), &state.u),
                    1 => (before.o(), f.o(), &state.o),
                    _ => (before.m(), f.m(), &state.m),
                };
                for (r, &gr) in grads.iter().enumerate() {
                    let (ip, dp, seen) = shadow.get(&(mode, row, r)).copied().unwrap_or((0.0, 0.0, false));
                    let want = old_mat.get(row, r) - pid_delta(gr, ip, dp, seen, &h);
                    prop_assert_eq!(new_mat.get(row, r), want);
                    let i_new = (1.0 - alpha) * ip + alpha * gr;
                    prop_assert_eq!(st.integral.get(row, r), i_new);
                    prop_assert_eq!(st.previous.get(row, r), gr);
                    prop_assert_eq!(advance_state(ip, gr, alpha), (i_new, gr));
                    shadow.insert((mode, row, r), (i_new, gr, true));
                }
            }
            prop_assert!(state.is_finite());
        }
    }

    #[test]
    fn rmse_dominates_mae(f in factor_set([3, 3, 2], 2, -4.0, 1.0), values in prop::collection::vec(0.0f64..5.0, 1..18)) {
        let entries: Vec<Entry> = values
            .iter()
            .enumerate()
            .map(|(c, &v)| Entry::new(c % 3, (c / 3) % 3, c / 9, v))
            .collect();
        let m = evaluate(&f, &entries).unwrap();
        prop_assert!(m.rmse >= m.mae - 1e-15);
        let one = evaluate(&f, &entries[..1]).unwrap();
        let gap = (entries[0].value - f.predict(0, 0, 0).unwrap()).abs();
        prop_assert_eq!(one.mae, gap);
        prop_assert!((one.rmse - gap).abs() <= 1e-15 * gap.max(1.0));
    }

    #[test]
    fn tensor_csv_round_trip(t in tensor()) {
        let mut buf = Vec::new();
        io::write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(io::read_tensor(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn sigmoid_is_logistic(x in -700.0f64..700.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - 1.0 / (1.0 + (-x).exp())).abs() <= 1e-15);
    }
}
