//! Reference implementations used by the integration and acceptance tests.
//!
//! Everything here is written against plain `Vec<Vec<f64>>` factors so it
//! shares no arithmetic with the library beyond the initial factors and the
//! per-epoch instance order.
#![allow(dead_code)]

use pnlf_core::trainer::epoch_order;
use pnlf_core::{Entry, FactorSet};

pub type Dense = Vec<Vec<f64>>;

pub fn logistic(x: f64) -> f64 {
    // Same two-branch form as the library so trajectories can match bit for bit.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dense(f: &FactorSet) -> [Dense; 3] {
    [f.u(), f.o(), f.m()].map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect())
}

pub fn oracle_predict(f: &[Dense; 3], i: usize, j: usize, k: usize) -> f64 {
    let mut acc = 0.0;
    for ((&u, &o), &m) in f[0][i].iter().zip(&f[1][j]).zip(&f[2][k]) {
        acc += logistic(u) * logistic(o) * logistic(m);
    }
    acc
}

/// Single-instance regularized loss, written directly from its definition.
pub fn oracle_loss(f: &[Dense; 3], e: &Entry, lambda: f64) -> f64 {
    let rows = [&f[0][e.i], &f[1][e.j], &f[2][e.k]];
    let pred: f64 = (0..rows[0].len())
        .map(|r| rows.iter().map(|row| logistic(row[r])).product::<f64>())
        .sum();
    let reg: f64 = rows
        .iter()
        .flat_map(|row| row.iter())
        .map(|&x| logistic(x).powi(2))
        .sum();
    0.5 * ((e.value - pred).powi(2) + lambda * reg)
}

/// Fourth-order central finite-difference gradient of [`oracle_loss`] with
/// respect to `(mode, r)` of the rows touched by `e`.
pub fn fd_gradient(f: &[Dense; 3], e: &Entry, lambda: f64, mode: usize, r: usize, h: f64) -> f64 {
    let row = [e.i, e.j, e.k][mode];
    let at = |offset: f64| {
        let mut g = f.clone();
        g[mode][row][r] += offset;
        oracle_loss(&g, e, lambda)
    };
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub factors: [Dense; 3],
    /// Factors after each completed epoch.
    pub trajectory: Vec<[Dense; 3]>,
    pub epochs: usize,
    pub converged: bool,
    pub validation_rmse: Vec<f64>,
}

fn rmse(f: &[Dense; 3], entries: &[Entry]) -> f64 {
    let sq: f64 = entries
        .iter()
        .map(|e| {
            let d = e.value - oracle_predict(f, e.i, e.j, e.k);
            d * d
        })
        .sum();
    (sq / entries.len() as f64).sqrt()
}

pub fn oracle_rmse(f: &[Dense; 3], entries: &[Entry]) -> f64 {
    rmse(f, entries)
}

/// Plain SGD on the sigmoid-mapped CP model with the analytic regularizer
/// gradient, stopping when validation RMSE changes by less than `tol`.
#[allow(clippy::too_many_arguments)]
pub fn plain_sgd(
    init: &FactorSet,
    train: &[Entry],
    validation: &[Entry],
    eta: f64,
    lambda: f64,
    max_epochs: usize,
    tol: f64,
    seed: u64,
) -> OracleRun {
    let mut f = dense(init);
    let rank = init.rank();
    let mut trajectory = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for epoch in 0..max_epochs {
        for idx in epoch_order(train.len(), seed, epoch) {
            let e = &train[idx];
            let su: Vec<f64> = f[0][e.i].iter().map(|&x| logistic(x)).collect();
            let so: Vec<f64> = f[1][e.j].iter().map(|&x| logistic(x)).collect();
            let sm: Vec<f64> = f[2][e.k].iter().map(|&x| logistic(x)).collect();
            let mut pred = 0.0;
            for r in 0..rank {
                pred += su[r] * so[r] * sm[r];
            }
            let err = e.value - pred;
            let grad = |s: f64, a: f64, b: f64| lambda * s * s * (1.0 - s) - err * s * (1.0 - s) * a * b;
            for r in 0..rank {
                let gu = grad(su[r], so[r], sm[r]);
                let go = grad(so[r], su[r], sm[r]);
                let gm = grad(sm[r], su[r], so[r]);
                f[0][e.i][r] -= eta * gu;
                f[1][e.j][r] -= eta * go;
                f[2][e.k][r] -= eta * gm;
            }
        }
        trajectory.push(f.clone());
        let v = rmse(&f, validation);
        let stop = history.last().is_some_and(|&p: &f64| (v - p).abs() < tol);
        history.push(v);
        if stop {
            converged = true;
            break;
        }
    }
    OracleRun {
        epochs: history.len(),
        factors: f,
        trajectory,
        converged,
        validation_rmse: history,
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0 + 1.0;
            for &i in &idx[s..=e] {
                out[i] = avg;
            }
            s = e + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
