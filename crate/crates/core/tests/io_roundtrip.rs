use std::collections::HashSet;
use std::fmt::Write as _;

use chrono::NaiveDate;
use proptest::prelude::*;

use pnlf_core::io::{self, IngestSpec, ModelArtifact};
use pnlf_core::sparse_tensor::synth_low_rank;
use pnlf_core::{Entry, FactorSet, Hyperparams, SparseTensor};

const STEP: u32 = 3600;

fn origin() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 3, 1).unwrap()
}

/// Writes `t` as a meter log with epoch-second timestamps, one row per entry.
fn as_meter_log(t: &SparseTensor, meter_names: &[String]) -> String {
    let base = origin().and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
    let mut out = String::from("timestamp,meter,power\n");
    for e in t.entries() {
        let ts = base + e.k as i64 * 86_400 + e.i as i64 * STEP as i64;
        writeln!(out, "{ts},{},{}", meter_names[e.j], e.value).unwrap();
    }
    out
}

fn log_tensor() -> impl Strategy<Value = SparseTensor> {
    (1usize..5, 1usize..4)
        .prop_flat_map(|(meters, days)| {
            let cells = 24 * meters * days;
            (
                Just([24, meters, days]),
                prop::collection::btree_map(0..cells, 0.0f64..5000.0, 1..60),
            )
        })
        .prop_map(|(dims, cells)| {
            let entries = cells
                .into_iter()
                .map(|(c, v)| {
                    let plane = dims[0] * dims[1];
                    Entry::new((c % plane) / dims[1], c % dims[1], c / plane, v)
                })
                .collect();
            SparseTensor::from_entries(dims, entries).unwrap()
        })
}

proptest! {
    #[test]
    fn ingest_of_exported_log_reproduces_tensor(t in log_tensor()) {
        let names: Vec<String> = (0..t.dims()[1]).map(|j| format!("meter-{j}")).collect();
        let spec = IngestSpec {
            seconds_per_step: STEP,
            date_origin: Some(origin()),
            ..Default::default()
        };
        let got = io::ingest_reader(as_meter_log(&t, &names).as_bytes(), &spec).unwrap();

        // Meters are indexed by first appearance; map them back by name.
        let back: Vec<usize> = got
            .meters
            .iter()
            .map(|m| names.iter().position(|n| n == m).unwrap())
            .collect();
        let seen: HashSet<usize> = t.entries().iter().map(|e| e.j).collect();
        prop_assert_eq!(got.meters.len(), seen.len());
        let max_k = t.entries().iter().map(|e| e.k).max().unwrap();
        prop_assert_eq!(got.tensor.dims(), [24, seen.len(), max_k + 1]);

        let mut entries: Vec<Entry> = got
            .tensor
            .entries()
            .iter()
            .map(|e| Entry::new(e.i, back[e.j], e.k, e.value))
            .collect();
        entries.sort_by_key(|e| (e.k, e.i, e.j));
        prop_assert_eq!(entries.as_slice(), t.entries());
    }

    #[test]
    fn meter_map_is_bijection(ids in prop::collection::vec("[a-z]{1,3}", 1..40)) {
        let mut log = String::from("timestamp,meter,power\n");
        for (n, id) in ids.iter().enumerate() {
            writeln!(log, "{},{id},1", 1_700_000_000 + n).unwrap();
        }
        let got = io::ingest_reader(log.as_bytes(), &IngestSpec::default());
        let distinct: HashSet<&String> = ids.iter().collect();
        let got = match got {
            Ok(g) => g,
            // Same meter twice in the same second is a duplicate cell.
            Err(pnlf_core::Error::DuplicateIndex { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        prop_assert_eq!(got.meters.len(), distinct.len());
        let unique: HashSet<&String> = got.meters.iter().collect();
        prop_assert_eq!(unique.len(), got.meters.len());

        let mut buf = Vec::new();
        io::write_meter_map(&mut buf, &got.meters).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        prop_assert_eq!(rows.len(), got.meters.len());
        for (j, row) in rows.iter().enumerate() {
            let (idx, name) = row.split_once(',').unwrap();
            prop_assert_eq!(idx.parse::<usize>().unwrap(), j);
            prop_assert_eq!(name, got.meters[j].as_str());
        }
    }
}

#[test]
fn model_artifact_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_low_rank([6, 4, 3], 2, 5, 0.0, 0.5).unwrap();
    let (_, scaling) = s.tensor.scale_linear(10.0).unwrap();
    let factors = FactorSet::init([6, 4, 3], 3, 8).unwrap();
    let art = ModelArtifact::new(factors.clone(), Some(scaling), Hyperparams::default(), [0.6, 0.2, 0.2], 8);
    let path = dir.path().join("m.json");
    art.save(&path).unwrap();
    let back = ModelArtifact::load(&path).unwrap();
    assert_eq!(back.factors, factors);
    assert_eq!(back.scaling, Some(scaling));
    assert_eq!(back.seed, 8);

    let tpath = dir.path().join("t.csv");
    io::save_tensor(&tpath, &s.tensor).unwrap();
    assert_eq!(io::load_tensor(&tpath).unwrap(), s.tensor);
}
