use egspo::harness::smoke_config;
use egspo::persistence::checkpoint::{self, Checkpoint, MAGIC};
use egspo::persistence::runlog::{self, LogLine};
use egspo::persistence::{config, dump, export, FormatError};
use egspo_core::trainer::NullClock;
use egspo_core::{tasks, RunRecord, TrainConfig, Trainer};
use proptest::prelude::*;

fn trained(seed: u64) -> (Trainer, Vec<RunRecord>, Vec<egspo_core::RolloutGroup>) {
    let mut t = Trainer::new(smoke_config(seed), NullClock).unwrap();
    let mut records = Vec::new();
    t.run_stage1(&mut |r| records.push(r)).unwrap();
    let groups = t.run_round(&mut |r| records.push(r)).unwrap();
    (t, records, groups)
}

fn ckpt(t: &Trainer) -> Checkpoint {
    Checkpoint {
        vocab: t.policy().vocab,
        model: t.config().model,
        state: t.state(),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (t, _, _) = trained(1);
    let c = ckpt(&t);
    let bytes = checkpoint::encode(&c).unwrap();
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, c);
    for (a, b) in back.state.params.iter().zip(&c.state.params) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let (t, _, _) = trained(2);
    let bytes = checkpoint::encode(&ckpt(&t)).unwrap();

    for cut in [0, 4, 12, 30, bytes.len() / 2, bytes.len() - 1] {
        let err = checkpoint::decode(&bytes[..cut]).unwrap_err();
        assert_eq!(err.category(), "truncated", "cut at {cut}: {err}");
    }

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert_eq!(checkpoint::decode(&wrong_magic).unwrap_err().category(), "magic");

    let mut newer = bytes.clone();
    newer[MAGIC.len()..MAGIC.len() + 4].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        checkpoint::decode(&newer).unwrap_err(),
        FormatError::Version {
            found: 2,
            supported: 1,
            ..
        }
    ));

    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 40] ^= 1;
    assert_eq!(checkpoint::decode(&flipped).unwrap_err().category(), "checksum");

    let mut longer = bytes;
    longer.push(0);
    assert_eq!(checkpoint::decode(&longer).unwrap_err().category(), "schema");
}

#[test]
fn resume_from_saved_checkpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        stage3: egspo_core::trainer::Stage3Config {
            rounds: 3,
            ..smoke_config(0).stage3
        },
        ..smoke_config(5)
    };
    let mut full = Trainer::new(config.clone(), NullClock).unwrap();
    let mut expect = Vec::new();
    full.train(&mut |r| expect.push(runlog::format_record(&r))).unwrap();

    let mut first = Trainer::new(config.clone(), NullClock).unwrap();
    let mut got = Vec::new();
    first.run_stage1(&mut |r| got.push(runlog::format_record(&r))).unwrap();
    first.run_round(&mut |r| got.push(runlog::format_record(&r))).unwrap();
    let path = dir.path().join("mid.ckpt");
    checkpoint::save(&path, &ckpt(&first)).unwrap();
    drop(first);

    let loaded = checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::from_state(config, &loaded.state, NullClock).unwrap();
    resumed.train(&mut |r| got.push(runlog::format_record(&r))).unwrap();
    assert_eq!(got, expect);
}

#[test]
fn runlog_round_trips_every_record_kind() {
    let (_, records, _) = trained(3);
    let kinds: std::collections::BTreeSet<&str> = records.iter().map(|r| r.event.kind()).collect();
    assert_eq!(kinds.len(), 4, "{kinds:?}");
    for r in &records {
        let text = runlog::format_record(r);
        let back = runlog::parse_line(&text, 1).unwrap();
        assert_eq!(back.record, *r);
        assert!(back.extra.is_empty());
        assert_eq!(runlog::format_line(&back), text);
    }
}

#[test]
fn runlog_keys_are_sorted_and_carry_hash_and_seed() {
    let (_, records, _) = trained(4);
    for r in &records {
        let text = runlog::format_record(r);
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text).unwrap();
        let keys: Vec<&String> = obj.keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        // key order in the text itself, not just after parsing
        let positions: Vec<usize> = keys.iter().map(|k| text.find(&format!("\"{k}\":")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(obj["seed"], 4);
        assert!(obj["config_hash"].as_str().unwrap().len() == 16);
    }
}

#[test]
fn runlog_preserves_unknown_keys() {
    let (_, records, _) = trained(6);
    let text = runlog::format_record(&records[0]);
    let with_extra = text.replacen('{', "{\"zz_future\":[1,2.5,\"x\"],", 1);
    let line = runlog::parse_line(&with_extra, 7).unwrap();
    assert_eq!(line.extra["zz_future"], serde_json::json!([1, 2.5, "x"]));
    assert_eq!(line.record, records[0]);
    let again = runlog::format_line(&line);
    assert_eq!(runlog::parse_line(&again, 1).unwrap(), line);
    assert!(again.ends_with("\"zz_future\":[1,2.5,\"x\"]}"));
}

#[test]
fn runlog_rejects_newer_versions_and_reports_lines() {
    let (_, records, _) = trained(7);
    let text = runlog::format_record(&records[0]).replace("\"v\":1", "\"v\":9");
    assert!(matches!(
        runlog::parse_line(&text, 3).unwrap_err(),
        FormatError::Version { found: 9, .. }
    ));
    let body = format!("{}\n{{\"kind\":\"stage1\"}}\n", runlog::format_record(&records[0]));
    let err = runlog::parse_str(&body).unwrap_err();
    assert_eq!((err.category(), err.line()), ("schema", Some(2)));
    let err = runlog::parse_line("{\"kind\":\"nope\",\"step\":0}", 1).unwrap_err();
    assert_eq!(err.category(), "schema");
}

#[test]
fn dump_round_trip_and_schema_checks() {
    let (_, _, groups) = trained(8);
    let recs = dump::records(0, &groups);
    assert_eq!(recs.len(), groups.iter().map(|g| g.trajectories.len()).sum::<usize>());
    let text = dump::to_string(&recs);
    let back = dump::parse_str(&text, tasks::VOCAB_SIZE).unwrap();
    assert_eq!(back, recs);
    for (r, t) in back.iter().zip(groups.iter().flat_map(|g| &g.trajectories)) {
        assert_eq!(&r.to_trajectory(), t);
    }

    let mut bad = recs[0].clone();
    bad.entropies[0] = -0.1;
    let body = format!("{}{}\n", text, dump::format_record(&bad));
    let err = dump::parse_str(&body, tasks::VOCAB_SIZE).unwrap_err();
    assert_eq!(err.category(), "schema");
    assert_eq!(err.line(), Some(recs.len() + 1));

    let mut high = recs[0].clone();
    high.entropies[0] = 17f64.ln() + 0.01;
    assert!(dump::parse_line(&dump::format_record(&high), 1, tasks::VOCAB_SIZE).is_err());

    let mut short = recs[0].clone();
    short.old_logprobs.pop();
    assert!(dump::parse_line(&dump::format_record(&short), 1, tasks::VOCAB_SIZE).is_err());

    let mut reward = recs[0].clone();
    reward.reward = 0;
    assert!(dump::parse_line(&dump::format_record(&reward), 1, tasks::VOCAB_SIZE).is_err());

    assert_eq!(
        dump::parse_str("\n\n", tasks::VOCAB_SIZE).unwrap_err().category(),
        "schema"
    );
}

#[test]
fn config_round_trip_and_rejections() {
    for c in [TrainConfig::default(), TrainConfig::reference(), smoke_config(11)] {
        let text = config::to_string(&c).unwrap();
        assert_eq!(config::parse_str(&text).unwrap(), c);
    }
    let minimal = config::parse_str("format_version = 1\nseed = 9\n").unwrap();
    assert_eq!(
        minimal,
        TrainConfig {
            seed: 9,
            ..TrainConfig::default()
        }
    );

    assert!(matches!(
        config::parse_str("format_version = 2\n").unwrap_err(),
        FormatError::Version { found: 2, .. }
    ));
    assert_eq!(config::parse_str("seed = 1\n").unwrap_err().category(), "schema");
    assert_eq!(
        config::parse_str("format_version = 1\n[stage3]\nroundz = 3\n")
            .unwrap_err()
            .category(),
        "schema"
    );
    assert_eq!(
        config::parse_str("format_version = 1\n[stage3]\nexpert_fraction = 1.5\n")
            .unwrap_err()
            .category(),
        "schema"
    );
}

#[test]
fn export_has_one_loss_row_per_record_and_is_idempotent() {
    let (_, records, _) = trained(9);
    let lines: Vec<LogLine> = records.iter().cloned().map(LogLine::from).collect();
    let loss = export::loss_csv(&lines).unwrap();
    let text = String::from_utf8(loss.clone()).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), export::LOSS_COLUMNS.join(","));
    assert_eq!(rows.count(), records.len());
    assert_eq!(export::loss_csv(&lines).unwrap(), loss);

    let dir = tempfile::tempdir().unwrap();
    export::write_all(dir.path(), &lines).unwrap();
    let first: Vec<Vec<u8>> = ["loss.csv", "accuracy.csv", "gate.csv"]
        .iter()
        .map(|n| std::fs::read(dir.path().join(n)).unwrap())
        .collect();
    export::write_all(dir.path(), &lines).unwrap();
    for (n, before) in ["loss.csv", "accuracy.csv", "gate.csv"].iter().zip(first) {
        assert_eq!(std::fs::read(dir.path().join(n)).unwrap(), before);
    }
    let gate = String::from_utf8(export::gate_csv(&lines).unwrap()).unwrap();
    assert_eq!(gate.lines().next().unwrap(), export::GATE_COLUMNS.join(","));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_preserves_arbitrary_finite_values(
        values in proptest::collection::vec(-1e300f64..1e300, 1..64),
        step in any::<u64>(),
        pos in any::<u128>(),
    ) {
        let (t, _, _) = trained(0);
        let mut c = ckpt(&t);
        let n = values.len();
        c.state.params = values.clone();
        c.state.optimizer.m = values.iter().map(|v| v * 0.5).collect();
        c.state.optimizer.v = values.iter().map(|v| v.abs()).collect();
        c.state.step = step;
        c.state.rng_routing.word_pos = pos;
        let back = checkpoint::decode(&checkpoint::encode(&c).unwrap()).unwrap();
        prop_assert_eq!(back.state.params.len(), n);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn runlog_float_text_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let (_, records, _) = trained(0);
        let mut r = records[0].clone();
        r.wall_ms = x;
        let back = runlog::parse_line(&runlog::format_record(&r), 1).unwrap();
        prop_assert_eq!(back.record.wall_ms.to_bits(), x.to_bits());
    }
}

#[test]
fn shipped_reference_config_matches_builtin() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    assert_eq!(config::read(&path).unwrap(), TrainConfig::reference());
}
