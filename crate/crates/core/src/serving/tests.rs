use super::*;
use crate::legacy::{CorpusProfile, LegacyConfig};
use crate::pipeline::schema_for;
use crate::schema::Schema;

fn setup() -> (LegacyPipeline, Schema) {
    let p = CorpusProfile::default();
    let legacy = LegacyPipeline::new(LegacyConfig::from_profile(&p, "Lifestyle")).unwrap();
    (legacy, schema_for(&p, "Lifestyle"))
}

fn snap(legacy: &LegacyPipeline, version: u64, queries: &[&str]) -> SignalSnapshot {
    let entries = queries
        .iter()
        .map(|q| {
            let k = canonicalize(q, true);
            let v: Arc<str> = legacy_payload(legacy, &k).into();
            (k, v)
        })
        .collect();
    SignalSnapshot { version, created_at: 0, entries }
}

#[test]
fn canonical_keys() {
    assert_eq!(canonicalize("  YSL\t口红\n", true), "ysl 口红");
    assert_eq!(canonicalize("YSL", false), "YSL");
    // NFC: e + combining acute -> single code point
    assert_eq!(canonicalize("cafe\u{301}", false), "caf\u{e9}");
}

#[test]
fn snapshot_round_trip_and_validation() {
    let (legacy, schema) = setup();
    let s = snap(&legacy, 3, &["兰蔻口红", "平价面霜推荐", "华为手机"]);
    let bytes = s.to_bytes();
    assert!(bytes.starts_with(b"QPSNAPv1 3 3\n"));
    let back = parse_snapshot(&bytes, &schema, true).unwrap();
    assert_eq!(back.entries, s.entries);
    assert_eq!(back.to_bytes(), bytes);

    for cut in [5, bytes.len() / 2, bytes.len() - 1] {
        assert!(parse_snapshot(&bytes[..cut], &schema, true).is_err(), "cut {cut}");
    }
    let text = String::from_utf8(bytes.clone()).unwrap();
    let bad_count = text.replacen("QPSNAPv1 3 3", "QPSNAPv1 3 4", 1);
    assert!(matches!(parse_snapshot(bad_count.as_bytes(), &schema, true), Err(SnapshotFormatError::Count { .. })));
    let lines: Vec<&str> = text.lines().collect();
    let unsorted = format!("{}\n{}\n{}\n{}\n", lines[0], lines[2], lines[1], lines[3]);
    assert!(parse_snapshot(unsorted.as_bytes(), &schema, true).is_err());
    let spaced = text.replacen("\":", "\": ", 1);
    assert!(parse_snapshot(spaced.as_bytes(), &schema, true).is_err());
}

#[test]
fn empty_snapshot_is_valid() {
    let (_, schema) = setup();
    let s = SignalSnapshot { version: 1, created_at: 0, entries: BTreeMap::new() };
    assert_eq!(s.to_bytes(), b"QPSNAPv1 1 0\n");
    assert_eq!(parse_snapshot(&s.to_bytes(), &schema, true).unwrap().entries.len(), 0);
}

#[test]
fn lookup_hit_miss_and_log() {
    let (legacy, schema) = setup();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("miss.log");
    let store = SnapshotStore::new(Some(legacy.clone()), true, Some(&log)).unwrap();
    let miss = store.lookup("耐克球鞋").unwrap();
    assert_eq!((miss.source, miss.snapshot_version), (Source::Fallback, None));

    let path = dir.path().join("a.snap");
    let s = snap(&legacy, 1, &["兰蔻口红"]);
    write_snapshot(&path, &s).unwrap();
    assert_eq!(store.refresh(&path, &schema).unwrap(), None);
    let hit = store.lookup("  兰蔻口红 ").unwrap();
    assert_eq!(hit.source, Source::Cache);
    assert_eq!(&*hit.payload, &*s.entries["兰蔻口红"]);
    let miss = store.lookup("迪奥香水").unwrap();
    assert_eq!((miss.source, miss.snapshot_version), (Source::Fallback, Some(1)));
    assert!(parse_output(&miss.payload, "迪奥香水", &schema).is_ok());
    assert_eq!(read_miss_log(&log, true).unwrap(), vec!["耐克球鞋".to_string(), "迪奥香水".to_string()]);
    assert_eq!(store.health().misses, 2);

    // stale and malformed refreshes leave the active snapshot alone
    assert!(matches!(store.refresh(&path, &schema), Err(ServeError::StaleVersion { .. })));
    std::fs::write(dir.path().join("bad.snap"), "QPSNAPv1 9 1\nx\n").unwrap();
    assert!(store.refresh(&dir.path().join("bad.snap"), &schema).is_err());
    assert!(store.refresh(&dir.path().join("missing.snap"), &schema).is_err());
    assert_eq!(store.health().version, Some(1));

    // a former miss is served from cache after the next cycle
    let next = snap(&legacy, 2, &["兰蔻口红", "迪奥香水"]);
    write_snapshot(&path, &next).unwrap();
    assert_eq!(store.refresh(&path, &schema).unwrap(), Some(1));
    let hit = store.lookup("迪奥香水").unwrap();
    assert_eq!((hit.source, hit.snapshot_version), (Source::Cache, Some(2)));
    assert_eq!(hit.payload, miss.payload);
}

#[test]
fn no_fallback_errors() {
    let (legacy, _) = setup();
    let store = SnapshotStore::new(None, true, None).unwrap();
    assert!(matches!(store.lookup("x"), Err(ServeError::Unavailable)));
    store.install(snap(&legacy, 1, &["兰蔻口红"])).unwrap();
    assert!(matches!(store.lookup("x"), Err(ServeError::NotFound)));
    assert_eq!(store.lookup("兰蔻口红").unwrap().source, Source::Cache);
}

#[test]
fn fallback_always_validates() {
    let (legacy, schema) = setup();
    for q in ["兰蔻口红", "a", "花西子的平价眼影推荐", "!!", "北京 烤鸭"] {
        let k = canonicalize(q, true);
        let payload = legacy_payload(&legacy, &k);
        assert!(parse_output(&payload, &k, &schema).is_ok(), "{q}: {payload}");
    }
}
