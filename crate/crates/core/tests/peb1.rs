use fsad_core::encoder::{Condition, EmbeddingStore, StoreMetadata, StoreRecord};

fn record_bytes(out: &mut Vec<u8>, id: &str, label: u8, condition: u8, values: &[f32]) {
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    out.push(label);
    out.push(condition);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Three records, N = 4 (2x2 grid), D = 3.
fn hand_written() -> (Vec<u8>, Vec<Vec<f32>>) {
    let values: Vec<Vec<f32>> = (0..3)
        .map(|r| (0..12).map(|i| r as f32 * 100.0 + i as f32 * 0.25 - 1.5).collect())
        .collect();
    let mut bytes = b"PEB1".to_vec();
    for v in [1u32, 3, 4, 3] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    record_bytes(&mut bytes, "bottle/test/good/000", 0, 0, &values[0]);
    record_bytes(&mut bytes, "bottle/test/crack/001", 1, 0, &values[1]);
    record_bytes(&mut bytes, "bottle/test/crack/001", 1, 1, &values[2]);
    (bytes, values)
}

const SIDECAR: &str = r#"{
  "backbone": "dinov2_vits14",
  "resolution": 8,
  "patch_size": 4,
  "epsilon": 0.03137254901960784,
  "export_seed": 0
}"#;

#[test]
fn reads_hand_written_file_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bottle.peb");
    let (bytes, values) = hand_written();
    std::fs::write(&path, &bytes).unwrap();
    std::fs::write(EmbeddingStore::sidecar_path(&path), SIDECAR).unwrap();

    let store = EmbeddingStore::load(&path).unwrap();
    assert_eq!(store.len(), 3);
    assert_eq!(store.grid(), (2, 2));
    let meta = store.metadata();
    assert_eq!(meta.backbone, "dinov2_vits14");
    assert_eq!((meta.resolution, meta.patch_size), (8, 4));
    assert_eq!(meta.epsilon, Some(8.0 / 255.0));
    assert_eq!(meta.export_seed, Some(0));

    let good = store.record("bottle/test/good/000", Condition::Clean).unwrap();
    assert!(!good.anomalous);
    assert_eq!(good.values, values[0]);
    let adv = store.record("bottle/test/crack/001", Condition::Adversarial).unwrap();
    assert!(adv.anomalous);
    assert_eq!(adv.values, values[2]);

    let emb = store.get("bottle/test/crack/001", Condition::Clean).unwrap();
    assert_eq!(emb.grid(), (2, 2));
    assert_eq!(emb.dim(), 3);
    assert_eq!(emb.row(1), &[99.25, 99.5, 99.75][..]);

    // writing back reproduces the same bytes
    assert_eq!(store.to_bytes().unwrap(), bytes);
}

#[test]
fn sidecar_shape_must_match_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.peb");
    std::fs::write(&path, hand_written().0).unwrap();
    std::fs::write(
        EmbeddingStore::sidecar_path(&path),
        r#"{"backbone": "x", "resolution": 12, "patch_size": 4}"#,
    )
    .unwrap();
    let err = EmbeddingStore::load(&path).unwrap_err();
    assert_eq!(err.kind(), "format");
}

#[test]
fn saved_file_parses_by_layout() {
    let meta = StoreMetadata {
        backbone: "toy".into(),
        resolution: 6,
        patch_size: 2,
        epsilon: None,
        export_seed: Some(11),
    };
    let mut store = EmbeddingStore::new(meta.clone(), 3, 3, 2).unwrap();
    let ids = ["a", "bb", "ccc"];
    for (k, id) in ids.iter().enumerate() {
        store
            .insert(StoreRecord {
                id: id.to_string(),
                anomalous: k == 2,
                condition: if k == 1 { Condition::Adversarial } else { Condition::Clean },
                values: (0..18).map(|i| (k * 18 + i) as f32 / 7.0).collect(),
            })
            .unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.peb");
    store.save(&path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    assert_eq!(&bytes[..4], b"PEB1");
    assert_eq!((u32_at(4), u32_at(8), u32_at(12), u32_at(16)), (1, 3, 9, 2));
    let mut pos = 20;
    for (k, id) in ids.iter().enumerate() {
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2;
        assert_eq!(&bytes[pos..pos + len], id.as_bytes());
        pos += len;
        assert_eq!(bytes[pos], u8::from(k == 2));
        assert_eq!(bytes[pos + 1], u8::from(k == 1));
        pos += 2;
        for i in 0..18 {
            let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            assert_eq!(v, (k * 18 + i) as f32 / 7.0);
            pos += 4;
        }
    }
    assert_eq!(pos, bytes.len());

    let sidecar: StoreMetadata =
        serde_json::from_str(&std::fs::read_to_string(EmbeddingStore::sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(sidecar, meta);
    assert_eq!(EmbeddingStore::load(&path).unwrap(), store);
}
