use jkoflow::checkpoint::{decode_model, encode_model, load_model, save_model, CHECKPOINT_HEADER};
use jkoflow::energy::Potential;
use jkoflow::icnn::IcnnParams;
use jkoflow::trainer::{Model, ModelKind, TrainConfig};
use std::path::Path;

fn model(kind: ModelKind) -> Model {
    let cfg = TrainConfig {
        icnn_width: 8,
        icnn_depth: 3,
        energy_hidden: 16,
        seed: 42,
        ..TrainConfig::default()
    };
    let mut m = Model::new(kind, 3, cfg).unwrap();
    m.steps = 17;
    m.fitted = true;
    m
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Jkonet, ModelKind::Forward] {
        let mut m = model(kind);
        let path = dir.path().join(format!("{}.ckpt", kind.as_str()));
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);

        m.last_theta = Some(IcnnParams::init(m.config.icnn(3), 5).unwrap());
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.kind, kind);
    }
}

#[test]
fn layout_is_self_describing() {
    let m = model(ModelKind::Forward);
    let bytes = encode_model(&m).unwrap();
    let text_end = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(1).unwrap().0;
    let head = std::str::from_utf8(&bytes[..text_end]).unwrap();
    let mut lines = head.lines();
    assert_eq!(lines.next(), Some(CHECKPOINT_HEADER));
    let manifest: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(manifest["kind"], "forward");
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["steps"], 17);
    assert_eq!(manifest["input_dim"], 3);
    let arrays = manifest["arrays"].as_array().unwrap();
    assert_eq!(arrays[0]["name"], "xi.w0");
    assert_eq!(arrays[0]["shape"], serde_json::json!([3, 16]));
    let payload = &bytes[text_end + 1..];
    assert_eq!(payload.len(), 8 * (3 * 16 + 16 + 16 * 16 + 16 + 16 + 1));
    let first = f64::from_le_bytes(payload[..8].try_into().unwrap());
    assert_eq!(first, m.energy.blocks()[0].data()[0]);
}

#[test]
fn corrupt_files_are_rejected() {
    let p = Path::new("mem");
    let bytes = encode_model(&model(ModelKind::Jkonet)).unwrap();
    assert!(decode_model(&bytes[..bytes.len() - 8], p).is_err());
    assert!(decode_model(&bytes[..bytes.len() - 3], p).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(decode_model(&wrong, p).is_err());
    assert!(decode_model(b"JKOFLOW-CHECKPOINT v1\n{not json}\n", p).is_err());
    assert!(decode_model(b"", p).is_err());
    assert!(load_model(Path::new("/nonexistent/model.ckpt")).is_err());
}

#[test]
fn encoding_is_deterministic() {
    let a = encode_model(&model(ModelKind::Jkonet)).unwrap();
    let b = encode_model(&model(ModelKind::Jkonet)).unwrap();
    assert_eq!(a, b);
}
