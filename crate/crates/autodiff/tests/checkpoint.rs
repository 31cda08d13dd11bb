use autodiff::checkpoint::{load, read_header, save};
use autodiff::{Linear, Module, Tensor};
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn round_trip_preserves_values_and_header() {
    let mut rng = StdRng::seed_from_u64(1);
    let a = Linear::new("head", 4, 3, &mut rng);
    let mut b = Linear::new("head", 4, 3, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, "linear", serde_json::json!({"d": 3}), &a).unwrap();
    let header = load(&path, "linear", &mut b).unwrap();
    assert_eq!(header.meta["d"], 3);
    assert_eq!(a.w.value, b.w.value);
    assert_eq!(read_header(&path).unwrap().params[0].shape, [4, 3]);
    let bytes = std::fs::read(&path).unwrap();
    let nl = bytes.iter().position(|&c| c == b'\n').unwrap();
    assert_eq!(bytes.len() - nl - 1, 8 * a.num_params());
}

#[test]
fn wrong_arch_or_shape_rejected() {
    let mut rng = StdRng::seed_from_u64(1);
    let a = Linear::new("head", 4, 3, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, "linear", serde_json::Value::Null, &a).unwrap();
    let mut other = Linear::new("head", 4, 3, &mut rng);
    assert!(load(&path, "gru", &mut other).is_err());
    let mut wide = Linear::new("head", 4, 5, &mut rng);
    assert!(load(&path, "linear", &mut wide).is_err());
    std::fs::write(&path, &std::fs::read(&path).unwrap()[..40]).unwrap();
    assert!(load(&path, "linear", &mut other).is_err());
    let _ = Tensor::zeros(1, 1);
}
