use morphkit::model::{FrozenSource, Model, ModelConfig, Variant};
use morphkit::trainer::{load_checkpoint, predict_field, read_checkpoint_meta, save_checkpoint, train, TrainConfig};
use morphkit::synthdata::gen_pair;
use morphkit::Volume;

fn ramp(dims: [usize; 3], k: f32) -> Volume<f32> {
    Volume::from_fn(dims, [1.0; 3], |z, y, x| ((z + 2 * y + 3 * x) as f32 * k).sin()).unwrap()
}

#[test]
fn untrained_model_predicts_zero_field() {
    let dims = [32, 32, 16];
    let model = Model::<f32>::build(&ModelConfig::tiny(dims)).unwrap();
    let phi = model.predict(&ramp(dims, 0.1), &ramp(dims, 0.2)).unwrap();
    assert_eq!(phi.dims(), dims);
    assert!(phi.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn builds_are_deterministic() {
    let cfg = ModelConfig::tiny([16; 3]);
    let (a, b) = (Model::<f32>::build(&cfg).unwrap(), Model::<f32>::build(&cfg).unwrap());
    assert_eq!(a.store.len(), b.store.len());
    assert!(a.store.iter().zip(b.store.iter()).all(|((_, p), (_, q))| p.name == q.name && p.value == q.value));
}

#[test]
fn variants_differ_in_trainable_count() {
    let count = |v: Variant| {
        let mut cfg = ModelConfig::tiny([16; 3]);
        cfg.variant = v;
        Model::<f32>::build(&cfg).unwrap().store.trainable_count()
    };
    let full = count(Variant::Full);
    assert!(count(Variant::NoLeb) < count(Variant::OneLeb));
    assert!(count(Variant::OneLeb) < full);
    assert!(count(Variant::NoLora) < full);
    assert!(count(Variant::VitReplace) > full);
}

#[test]
fn input_dims_must_tile_into_tokens() {
    assert!(Model::<f32>::build(&ModelConfig::tiny([24, 16, 16])).is_err());
    let mut cfg = ModelConfig::tiny([16; 3]);
    cfg.frozen = FrozenSource::Random { seed: 0, head_dim: 7, kv_groups: 2 };
    assert!(Model::<f32>::build(&cfg).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dims = [16; 3];
    let pair = gen_pair(dims, 3, 2.0, 4).unwrap();
    let mut model = Model::<f32>::build(&ModelConfig::tiny(dims)).unwrap();
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let report = train(&mut model, std::slice::from_ref(&pair), &cfg, |_, _, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, &cfg, 2, &report.history, dir.path()).unwrap();

    let meta = read_checkpoint_meta(dir.path()).unwrap();
    assert_eq!(meta.epoch, 2);
    assert_eq!(meta.dtype, "f32");
    assert_eq!(meta.history, report.history);
    let (restored, _) = load_checkpoint::<f32>(dir.path()).unwrap();
    let a = predict_field(&model, &pair.moving, &pair.fixed, false).unwrap();
    let b = predict_field(&restored, &pair.moving, &pair.fixed, false).unwrap();
    assert_eq!(a, b);
    assert!(a.tensor().data().iter().any(|&v| v != 0.0));
}
