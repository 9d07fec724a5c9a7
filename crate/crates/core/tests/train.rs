use msinet_core::data::{generate_synthetic, IdentityDataset, Policy, SyntheticConfig};
use msinet_core::eval::evaluate;
use msinet_core::layers::Group;
use msinet_core::losses::{SamConfig, SamMode};
use msinet_core::space::{ArchDescriptor, Fusion, SpaceConfig};
use msinet_core::train::{load_checkpoint, save_checkpoint, train_model, training_labels, Model, TrainConfig};
use msinet_core::Error;

fn tiny_space() -> SpaceConfig {
    SpaceConfig {
        height: 32,
        width: 16,
        stem_width: 8,
        widths: [8, 8, 16],
        embedding: 16,
        rho: 2,
        fusion: Fusion::Sum,
        reduction: 4,
    }
}

fn tiny_data() -> IdentityDataset {
    generate_synthetic(&SyntheticConfig {
        num_ids: 7,
        num_train_ids: 4,
        imgs_per_id: 4,
        num_views: 2,
        height: 32,
        width: 16,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn tiny_config(mode: SamMode) -> TrainConfig {
    TrainConfig { epochs: 2, p: 2, k: 2, sam: SamConfig { mode, lambda: 2.0 }, policy: Policy::Supervised, ..TrainConfig::default() }
}

fn model(mode: SamMode, seed: u64) -> Model {
    let space = tiny_space();
    Model::new(&ArchDescriptor::msinet(&space), &space, 4, mode, seed).unwrap()
}

#[test]
fn training_labels_are_contiguous_in_identity_order() {
    let ds = tiny_data();
    let (items, labels) = training_labels(&ds);
    assert_eq!(items.len(), 16);
    assert_eq!(labels, (0..4).flat_map(|l| [l; 4]).collect::<Vec<_>>());
}

#[test]
fn training_is_deterministic_and_reports_every_epoch() {
    let ds = tiny_data();
    let cfg = tiny_config(SamMode::PamSelf);
    let mut a = model(SamMode::PamSelf, 3);
    let mut seen = Vec::new();
    let ha = train_model(&ds, &mut a, &cfg, |s| seen.push(s.epoch)).unwrap();
    let mut b = model(SamMode::PamSelf, 3);
    let hb = train_model(&ds, &mut b, &cfg, |_| {}).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(seen, vec![0, 1]);
    assert_eq!(a.ps.digest(Group::Weight), b.ps.digest(Group::Weight));
    for s in &ha {
        assert!(s.loss.is_finite() && s.id >= 0.0 && s.triplet >= 0.0);
        let sam = s.sam.expect("alignment enabled");
        assert!(sam >= 0.0);
        assert!((s.loss - (s.id + s.triplet + 2.0 * sam)).abs() < 1e-4 * s.loss.max(1.0));
    }
}

#[test]
fn training_rejects_mismatched_models() {
    let ds = tiny_data();
    let mut no_pam = model(SamMode::Off, 0);
    assert!(train_model(&ds, &mut no_pam, &tiny_config(SamMode::PamSelf), |_| {}).is_err());
    let off = train_model(&ds, &mut no_pam, &tiny_config(SamMode::Off), |_| {}).unwrap();
    assert!(off.iter().all(|s| s.sam.is_none() && (s.loss - s.id - s.triplet).abs() < 1e-5 * s.loss.max(1.0)));

    let space = tiny_space();
    let mut wrong = Model::new(&ArchDescriptor::msinet(&space), &space, 5, SamMode::Off, 0).unwrap();
    assert!(train_model(&ds, &mut wrong, &tiny_config(SamMode::Off), |_| {}).is_err());
    assert!(train_model(&ds, &mut model(SamMode::Off, 0), &TrainConfig { epochs: 0, ..tiny_config(SamMode::Off) }, |_| {}).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let ds = tiny_data();
    let mut m = model(SamMode::PamSelf, 5);
    train_model(&ds, &mut m, &tiny_config(SamMode::PamSelf), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&path, &m).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.descriptor, m.descriptor);
    assert_eq!(back.space, m.space);
    assert_eq!(back.num_classes(), 4);
    assert!(back.pam.is_some());
    for g in [Group::Weight, Group::Buffer] {
        assert_eq!(back.ps.digest(g), m.ps.digest(g));
    }
    assert_eq!(evaluate(&back.net, &back.ps, &ds, 5).unwrap(), evaluate(&m.net, &m.ps, &ds, 5).unwrap());
    // no temporary files left beside the artifact
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);

    std::fs::write(&path, b"{\"descriptor\": 3}").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    assert!(matches!(load_checkpoint(&dir.path().join("missing.json")), Err(Error::Io { .. })));
}
