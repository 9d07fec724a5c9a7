mod common;

use std::collections::BTreeMap;
use std::fs;

use common::rng;
use msinet_core::data::{
    augment, augment_with, generate_synthetic, load_manifest, pk_batches, read_ppm, write_dataset, write_ppm,
    AugmentOptions, Policy, Side, SyntheticConfig, ERASE_PROB, MANIFEST_NAME,
};
use msinet_core::numerics::Tensor;
use proptest::prelude::*;

fn small() -> SyntheticConfig {
    SyntheticConfig { num_ids: 5, num_train_ids: 3, imgs_per_id: 4, ..SyntheticConfig::default() }
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let a = generate_synthetic(&small()).unwrap();
    let b = generate_synthetic(&small()).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SyntheticConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a.records[0].image, c.records[0].image);
    assert!(generate_synthetic(&SyntheticConfig { num_ids: 0, ..small() }).is_err());
    assert!(generate_synthetic(&SyntheticConfig { imgs_per_id: 1, ..small() }).is_err());
}

#[test]
fn without_nuisances_an_identity_looks_the_same_in_every_view() {
    let cfg = SyntheticConfig { brightness: 0.0, translation: 0, background: 0.0, noise: 0.0, ..small() };
    let ds = generate_synthetic(&cfg).unwrap();
    for id in 0..cfg.num_ids {
        let imgs: Vec<_> = ds.records.iter().filter(|r| r.identity == id).collect();
        assert!(imgs.iter().map(|r| r.view).collect::<std::collections::BTreeSet<_>>().len() > 1);
        assert!(imgs.iter().all(|r| r.image == imgs[0].image), "identity {id}");
    }
    assert_ne!(ds.records[0].image, ds.records[cfg.imgs_per_id].image);
}

#[test]
fn raw_pixel_nearest_centroid_beats_chance() {
    let cfg = SyntheticConfig { num_ids: 10, num_train_ids: 10, ..SyntheticConfig::default() };
    let ds = generate_synthetic(&cfg).unwrap();
    // centroids from the first half of each identity's images, test on the rest
    let dim = 3 * cfg.height * cfg.width;
    let mut centroids = vec![vec![0.0f64; dim]; cfg.num_ids];
    let mut tests = Vec::new();
    let mut seen = vec![0usize; cfg.num_ids];
    for r in &ds.records {
        if seen[r.identity] < cfg.imgs_per_id / 2 {
            for (c, &v) in centroids[r.identity].iter_mut().zip(r.image.data()) {
                *c += v as f64;
            }
        } else {
            tests.push(r);
        }
        seen[r.identity] += 1;
    }
    let correct = tests
        .iter()
        .filter(|r| {
            let d = |c: &Vec<f64>| c.iter().zip(r.image.data()).map(|(a, &b)| (a / 6.0 - b as f64).powi(2)).sum::<f64>();
            let best = (0..cfg.num_ids).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == r.identity
        })
        .count();
    let acc = correct as f64 / tests.len() as f64;
    assert!(acc > 0.1 * 2.0, "nearest-centroid accuracy {acc}");
}

#[test]
fn manifest_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small()).unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(manifest.file_name().unwrap(), MANIFEST_NAME);
    assert_eq!(load_manifest(&manifest).unwrap(), ds);

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    assert!(load_manifest(&empty).is_err());
    assert!(load_manifest(&dir.path().join("missing.tsv")).is_err());

    let img = Tensor::from_fn(&[3, 16, 8], |k| (k % 256) as f32 / 255.0);
    write_ppm(&dir.path().join("a.ppm"), &img).unwrap();
    assert_eq!(read_ppm(&dir.path().join("a.ppm")).unwrap(), img);
    let three = dir.path().join("three.tsv");
    fs::write(&three, "a.ppm\t4\t0\ttrain\na.ppm\t4\t1\tprobe\na.ppm\t9\t2\tgallery\n").unwrap();
    let loaded = load_manifest(&three).unwrap();
    let labels: Vec<_> = loaded.records.iter().map(|r| (r.identity, r.view, r.side)).collect();
    assert_eq!(labels, vec![(4, 0, Side::Train), (4, 1, Side::Probe), (9, 2, Side::Gallery)]);

    for (text, line) in [
        ("a.ppm\t4\t0\ttrain\na.ppm\tx\t0\ttrain\n", 2),
        ("a.ppm\t4\t0\n", 1),
        ("a.ppm\t4\t0\ttrain\nb.ppm\t1\t0\ttrain\n", 2),
        ("a.ppm\t4\t0\tside\n", 1),
    ] {
        fs::write(&three, text).unwrap();
        let err = load_manifest(&three).unwrap_err().to_string();
        assert!(err.contains(&format!("three.tsv:{line}:")), "{err}");
    }
}

#[test]
fn pk_batch_examples() {
    let labels: Vec<usize> = (0..6).flat_map(|id| std::iter::repeat_n(id, 5)).collect();
    let batches = pk_batches(&labels, 4, 4, &mut rng(1)).unwrap();
    assert_eq!(batches.len(), 2);
    for b in &batches {
        assert_eq!(b.len(), 16);
        let mut hist = BTreeMap::new();
        b.iter().for_each(|&i| *hist.entry(labels[i]).or_insert(0) += 1);
        assert_eq!(hist.len(), 4);
        assert!(hist.values().all(|&c| c == 4));
    }
    // an identity with two images repeats them
    let labels = [0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
    let batches = pk_batches(&labels, 3, 4, &mut rng(2)).unwrap();
    let zeros: Vec<usize> = batches[0].iter().copied().filter(|&i| labels[i] == 0).collect();
    assert_eq!(zeros.len(), 4);
    assert!(zeros.iter().all(|&i| i < 2));
    assert!(pk_batches(&labels, 4, 4, &mut rng(2)).is_err());
}

proptest! {
    #[test]
    fn pk_epochs_match_direct_enumeration(seed in any::<u64>(), ids in 2usize..12, p in 2usize..5, k in 1usize..5) {
        prop_assume!(ids >= p);
        let labels: Vec<usize> = (0..ids).flat_map(|id| std::iter::repeat_n(id * 3 + 1, 1 + id % 4)).collect();
        let batches = pk_batches(&labels, p, k, &mut rng(seed)).unwrap();
        prop_assert_eq!(batches.clone(), pk_batches(&labels, p, k, &mut rng(seed)).unwrap());
        prop_assert_eq!(batches.len(), ids.div_ceil(p));
        let mut hist = BTreeMap::new();
        for b in &batches {
            let mut per = BTreeMap::new();
            b.iter().for_each(|&i| *per.entry(labels[i]).or_insert(0usize) += 1);
            prop_assert_eq!(per.len(), p);
            prop_assert!(per.values().all(|&c| c == k));
            for (l, c) in per {
                *hist.entry(l).or_insert(0usize) += c;
            }
        }
        // every identity appears; the top-up of the final chunk adds exactly the shortfall
        let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        prop_assert_eq!(hist.keys().copied().collect::<std::collections::BTreeSet<_>>(), distinct);
        let total: usize = hist.values().sum();
        prop_assert_eq!(total, ids.div_ceil(p) * p * k);
    }

    #[test]
    fn augmentation_preserves_shape_and_range(seed in any::<u64>(), index in 0u64..1000) {
        let mut r = rng(seed);
        let img = Tensor::from_fn(&[3, 16, 8], |_| rand::Rng::random_range(&mut r, 0.0f32..=1.0));
        for policy in [Policy::Supervised, Policy::CrossDomain, Policy::None] {
            let out = augment(&img, policy, seed, index);
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(&out, &augment(&img, policy, seed, index));
        }
    }
}

#[test]
fn augmentation_hooks_and_policy_none() {
    let img = Tensor::from_fn(&[3, 16, 8], |k| (k % 97) as f32 / 97.0);
    assert_eq!(augment(&img, Policy::None, 3, 4), img);
    let flip = AugmentOptions { force_flip: Some(true) };
    let (once, trace) = augment_with(&img, Policy::Supervised, &mut rng(0), flip);
    assert!(trace.flipped);
    assert_ne!(once, img);
    let (twice, _) = augment_with(&once, Policy::Supervised, &mut rng(0), flip);
    assert_eq!(twice, img);
}

#[test]
fn erasing_frequency_and_area() {
    let img = Tensor::full(&[3, 64, 32], 0.5f32);
    let draws = 10_000;
    let mut erased = 0;
    let mut r = rng(11);
    for _ in 0..draws {
        let (_, trace) = augment_with(&img, Policy::Supervised, &mut r, AugmentOptions::default());
        if let Some(area) = trace.erased {
            erased += 1;
            assert!((0.02..=0.2).contains(&area), "area ratio {area}");
        }
    }
    let rate = erased as f64 / draws as f64;
    assert!((rate - ERASE_PROB).abs() < 0.02, "erasing rate {rate}");
}
