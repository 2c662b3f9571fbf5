use alignseg::data::{
    crop_at, generate_scene, hflip, parse_pnm, random_crop, random_hflip, random_scale, read_sample, resize_labels_nearest,
    scale_sample, write_dataset, write_sample, Dataset, SceneSpec,
};
use alignseg::labels::{LabelMap, IGNORE};
use alignseg::{Error, Tensor4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::Path;

fn scene(seed: u64) -> alignseg::data::Sample {
    generate_scene(&SceneSpec {
        seed,
        ..SceneSpec::default()
    })
    .unwrap()
}

/// True when every non-background pixel lies inside some 4x4 window made
/// entirely of its own class.
fn all_regions_thick(labels: &[u8], h: usize, w: usize) -> bool {
    (0..h * w).filter(|&i| labels[i] != 0).all(|i| {
        let (y, x) = (i / w, i % w);
        let c = labels[i];
        (y.saturating_sub(3)..=y.min(h - 4)).any(|y0| {
            (x.saturating_sub(3)..=x.min(w - 4)).any(|x0| (y0..y0 + 4).all(|yy| (x0..x0 + 4).all(|xx| labels[yy * w + xx] == c)))
        })
    })
}

#[test]
fn without_bars_no_region_is_thinner_than_four_pixels() {
    for seed in 0..60 {
        let s = generate_scene(&SceneSpec {
            seed,
            thin_prob: 0.0,
            ..SceneSpec::default()
        })
        .unwrap();
        assert!(all_regions_thick(&s.labels.data, 96, 96), "seed {seed}");
    }
}

#[test]
fn bars_produce_thin_structures() {
    let thin = (0..40)
        .filter(|&seed| {
            let s = generate_scene(&SceneSpec {
                seed,
                thin_prob: 1.0,
                ..SceneSpec::default()
            })
            .unwrap();
            !all_regions_thick(&s.labels.data, 96, 96)
        })
        .count();
    assert!(thin >= 30, "only {thin} of 40 bar-only scenes contain thin parts");
}

#[test]
fn every_class_appears_over_a_thousand_seeds() {
    let mut counts = [0u64; 6];
    for seed in 0..1000 {
        let s = generate_scene(&SceneSpec {
            seed,
            height: 32,
            width: 32,
            ..SceneSpec::default()
        })
        .unwrap();
        for &y in &s.labels.data {
            counts[y as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    for (c, n) in counts.iter().enumerate() {
        assert!(*n > 0, "class {c} never appears: {counts:?}");
    }
    assert_eq!(total, 1000 * 32 * 32);
}

#[test]
fn scenes_are_valid_and_quantized() {
    for seed in 0..20 {
        let s = scene(seed);
        s.labels.validate(6).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.image.data().iter().all(|v| ((v * 255.0).round() / 255.0) == *v));
    }
}

#[test]
fn too_few_classes_is_rejected() {
    let spec = SceneSpec {
        num_classes: 1,
        ..SceneSpec::default()
    };
    assert!(generate_scene(&spec).is_err());
}

#[test]
fn augmentation_identities() {
    let s = scene(3);
    assert_eq!(scale_sample(&s, 1.0).unwrap(), s);
    assert_eq!(hflip(&hflip(&s)), s);
    let big = crop_at(&s, 80, 80, 40, 40).unwrap();
    for y in 0..40 {
        for x in 0..40 {
            let inside = y < 16 && x < 16;
            let label = big.labels.at(0, y, x);
            if inside {
                assert_eq!(label, s.labels.at(0, 80 + y, 80 + x));
            } else {
                assert_eq!(label, IGNORE);
                assert!((0..3).all(|c| big.image.at(0, c, y, x) == 0.0));
            }
        }
    }
    assert!(crop_at(&s, 0, 0, 0, 4).is_err());
}

#[test]
fn pnm_fixture_with_comments() {
    let mut bytes = b"P6\n# made by hand\n2 # width\n\t1\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 0, 0, 128, 255]);
    let p = parse_pnm(&bytes, Path::new("fixture.ppm")).unwrap();
    assert_eq!((p.width, p.height, p.channels), (2, 1, 3));
    assert_eq!(p.data, [255, 0, 0, 0, 128, 255]);

    let mut plain = b"P6\n96 96\n255\n".to_vec();
    plain.extend(std::iter::repeat(7).take(96 * 96 * 3));
    assert_eq!(parse_pnm(&plain, Path::new("x")).unwrap().width, 96);

    let pgm = b"P5 3 1 255\n\x00\x05\xff";
    let p = parse_pnm(pgm, Path::new("fixture.pgm")).unwrap();
    assert_eq!((p.channels, p.data.as_slice()), (1, &[0u8, 5, 255][..]));

    for bad in [&b"P3\n1 1\n255\n\x00"[..], b"P6\n1 1\n65535\n\x00\x00\x00", b"P6\n2 2\n255\n\x00", b"Q6"] {
        assert!(matches!(parse_pnm(bad, Path::new("bad")), Err(Error::Format { .. })));
    }
}

#[test]
fn sample_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(9);
    write_sample(dir.path(), "a", &s).unwrap();
    let back = read_sample(dir.path(), "a", 6).unwrap();
    assert_eq!(back.labels, s.labels);
    assert!(back.image.data().iter().zip(s.image.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn out_of_range_label_names_the_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = scene(10);
    s.labels.set(0, 4, 7, 200);
    write_sample(dir.path(), "bad", &s).unwrap();
    let msg = read_sample(dir.path(), "bad", 6).unwrap_err().to_string();
    assert!(msg.contains("200") && msg.contains('4') && msg.contains('7'), "{msg}");
}

#[test]
fn extent_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_sample(dir.path(), "a", &scene(1)).unwrap();
    std::fs::write(dir.path().join("labels/a.pgm"), b"P5\n2 2\n255\n\x00\x00\x00\x00").unwrap();
    assert!(read_sample(dir.path(), "a", 6).is_err());
}

#[test]
fn dataset_on_disk_equals_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        height: 32,
        width: 64,
        ..SceneSpec::default()
    };
    write_dataset(dir.path(), &spec, 77, 5, 3, false).unwrap();
    let disk = Dataset::load(dir.path()).unwrap();
    let mem = Dataset::synthetic(&spec, 77, 5, 3).unwrap();
    assert_eq!(disk.train.len(), 5);
    assert_eq!(disk.val.len(), 3);
    for (a, b) in disk.train.iter().chain(&disk.val).zip(mem.train.iter().chain(&mem.val)) {
        assert_eq!(a.checksum(), b.checksum());
    }
    let train: BTreeSet<u64> = mem.train.iter().map(|s| s.checksum()).collect();
    assert!(mem.val.iter().all(|s| !train.contains(&s.checksum())));
    assert!(write_dataset(dir.path(), &spec, 77, 5, 3, false).is_err());
    write_dataset(dir.path(), &spec, 77, 5, 3, true).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_labels_valid(seed in 0u64..10_000, crop_h in 8usize..140, crop_w in 8usize..140, aug_seed in any::<u64>()) {
        let s = generate_scene(&SceneSpec { seed, height: 64, width: 64, ..SceneSpec::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
        let scaled = random_scale(&s, (0.75, 1.75), &mut rng).unwrap();
        let flipped = random_hflip(&scaled, &mut rng);
        let out = random_crop(&flipped, (crop_h, crop_w), &mut rng).unwrap();
        prop_assert_eq!((out.height(), out.width()), (crop_h, crop_w));
        prop_assert!(out.labels.validate(6).is_ok());
        let source: BTreeSet<u8> = s.labels.data.iter().copied().collect();
        prop_assert!(out.labels.data.iter().all(|v| *v == IGNORE || source.contains(v)));
    }

    #[test]
    fn nearest_label_resize_invents_no_ids(data in prop::collection::vec(prop::sample::select(vec![0u8, 3, 4, IGNORE]), 30), ho in 1usize..40, wo in 1usize..40) {
        let lm = LabelMap::new(1, 5, 6, data.clone()).unwrap();
        let out = resize_labels_nearest(&lm, ho, wo);
        let source: BTreeSet<u8> = data.into_iter().collect();
        prop_assert!(out.data.iter().all(|v| source.contains(v)));
    }

    #[test]
    fn double_flip_is_identity(seed in 0u64..1000) {
        let s = generate_scene(&SceneSpec { seed, height: 32, width: 32, ..SceneSpec::default() }).unwrap();
        prop_assert_eq!(hflip(&hflip(&s)), s.clone());
        let t = Tensor4::<f32>::from_fn([1, 1, 2, 3], |_, _, y, x| (y * 3 + x) as f32);
        prop_assert_eq!(t.hflip().hflip(), t);
    }
}
