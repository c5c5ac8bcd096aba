use std::fs;

use atrous::dataset::Manifest;
use atrous::synth::{generate, write_dataset, ClassMenu, CLASS_NAMES, NUM_CLASSES, RING};

#[test]
fn files_are_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), 9, 6, 33, &ClassMenu::default()).unwrap();
    write_dataset(b.path(), 9, 6, 33, &ClassMenu::default()).unwrap();
    for rel in ["train.txt", "val.txt", "all.txt", "images/00003.ppm", "labels/00005.pgm"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn split_sizes_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(dir.path(), 1, 10, 17, &ClassMenu::default()).unwrap();
    assert_eq!((ds.train.len(), ds.val.len()), (8, 2));
    let train = Manifest::load(dir.path().join("train.txt")).unwrap();
    assert_eq!(train.entries, ds.train.entries);
    let samples = train.load_samples().unwrap();
    assert_eq!(samples[0].image.shape(), [1, 3, 17, 17]);
}

#[test]
fn zero_count_gives_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(dir.path(), 1, 0, 65, &ClassMenu::default()).unwrap();
    assert!(ds.train.is_empty() && ds.val.is_empty());
    assert!(Manifest::load(dir.path().join("val.txt")).unwrap().is_empty());
}

#[test]
fn every_class_appears_and_ring_is_rare() {
    let mut pixels = [0usize; NUM_CLASSES];
    let mut images_with = [0usize; NUM_CLASSES];
    let data = generate(0, 500, 65, &ClassMenu::default());
    for (_, label) in &data {
        for &l in &label.data {
            pixels[l as usize] += 1;
        }
        for c in label.present_classes() {
            images_with[c as usize] += 1;
        }
    }
    let total: usize = pixels.iter().sum();
    let share = |c: usize| pixels[c] as f64 / total as f64;
    for c in 0..NUM_CLASSES {
        assert!(share(c) > 0.01, "{} covers {:.4}", CLASS_NAMES[c], share(c));
    }
    let ring = RING as usize;
    for c in 1..NUM_CLASSES {
        if c != ring {
            assert!(share(ring) < share(c), "ring is not the rarest shape class");
        }
    }
    // images containing a ring: roughly 1 - (1 - 0.4/4.4)^2.5 on average
    assert!((50..200).contains(&images_with[ring]), "{}", images_with[ring]);
}
