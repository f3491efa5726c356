use std::path::Path;

use semenet::imageproc::io::save_png_gray;
use semenet::imageproc::GrayImage;
use semenet::nn::presets::{staged, StagedOptions};
use semenet::nn::{build_model, preset, Init, Model};
use semenet::pipeline::cascade::CascadeStep;
use semenet::pipeline::manifest::split_counts;
use semenet::pipeline::synthetic::{background, token_glyph, SplitCounts};
use semenet::pipeline::{
    cascade_predict, generate_synthetic, ingest, split, swap_token, synthesize, Cascade, Manifest, Split, Stage,
    SyntheticSpec, TokenSpec,
};

fn write_tree(root: &Path, classes: &[&str], per_class: usize) {
    for (c, name) in classes.iter().enumerate() {
        std::fs::create_dir_all(root.join(name)).unwrap();
        for i in 0..per_class {
            let img = GrayImage::filled(8, 8, (c * 40 + i) as u8);
            save_png_gray(&img, &root.join(name).join(format!("img{i}.png"))).unwrap();
        }
    }
}

#[test]
fn ingest_walks_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &["a", "b", "c"], 2);
    let (m, bad) = ingest(dir.path(), false).unwrap();
    assert!(bad.is_empty());
    assert_eq!(m.records.len(), 6);
    assert_eq!(m.class_names(), vec!["a", "b", "c"]);
    // Same file names in different classes are distinct records.
    assert_eq!(m.records.iter().filter(|r| r.path.ends_with("img0.png")).count(), 3);
    assert!(m.records.iter().all(|r| r.split.is_none()));
}

#[test]
fn ingest_rejects_empty_and_corrupt_inputs() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &["a"], 2);
    std::fs::create_dir_all(dir.path().join("empty")).unwrap();
    assert!(ingest(dir.path(), false).is_err());
    std::fs::remove_dir(dir.path().join("empty")).unwrap();

    std::fs::write(dir.path().join("a").join("broken.png"), b"not an image").unwrap();
    assert!(ingest(dir.path(), false).is_err());
    let (m, bad) = ingest(dir.path(), true).unwrap();
    assert_eq!(m.records.len(), 2);
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].path, "a/broken.png");

    let none = tempfile::tempdir().unwrap();
    assert!(ingest(none.path(), false).is_err());
    assert!(ingest(&none.path().join("missing"), false).is_err());
}

fn manifest_of(per_class: usize) -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &["x", "y"], per_class);
    let m = ingest(dir.path(), false).unwrap().0;
    (dir, m)
}

#[test]
fn stratified_split_counts() {
    let (_dir, m) = manifest_of(10);
    let s = split(&m, [0.8, 0.1, 0.1], 3).unwrap();
    for class in ["x", "y"] {
        for (sp, want) in Split::ALL.iter().zip([8, 1, 1]) {
            let n = s.records.iter().filter(|r| r.label == class && r.split == Some(*sp)).count();
            assert_eq!(n, want);
        }
    }
    let all_train = split(&m, [1.0, 0.0, 0.0], 3).unwrap();
    assert!(all_train.records.iter().all(|r| r.split == Some(Split::Train)));
    assert_eq!(split(&m, [0.8, 0.1, 0.1], 3).unwrap(), s);
    assert_ne!(split(&m, [0.8, 0.1, 0.1], 4).unwrap(), s);
    assert!(split(&m, [0.5, 0.1, 0.1], 3).is_err());
    assert_eq!(split_counts(7, [0.8, 0.1, 0.1]), [5, 1, 1]);
    assert_eq!(split_counts(100, [0.8, 0.1, 0.1]), [80, 10, 10]);
}

#[test]
fn split_fails_when_a_class_is_too_small() {
    let (_dir, m) = manifest_of(2);
    assert!(split(&m, [0.8, 0.1, 0.1], 0).is_err());
}

fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { size: 32, seed, counts: SplitCounts { train: 6, validation: 2, test: 2 }, ..SyntheticSpec::default() }
}

#[test]
fn synthetic_generation_is_deterministic() {
    assert_eq!(synthesize(&tiny_spec(1)).unwrap(), synthesize(&tiny_spec(1)).unwrap());
    assert_ne!(synthesize(&tiny_spec(1)).unwrap(), synthesize(&tiny_spec(2)).unwrap());
}

#[test]
fn synthetic_images_differ_only_inside_the_lungs() {
    let set = synthesize(&tiny_spec(5)).unwrap();
    let bg = background(32);
    for (_, s) in &set.samples {
        let mask = s.mask.as_ref().unwrap();
        assert!(mask.count() > 0);
        for y in 0..32 {
            for x in 0..32 {
                if !mask.get(x, y) {
                    assert_eq!(s.image.get(x, y), bg.get(x, y), "{} at ({x}, {y})", s.id);
                }
            }
        }
    }
}

#[test]
fn tokens_identify_the_class() {
    let token = TokenSpec::default();
    let spec = SyntheticSpec { size: 64, token: Some(token.clone()), ..tiny_spec(8) };
    let set = synthesize(&spec).unwrap();
    let k = set.class_names.len();
    let glyphs: Vec<Vec<bool>> = (0..k).map(|c| token_glyph(c, token.size)).collect();
    for a in 0..k {
        for b in a + 1..k {
            assert_ne!(glyphs[a], glyphs[b]);
        }
    }
    let read = |img: &GrayImage| -> Vec<bool> {
        let r = token.rect();
        (0..r.height).flat_map(|dy| (0..r.width).map(move |dx| (dx, dy))).map(|(dx, dy)| img.get(r.x + dx, r.y + dy) > 127).collect()
    };
    // A classifier that only looks at the token pixels is always right.
    let classify = |img: &GrayImage| glyphs.iter().position(|g| *g == read(img)).expect("known glyph");
    for (_, s) in &set.samples {
        assert_eq!(classify(&s.image), s.label);
        let swapped = swap_token(&s.image, &token, (s.label + 1) % k);
        assert_eq!(classify(&swapped), (s.label + 1) % k);
    }
    let bad = SyntheticSpec { size: 64, token: Some(TokenSpec { size: 10, x: 10, y: 12 }), ..tiny_spec(8) };
    assert!(synthesize(&bad).is_err());
}

#[test]
fn generated_tree_round_trips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(3);
    let manifest = generate_synthetic(&spec, dir.path()).unwrap();
    assert!(dir.path().join("manifest.csv").is_file());
    let loaded = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded.records, manifest.records);
    let set = synthesize(&spec).unwrap();
    for sp in Split::ALL {
        let from_disk = loaded.load_split(sp).unwrap();
        let in_memory = set.split(sp);
        assert_eq!(from_disk.labels(), in_memory.labels());
        for (a, b) in from_disk.samples.iter().zip(&in_memory.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }
}

/// A classifier whose output ignores its input: every logit is the bias.
fn constant_classifier(classes: usize, winner: usize) -> Model<f32> {
    let cfg = staged(&StagedOptions { size: 16, ..StagedOptions::seme(classes) }).unwrap();
    let mut m: Model<f32> = build_model(&cfg, Init::HeUniform, 0).unwrap();
    m.store_mut().get_mut("fc.weight").unwrap().data_mut().fill(0.0);
    let b = m.store_mut().get_mut("fc.bias").unwrap().data_mut();
    b.fill(0.0);
    b[winner] = 2.0;
    m
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn cascade_routes_only_the_viral_argmax() {
    let stage1_names = names(&["bacterial", "normal", "viral"]);
    let stage2 = Stage::new(constant_classifier(2, 0), names(&["covid-like", "other-viral"])).unwrap();
    let img = GrayImage::filled(16, 16, 60);

    let routed = Cascade::new(Stage::new(constant_classifier(3, 2), stage1_names.clone()).unwrap(), stage2.clone(), None, 0.5, "viral").unwrap();
    let r = cascade_predict(&routed, &img).unwrap();
    assert_eq!(r.log, vec![CascadeStep::Stage1, CascadeStep::Stage2]);
    assert_eq!(r.final_label, "covid-like");
    let leaves = r.leaf_probabilities.unwrap();
    assert_eq!(leaves.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), vec!["bacterial", "normal", "covid-like", "other-viral"]);
    assert!((leaves.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-6);

    let stopped = Cascade::new(Stage::new(constant_classifier(3, 1), stage1_names.clone()).unwrap(), stage2.clone(), None, 0.5, "viral").unwrap();
    let r = cascade_predict(&stopped, &img).unwrap();
    assert_eq!(r.log, vec![CascadeStep::Stage1]);
    assert_eq!(r.final_label, "normal");
    assert!(r.stage2.is_none());

    let unet: Model<f32> = build_model(&preset("unet-toy", 1).unwrap(), Init::HeUniform, 0).unwrap();
    let masked = Cascade::new(Stage::new(constant_classifier(3, 2), stage1_names.clone()).unwrap(), stage2.clone(), Some(unet), 0.5, "viral").unwrap();
    assert_eq!(cascade_predict(&masked, &img).unwrap().log, vec![CascadeStep::Stage1, CascadeStep::Mask, CascadeStep::Stage2]);

    assert!(Cascade::new(Stage::new(constant_classifier(3, 2), stage1_names).unwrap(), stage2.clone(), None, 0.5, "fungal").is_err());
    assert!(Stage::new(constant_classifier(3, 0), names(&["a", "b"])).is_err());
}
