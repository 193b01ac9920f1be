use std::path::PathBuf;

use poseadapt::autodiff::Tensor;
use poseadapt::dataset_io::*;
use poseadapt::pose::{quat_norm, PoseLabel};
use poseadapt::scene_synth::{build_dataset, CameraIntrinsics, DomainStyle, SceneSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn parse(text: &str) -> Result<SplitManifest, DatasetError> {
    SplitManifest::parse(text, "train", PathBuf::from("/data"), "train.manifest")
}

#[test]
fn parses_example_line() {
    let m = parse("fog/train/img_0.png 1.0 2.0 3.0 1 0 0 0\n").unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m.records[0].path, "fog/train/img_0.png");
    assert_eq!(m.records[0].pose, PoseLabel::new([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]));
}

#[test]
fn negative_identity_is_canonicalised() {
    let m = parse("a.png 0 0 0 -1 0 0 0").unwrap();
    assert_eq!(m.records[0].pose.q, [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn keeps_order_and_skips_comments() {
    let mut text = String::from("# header\n\n");
    for i in 0..10 {
        text.push_str(&format!("real/train/img_{i}.png {i} 0 0 1 0 0 0  # row {i}\n"));
    }
    let m = parse(&text).unwrap();
    assert_eq!(m.len(), 10);
    for (i, r) in m.records.iter().enumerate() {
        assert_eq!(r.path, format!("real/train/img_{i}.png"));
        assert_eq!(r.pose.t[0], i as f64);
    }
}

#[test]
fn malformed_lines_report_line_numbers() {
    let bad = ["a.png 1 2 3 1 0 0", "a.png 1 2 x 1 0 0 0", "a.png 1 2 3 1 0 0 0 9", "a.png 1 inf 3 1 0 0 0"];
    for b in bad {
        let text = format!("ok.png 0 0 0 1 0 0 0\n# c\n{b}\n");
        match parse(&text) {
            Err(DatasetError::Parse { line, path, .. }) => {
                assert_eq!(line, 3, "{b}");
                assert_eq!(path, "train.manifest");
            }
            other => panic!("{b}: {other:?}"),
        }
    }
}

#[test]
fn non_unit_quaternions_are_rejected() {
    match parse("a.png 0 0 0 1 0 0 0\nb.png 0 0 0 1.01 0 0 0\n") {
        Err(DatasetError::NonUnitQuaternion { line, norm, .. }) => {
            assert_eq!(line, 2);
            assert!((norm - 1.01).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
    let m = parse("a.png 0 0 0 0 0 0 1.0005").unwrap();
    assert!((quat_norm(&m.records[0].pose.q) - 1.0).abs() < 1e-15);
}

#[test]
fn loading_twice_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.manifest");
    std::fs::write(&path, "x/test/a.png 0.1 0.2 0.3 -0.5 0.5 -0.5 0.5\nx/test/b.png 1 1 1 0 0 -1 0\n").unwrap();
    let a = SplitManifest::load(&path).unwrap();
    assert_eq!(a.split, "test");
    assert_eq!(a.root, dir.path());
    a.save(&path).unwrap();
    let b = SplitManifest::load(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.records[1].pose.q, [0.0, 0.0, 1.0, 0.0]);
}

proptest! {
    #[test]
    fn text_round_trip_is_exact(
        t in prop::array::uniform3(-1e3f64..1e3),
        q in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let n = quat_norm(&q);
        prop_assume!(n > 1e-3);
        let pose = PoseLabel::new(t, poseadapt::pose::normalize_canonical(q).unwrap());
        let m = SplitManifest::new("s", "/r", vec![PoseRecord { path: "real/s/img_0.png".into(), pose }]);
        let back = parse(&m.to_text()).unwrap();
        prop_assert_eq!(back.records[0].pose.t, pose.t);
        for k in 0..4 {
            prop_assert!((back.records[0].pose.q[k] - pose.q[k]).abs() <= 4.0 * f64::EPSILON);
        }
    }
}

#[test]
fn style_path_swaps_leading_directory() {
    let m = parse("real/train/img_4.png 0 0 0 1 0 0 0").unwrap();
    assert_eq!(m.style_path(&m.records[0], "fog"), PathBuf::from("/data/fog/train/img_4.png"));
    let bare = parse("img_4.png 0 0 0 1 0 0 0").unwrap();
    assert_eq!(bare.style_path(&bare.records[0], "night"), PathBuf::from("/data/night/img_4.png"));
}

#[test]
fn full_scale_eval_crop_offsets() {
    let p = Preprocess::FULL;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(p.resized_extent(256, 341), (256, 341));
    assert_eq!(p.window(256, 341, CropMode::Eval, &mut rng), CropWindow { top: 16, left: 58 });
    let img = RgbImage {
        height: 256,
        width: 341,
        data: (0..256 * 341 * 3).map(|i| (i % 251) as u8).collect(),
    };
    let (crop, win) = p.apply(&img, CropMode::Eval, &mut rng, "x").unwrap();
    assert_eq!(crop.shape(), &[3, 224, 224]);
    assert_eq!(win, CropWindow { top: 16, left: 58 });
    let full = img.to_tensor();
    assert_eq!(crop.data()[0], full.data()[16 * 341 + 58]);
    assert_eq!(crop.data()[224 * 224 + 5], full.data()[256 * 341 + 16 * 341 + 63]);
}

#[test]
fn square_input_at_short_side_is_identity() {
    let p = Preprocess { short_side: 72, crop: 72 };
    let img = RgbImage {
        height: 72,
        width: 72,
        data: (0..72 * 72 * 3).map(|i| (i * 7 % 256) as u8).collect(),
    };
    let (crop, win) = p.apply(&img, CropMode::Train, &mut ChaCha8Rng::seed_from_u64(1), "x").unwrap();
    assert_eq!(win, CropWindow { top: 0, left: 0 });
    assert_eq!(crop, img.to_tensor());
}

#[test]
fn train_offsets_are_uniform() {
    let p = Preprocess::FULL;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = 10_000;
    let (mut st, mut sl) = (0.0, 0.0);
    for _ in 0..draws {
        let w = p.window(256, 341, CropMode::Train, &mut rng);
        assert!(w.top <= 32 && w.left <= 117);
        st += w.top as f64;
        sl += w.left as f64;
    }
    // Discrete uniform on 0..=r: mean r/2, variance ((r+1)^2 - 1)/12.
    for (sum, r) in [(st, 32.0), (sl, 117.0)] {
        let mean = sum / draws as f64;
        let sigma = (((r + 1.0) * (r + 1.0) - 1.0) / 12.0 / draws as f64).sqrt();
        assert!((mean - r / 2.0).abs() < 3.0 * sigma, "mean {mean} vs {}", r / 2.0);
    }
}

#[test]
fn too_small_images_are_rejected() {
    let img = RgbImage { height: 60, width: 90, data: vec![0; 60 * 90 * 3] };
    let r = Preprocess::DESK.resize(&img, "small.png");
    assert!(matches!(r, Err(DatasetError::ImageTooSmall { h: 60, w: 90, min: 72, .. })));
    assert!(Preprocess { short_side: 64, crop: 72 }.validate().is_err());
}

#[test]
fn bilinear_halving_averages_pixel_pairs() {
    let img = Tensor::from_fn(&[3, 4, 6], |i| (i * 37 % 11) as f64);
    let out = bilinear_resize(&img, 2, 3);
    for c in 0..3 {
        for y in 0..2 {
            for x in 0..3 {
                let at = |yy: usize, xx: usize| img.data()[(c * 4 + yy) * 6 + xx];
                let expected = (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0;
                assert!((out.data()[(c * 2 + y) * 3 + x] - expected).abs() < 1e-12);
            }
        }
    }
    let flat = Tensor::full(&[3, 90, 120], 0.25);
    assert!(bilinear_resize(&flat, 72, 96).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn png_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b/img.png");
    let img = RgbImage {
        height: 5,
        width: 7,
        data: (0..105).map(|i| (i * 13 % 256) as u8).collect(),
    };
    save_image(&path, &img).unwrap();
    assert_eq!(load_image(&path).unwrap(), img);
    assert_eq!(RgbImage::from_tensor(&img.to_tensor()), img);
}

#[test]
fn batches_of_ten_by_four() {
    let b = batch_indices(10, 4, None).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
    let s1 = batch_indices(10, 4, Some(3)).unwrap();
    assert_eq!(s1, batch_indices(10, 4, Some(3)).unwrap());
    let mut all = s1.concat();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert!(matches!(batch_indices(10, 0, None), Err(DatasetError::BatchTooSmall(0))));
}

fn small_dataset(dir: &std::path::Path) -> SplitManifest {
    let scene = SceneSpec::generate(3, 20).unwrap();
    let styles: Vec<DomainStyle> = ["real", "fog", "night"].iter().map(|s| s.parse().unwrap()).collect();
    let built = build_dataset(&scene, &CameraIntrinsics::desk(), 6, 2, &styles, dir, 3).unwrap();
    SplitManifest::load(&built.train_manifest).unwrap()
}

#[test]
fn triplets_share_crop_window_and_label() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let p = Preprocess::DESK;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..m.len() {
        let t = make_triplet(&m, i, &p, CropMode::Train, &mut rng).unwrap();
        assert_eq!(t.label, m.records[i].pose);
        for (style, img) in [("real", &t.real), ("fog", &t.fog), ("night", &t.night)] {
            let full = p.resize(&load_image(&m.style_path(&m.records[i], style)).unwrap(), "").unwrap();
            assert_eq!(*img, p.crop_tensor(&full, t.window), "{style} crop differs");
        }
        let e = make_triplet(&m, i, &p, CropMode::Eval, &mut rng).unwrap();
        assert_eq!(e.window, CropWindow { top: 4, left: 4 });
    }
    assert!(matches!(make_triplet(&m, 99, &p, CropMode::Eval, &mut rng), Err(DatasetError::Invalid(_))));
}

#[test]
fn missing_style_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let gone = m.style_path(&m.records[2], "night");
    std::fs::remove_file(&gone).unwrap();
    let r = make_triplet(&m, 2, &Preprocess::DESK, CropMode::Eval, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(DatasetError::MissingImage(p)) if p == gone));
    assert!(matches!(m.check_files(&TRIPLET_STYLES), Err(DatasetError::MissingImage(_))));
    assert!(matches!(ImageStore::load(&m, &TRIPLET_STYLES, Preprocess::DESK), Err(DatasetError::MissingImage(_))));
}

#[test]
fn store_matches_disk_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let store = ImageStore::load(&m, &TRIPLET_STYLES, Preprocess::DESK).unwrap();
    assert_eq!(store.len(), 6);
    let a = store.make_triplet(1, CropMode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = make_triplet(&m, 1, &Preprocess::DESK, CropMode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_iterator_covers_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let store = ImageStore::load(&m, &TRIPLET_STYLES, Preprocess::DESK).unwrap();
    assert!(matches!(BatchIter::new(&store, 1, 0, CropMode::Train, true), Err(DatasetError::BatchTooSmall(1))));

    let batches: Vec<TripletBatch> = BatchIter::new(&store, 4, 9, CropMode::Train, true).unwrap().map(Result::unwrap).collect();
    assert_eq!(batches.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), vec![4, 2]);
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    seen.sort();
    assert_eq!(seen, (0..6).collect::<Vec<_>>());
    for b in &batches {
        assert_eq!(b.real.shape(), &[b.indices.len(), 3, 64, 64]);
        for (k, (&i, &w)) in b.indices.iter().zip(&b.windows).enumerate() {
            assert_eq!(b.labels[k], m.records[i].pose);
            let n = 3 * 64 * 64;
            assert_eq!(&b.night.data()[k * n..(k + 1) * n], store.crop("night", i, w).unwrap().data());
        }
    }
    let again: Vec<TripletBatch> = BatchIter::new(&store, 4, 9, CropMode::Train, true).unwrap().map(Result::unwrap).collect();
    assert_eq!(again.iter().map(|b| b.indices.clone()).collect::<Vec<_>>(), batches.iter().map(|b| b.indices.clone()).collect::<Vec<_>>());
    assert_eq!(again[0].windows, batches[0].windows);

    let eval: Vec<TripletBatch> = BatchIter::new(&store, 4, 9, CropMode::Eval, false).unwrap().map(Result::unwrap).collect();
    assert_eq!(eval[0].indices, vec![0, 1, 2, 3]);
    assert!(eval[0].windows.iter().all(|w| *w == CropWindow { top: 4, left: 4 }));
    assert_eq!(eval[0].fog, eval[0].real);
}

#[test]
fn store_from_tensors_checks_counts() {
    let imgs = vec![vec![Tensor::zeros(&[3, 72, 72]); 2]];
    assert!(ImageStore::from_tensors(&["real"], imgs.clone(), vec![PoseLabel::identity(); 3], Preprocess::DESK).is_err());
    let s = ImageStore::from_tensors(&["real"], imgs, vec![PoseLabel::identity(); 2], Preprocess::DESK).unwrap();
    assert!(matches!(s.crop("fog", 0, CropWindow { top: 0, left: 0 }), Err(DatasetError::Invalid(_))));
}
