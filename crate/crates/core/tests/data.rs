use std::fs;

use proptest::prelude::*;
use scnet_core::data::{
    attenuate, dequantize, generate_scene, load_image, make_synthetic_dataset, quantize, save_image, synth_degrade,
    write_scenes, DatasetManifest, ImageBuffer, WaterType,
};
use scnet_core::exec;

fn gray(size: usize, level: f32) -> ImageBuffer {
    ImageBuffer::from_fn(size, size, |_, _, _| level).unwrap()
}

#[test]
fn every_byte_survives_dequantize_quantize() {
    for b in 0..=255u8 {
        assert_eq!(quantize(dequantize(b)), b);
    }
    assert_eq!(quantize(-0.5), 0);
    assert_eq!(quantize(1.5), 255);
    assert_eq!(quantize(0.5 / 255.0), 1);
}

#[test]
fn png_round_trip_is_exact_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let img = generate_scene(13, 17, 3).unwrap();
    let path = dir.path().join("a.png");
    save_image(&img, &path).unwrap();
    let loaded = load_image(&path).unwrap();
    assert_eq!(loaded, img.quantized());
    save_image(&loaded, &path).unwrap();
    assert_eq!(load_image(&path).unwrap(), loaded);
}

#[test]
fn binary_ppm_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ppm");
    let mut bytes = b"P6\n2 1\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 51, 0, 102, 255]);
    fs::write(&path, bytes).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!((img.height(), img.width()), (1, 2));
    assert_eq!(img.to_bytes(), vec![255, 0, 51, 0, 102, 255]);
}

#[test]
fn unreadable_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_image(dir.path().join("missing.png")).is_err());
    let junk = dir.path().join("junk.png");
    fs::write(&junk, b"not an image").unwrap();
    assert!(load_image(&junk).is_err());
}

#[test]
fn attenuation_follows_formation_model() {
    let clean = generate_scene(8, 8, 1).unwrap();
    let water = WaterType::oceanic_blue();
    let t = water.transmission(1.7);
    let out = attenuate(&clean, t, water.ambient);
    for y in 0..8 {
        for x in 0..8 {
            for c in 0..3 {
                let want = clean.get(y, x, c) as f64 * (-water.beta[c] * 1.7).exp()
                    + water.ambient[c] * (1.0 - (-water.beta[c] * 1.7).exp());
                assert!((out.get(y, x, c) as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn red_is_attenuated_most_for_every_preset() {
    let white = gray(16, 1.0);
    for water in WaterType::presets() {
        let out = synth_degrade(&white, &water, 2.0, 0).unwrap();
        let lost: Vec<f64> = (0..3).map(|c| 1.0 - out.channel_mean(c)).collect();
        assert!(lost[0] > lost[1] && lost[0] > lost[2], "{}: {lost:?}", water.name);
    }
}

#[test]
fn invalid_water_and_depth_are_rejected() {
    let img = gray(4, 0.5);
    let mut w = WaterType::coastal_green();
    w.beta = [0.1, 0.5, 0.2];
    assert!(synth_degrade(&img, &w, 1.0, 0).is_err());
    assert!(synth_degrade(&img, &WaterType::coastal_green(), 0.0, 0).is_err());
    assert!(WaterType::preset("murky-purple").is_err());
}

fn synth_bytes(clean: &std::path::Path, out: &std::path::Path) -> (String, Vec<Vec<u8>>) {
    let m = make_synthetic_dataset(clean, &WaterType::presets(), out, 7).unwrap();
    let bytes = m.pairs.iter().map(|p| fs::read(&p.raw).unwrap()).collect();
    (m.to_text(), bytes)
}

#[test]
fn synthetic_dataset_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_scenes(&clean, 3, 24, 5).unwrap();
    let (text, bytes) = synth_bytes(&clean, &dir.path().join("a"));
    let manifest_path = dir.path().join("a/manifest.txt");
    fs::write(&manifest_path, &text).unwrap();
    let m = DatasetManifest::read(&manifest_path).unwrap();
    assert_eq!(m.len(), 9);
    for (i, pair) in m.pairs.iter().enumerate() {
        assert!(pair.raw.is_absolute() && pair.reference.is_absolute());
        let water = &WaterType::presets()[i % 3].name;
        assert!(pair
            .raw
            .file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .ends_with(&format!("_{water}.png")));
    }
    assert_eq!(m.load().unwrap().len(), 9);

    // Same seed, other directory, serial execution: identical pixels.
    exec::set_parallel(false);
    let (_, serial) = synth_bytes(&clean, &dir.path().join("b"));
    exec::set_parallel(true);
    assert_eq!(bytes, serial);
}

#[test]
fn manifest_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    fs::write(&path, "raw/a.png\tref/a.png\n\n/abs/b.png\t/abs/c.png\n").unwrap();
    let m = DatasetManifest::read(&path).unwrap();
    assert_eq!(m.pairs[0].raw, dir.path().join("raw/a.png"));
    assert_eq!(m.pairs[1].reference, std::path::PathBuf::from("/abs/c.png"));
    let (train, test) = m.split_at(1);
    assert_eq!((train.len(), test.len()), (1, 1));
    fs::write(&path, "only-one-column\n").unwrap();
    assert!(DatasetManifest::read(&path).is_err());
    fs::write(&path, "").unwrap();
    assert!(DatasetManifest::read(&path).is_err());
}

#[test]
fn reflect_pad_mirrors_without_repeating_edges() {
    let img = ImageBuffer::from_fn(3, 4, |y, x, c| (y * 10 + x + c * 100) as f32).unwrap();
    let padded = img.reflect_pad(5, 6).unwrap();
    assert_eq!(padded.get(3, 0, 0), img.get(1, 0, 0));
    assert_eq!(padded.get(4, 5, 2), img.get(0, 1, 2));
    assert_eq!(padded.crop(0, 0, 3, 4).unwrap(), img);
    assert!(img.reflect_pad(6, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn save_load_is_idempotent(h in 1usize..12, w in 1usize..12, bytes in proptest::collection::vec(any::<u8>(), 432)) {
        let img = ImageBuffer::from_bytes(h, w, &bytes[..h * w * 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        prop_assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn degradation_keeps_values_in_range(seed in 0u64..1000, depth in 0.5f64..3.0) {
        let clean = generate_scene(12, 12, seed).unwrap();
        for water in WaterType::presets() {
            let out = synth_degrade(&clean, &water, depth, seed).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deeper_water_removes_more_red(seed in 0u64..1000, d in 0.5f64..2.5) {
        let clean = generate_scene(16, 16, seed).unwrap();
        let water = WaterType::coastal_green();
        let shallow = attenuate(&clean, water.transmission(d), water.ambient);
        let deep = attenuate(&clean, water.transmission(d + 0.5), water.ambient);
        // Red is pulled toward the ambient level, which sits below every scene's red.
        prop_assert!(deep.channel_mean(0) < shallow.channel_mean(0));
    }
}
