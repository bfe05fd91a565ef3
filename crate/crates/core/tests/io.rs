use std::collections::BTreeMap;
use std::fs;

use moco_core::geometry::MotionTrace;
use moco_core::io::*;
use moco_core::nufft::NufftConfig;
use moco_core::pattern::KSpaceData;
use moco_core::simulation::{make_sampling_pattern, simulate_acquisition, PatternSpec};
use moco_core::{ComplexVolume3D, MocoError, RealVolume3D, C64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(dims: [usize; 3], seed: u64) -> ComplexVolume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexVolume3D::from_fn(dims, [1.0, 1.5, 2.0], |_, _, _| {
        C64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
    })
    .unwrap()
}

#[test]
fn complex128_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([5, 4, 3], 1);
    write_volume(&dir.path().join("vol"), &v, DType::Complex128).unwrap();
    let back = read_volume(&dir.path().join("vol")).unwrap();
    assert_eq!(back, v);
    let raw = fs::read(dir.path().join("vol.raw")).unwrap();
    assert_eq!(raw.len(), 5 * 4 * 3 * 16);
    // x-fastest little-endian layout
    assert_eq!(f64::from_le_bytes(raw[16..24].try_into().unwrap()), v.get(1, 0, 0).re);
}

#[test]
fn complex64_round_trip_of_f32_values_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([4, 4, 2], 2);
    let v32 = ComplexVolume3D::from_data(
        v.dims(),
        v.voxel_size(),
        v.data().iter().map(|c| C64::new(c.re as f32 as f64, c.im as f32 as f64)).collect(),
    )
    .unwrap();
    write_volume(&dir.path().join("a"), &v32, DType::Complex64).unwrap();
    assert_eq!(read_volume(&dir.path().join("a")).unwrap(), v32);
    let h = read_header(&dir.path().join("a")).unwrap();
    assert_eq!(h.dims, [4, 4, 2]);
    assert_eq!(h.voxel_size_mm, [1.0, 1.5, 2.0]);
    assert_eq!(h.dtype, DType::Complex64);
    assert_eq!(h.kind, PayloadKind::Image);
    assert_eq!(fs::metadata(dir.path().join("a.raw")).unwrap().len(), 4 * 4 * 2 * 8);
}

#[test]
fn non_cubic_dims_pass_through() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([8, 6, 3], 3);
    write_volume(&dir.path().join("v"), &v, DType::Complex128).unwrap();
    assert_eq!(read_header(&dir.path().join("v")).unwrap().dims, [8, 6, 3]);
}

#[test]
fn magnitude_file_is_float32() {
    let dir = tempfile::tempdir().unwrap();
    let m = RealVolume3D::new([2, 2, 2], vec![0.0, 0.5, 1.0, 2.0, 0.25, 3.0, 7.5, 0.125]).unwrap();
    write_magnitude(&dir.path().join("m"), &m, [1.0; 3]).unwrap();
    let back = read_volume(&dir.path().join("m")).unwrap();
    assert_eq!(back.magnitude().data, m.data);
    assert_eq!(read_header(&dir.path().join("m")).unwrap().dtype, DType::Float32);
}

#[test]
fn truncated_payload_and_bad_sidecar_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([4, 4, 4], 4);
    let p = dir.path().join("v");
    write_volume(&p, &v, DType::Complex64).unwrap();
    let raw = fs::read(dir.path().join("v.raw")).unwrap();
    fs::write(dir.path().join("v.raw"), &raw[..raw.len() - 8]).unwrap();
    assert!(matches!(read_volume(&p), Err(MocoError::Format(_))));

    let text = fs::read_to_string(dir.path().join("v.json")).unwrap();
    fs::write(dir.path().join("v.json"), text.replace("\"dims\": [\n    4,", "\"dims\": [\n    0,")).unwrap();
    assert!(matches!(read_header(&p), Err(MocoError::Format(_))));

    fs::write(dir.path().join("v.json"), "{ not json").unwrap();
    assert!(matches!(read_header(&p), Err(MocoError::Format(_))));
}

#[test]
fn kspace_round_trip_keeps_pattern_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([8, 8, 8], 5);
    let pat = make_sampling_pattern(v.dims(), v.voxel_size(), &PatternSpec::default()).unwrap();
    let data = simulate_acquisition(&v, &MotionTrace::identity(pat.n_lines()), &pat, 0.1, 9, &NufftConfig::default())
        .unwrap();
    write_kspace(&dir.path().join("k"), &data, DType::Complex128).unwrap();
    let back = read_kspace(&dir.path().join("k")).unwrap();
    assert_eq!(back, data);
    assert_eq!(back.noise_sigma, Some(0.1));
    let h = read_header(&dir.path().join("k")).unwrap();
    assert_eq!(h.kind, PayloadKind::Kspace);
    assert_eq!(h.dims, [pat.n_readout(), pat.n_lines(), 1]);
    // images and k-space are not interchangeable
    assert!(read_volume(&dir.path().join("k")).is_err());

    write_pattern(&dir.path().join("p.json"), &pat).unwrap();
    assert_eq!(read_pattern(&dir.path().join("p.json")).unwrap(), pat);
}

#[test]
fn kspace_sidecar_with_duplicate_lines_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([4, 4, 4], 6);
    let pat = make_sampling_pattern(v.dims(), v.voxel_size(), &PatternSpec::default()).unwrap();
    let samples = vec![C64::new(1.0, 0.0); pat.n_samples()];
    let data = KSpaceData::new(pat.clone(), samples, None).unwrap();
    let p = dir.path().join("k");
    write_kspace(&p, &data, DType::Complex64).unwrap();
    let mut h: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("k.json")).unwrap()).unwrap();
    let coords = h["pattern"]["pe_coords"].as_array_mut().unwrap();
    let first = coords[0].clone();
    coords[1] = first;
    fs::write(dir.path().join("k.json"), serde_json::to_string(&h).unwrap()).unwrap();
    assert!(read_kspace(&p).is_err());
}

#[test]
fn manifest_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("out.csv"), "x").unwrap();
    let mut m = RunManifest::new("simulate", vec!["--poses".into(), "1".into()]);
    m.outputs.insert("trace".into(), "out.csv".into());
    m.config = serde_json::json!({"accel": 2.0, "kind": "randomized"});
    m.seeds = BTreeMap::from([("motion".into(), 7)]);
    m.timings.insert("total".into(), 1.25);
    let path = dir.path().join("manifest.json");
    m.write(&path).unwrap();
    assert_eq!(RunManifest::read(&path).unwrap(), m);

    m.outputs.insert("gone".into(), "missing.raw".into());
    assert!(matches!(m.write(&path), Err(MocoError::InvalidInput(_))));
}

#[test]
fn atomic_write_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sub").join("f.txt");
    write_atomic(&p, b"one").unwrap();
    write_atomic(&p, b"two").unwrap();
    assert_eq!(fs::read(&p).unwrap(), b"two");
    let names: Vec<_> = fs::read_dir(dir.path().join("sub")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
}

#[test]
fn config_loader_reads_toml_and_json() {
    #[derive(serde::Deserialize, Debug, PartialEq)]
    struct C {
        a: u32,
        b: Vec<f64>,
    }
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "a = 3\nb = [1.0, 2.5]\n").unwrap();
    fs::write(dir.path().join("c.json"), r#"{"a": 3, "b": [1.0, 2.5]}"#).unwrap();
    let want = C { a: 3, b: vec![1.0, 2.5] };
    assert_eq!(load_config::<C>(&dir.path().join("c.toml")).unwrap(), want);
    assert_eq!(load_config::<C>(&dir.path().join("c.json")).unwrap(), want);
    fs::write(dir.path().join("bad.toml"), "a = \n").unwrap();
    assert!(matches!(load_config::<C>(&dir.path().join("bad.toml")), Err(MocoError::Format(_))));
}

#[test]
fn png_triplet_is_windowed_and_oriented() {
    let dir = tempfile::tempdir().unwrap();
    // a ramp along y: the bottom row of the axial PNG is the low-y end
    let v = ComplexVolume3D::from_fn([6, 5, 4], [1.0; 3], |_, iy, _| C64::new(iy as f64, 0.0)).unwrap();
    let (paths, window) = write_png_triplet(dir.path(), "img", &v).unwrap();
    assert_eq!(paths.len(), 3);
    assert!((window.high - 4.0).abs() < 1e-12);
    let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(dir.path().join("img_axial.png")).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (6, 5));
    let px = &buf[..info.buffer_size()];
    assert_eq!(px[0], 255, "top row holds the largest y");
    assert_eq!(px[4 * 6], 0, "bottom row holds y = 0");
    for name in ["img_sagittal.png", "img_coronal.png"] {
        assert!(dir.path().join(name).exists());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_complex128_volume_round_trips(nx in 2usize..6, ny in 2usize..6, nz in 2usize..6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume([nx, ny, nz], seed);
        write_volume(&dir.path().join("v"), &v, DType::Complex128).unwrap();
        prop_assert_eq!(read_volume(&dir.path().join("v")).unwrap(), v);
    }

    #[test]
    fn percentile_is_monotone(values in prop::collection::vec(-1e3f64..1e3, 1..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(percentile(&values, lo) <= percentile(&values, hi));
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(percentile(&values, 0.0), min);
        prop_assert_eq!(percentile(&values, 1.0), max);
    }
}
