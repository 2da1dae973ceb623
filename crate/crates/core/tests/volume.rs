use image::{GrayImage, Luma, Rgb, RgbImage};
use motility::volume::{self, generate_synthetic, Dims4, SynthSpec, Volume4D};
use motility::ErrorKind;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        dims: [6, 16, 48, 48],
        helical: 1,
        erratic_semicircular: 1,
        corkscrew_linear: 1,
        seed,
        ..SynthSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raw_round_trip_is_the_identity(
        dims in (1usize..4, 1usize..4, 1usize..6, 1usize..6),
        seed in any::<u64>(),
    ) {
        let d = Dims4::new(dims.0, dims.1, dims.2, dims.3);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let data: Vec<f32> = (0..n as u64).map(|i| ((i ^ seed).wrapping_mul(2654435761) % 1000) as f32 / 7.0).collect();
        let vol = Volume4D::new(d, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        volume::write_raw(&vol, &path).unwrap();
        let back = volume::read_raw(&path).unwrap();
        prop_assert_eq!(back.dims(), vol.dims());
        prop_assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn synthesis_is_a_function_of_the_spec() {
    let (a, ga) = generate_synthetic(&small_spec(4)).unwrap();
    let (b, gb) = generate_synthetic(&small_spec(4)).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga, gb);
    let (c, _) = generate_synthetic(&small_spec(5)).unwrap();
    assert_ne!(a.data(), c.data());
    assert_eq!(ga.trajectories.len(), 3);
    assert!(ga.trajectories.iter().all(|t| t.points.len() == 6));
}

#[test]
fn synthetic_ground_truth_round_trips_through_csv() {
    let (_, truth) = generate_synthetic(&small_spec(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.csv");
    truth.write_csv(&path).unwrap();
    let back = volume::GroundTruth::read_csv(&path).unwrap();
    assert_eq!(back.trajectories.len(), truth.trajectories.len());
    for (a, b) in back.trajectories.iter().zip(&truth.trajectories) {
        assert_eq!(a.phenotype, b.phenotype);
        for (p, q) in a.points.iter().zip(&b.points) {
            for k in 0..4 {
                assert!((p[k] - q[k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn slice_stack_is_normalized_by_the_global_max() {
    let dir = tempfile::tempdir().unwrap();
    for t in 0..2u32 {
        for z in 0..3u32 {
            let img = GrayImage::from_fn(5, 4, |x, y| Luma([(x + y * 5 + z * 20 + t * 60) as u8]));
            img.save(dir.path().join(format!("cell_t{t:02}_z{z:03}.png")))
                .unwrap();
        }
    }
    let vol = volume::load_stack(dir.path(), Some("cell_t{t}_z{z}.png")).unwrap();
    let d = vol.dims();
    assert_eq!((d.t, d.z, d.h, d.w), (2, 3, 4, 5));
    assert!(vol.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(vol.max_intensity(), 1.0);
    // the brightest raw pixel is 4 + 3*5 + 2*20 + 60 = 119
    let expected = (2 + 5 + 20 + 60) as f32 / 119.0;
    assert!((vol.get(1, 1, 1, 2) - expected).abs() < 1e-6);
}

#[test]
fn rgb_slices_are_averaged_to_gray() {
    let dir = tempfile::tempdir().unwrap();
    for z in 0..2u32 {
        let img = RgbImage::from_fn(3, 3, |x, _| Rgb([30 * x as u8, 0, 90 + z as u8 * 60]));
        img.save(dir.path().join(format!("s_{z}_0.png"))).unwrap();
    }
    let vol = volume::load_stack(dir.path(), Some("s_{z}_{t}.png")).unwrap();
    let max = (60.0 + 150.0) / 3.0;
    assert!((vol.get(0, 0, 0, 1) - (30.0 + 90.0) / 3.0 / max).abs() < 1e-6);
    assert_eq!(vol.max_intensity(), 1.0);
}

#[test]
fn missing_slices_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (t, z) in [(0, 0), (0, 1), (1, 0)] {
        GrayImage::new(2, 2)
            .save(dir.path().join(format!("f{t}_{z}.png")))
            .unwrap();
    }
    let err = volume::load_stack(dir.path(), Some("f{t}_{z}.png")).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    let empty = tempfile::tempdir().unwrap();
    assert!(volume::load_stack(empty.path(), Some("f{t}_{z}.png")).is_err());
}
