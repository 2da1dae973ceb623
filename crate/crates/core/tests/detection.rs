use motility::detection::{self, DetectParams, SliceView};
use motility::volume::{Dims4, Volume4D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIGMA: f64 = 1.2;

/// One-frame volume with isotropic Gaussian blobs at `(x, y, z)` centers.
fn render(dims: [usize; 3], centers: &[[f64; 3]]) -> Volume4D {
    let [zd, h, w] = dims;
    let mut vol = Volume4D::zeros(Dims4::new(1, zd, h, w)).unwrap();
    for z in 0..zd {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = centers
                    .iter()
                    .map(|c| {
                        let r2 = (x as f64 - c[0]).powi(2)
                            + (y as f64 - c[1]).powi(2)
                            + (z as f64 - c[2]).powi(2);
                        0.9 * (-r2 / (2.0 * SIGMA * SIGMA)).exp()
                    })
                    .sum();
                let i = vol.index(0, z, y, x);
                vol.data_mut()[i] = v as f32;
            }
        }
    }
    vol
}

fn noiseless() -> DetectParams {
    DetectParams {
        median_radius: 0,
        fixed_threshold: 0.1,
        ..DetectParams::default()
    }
}

#[test]
fn separated_blobs_are_found_within_half_a_voxel() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..10 {
        let mut centers: Vec<[f64; 3]> = Vec::new();
        while centers.len() < 6 {
            let c = [
                rng.random_range(6.0..58.0),
                rng.random_range(6.0..58.0),
                rng.random_range(4.0..12.0),
            ];
            if centers
                .iter()
                .all(|o| (0..3).map(|k| (o[k] - c[k]).powi(2)).sum::<f64>() > 100.0)
            {
                centers.push(c);
            }
        }
        let vol = render([16, 64, 64], &centers);
        let found = detection::detect_frame(&vol, 0, &DetectParams::default(), 1).unwrap();
        assert_eq!(found.len(), centers.len());
        for c in &centers {
            let nearest = found
                .iter()
                .map(|d| {
                    (0..3)
                        .map(|k| (d.center[k] - c[k]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.5, "blob at {c:?} missed by {nearest}");
        }
    }
}

#[test]
fn voxel_counts_are_sums_of_member_areas() {
    let vol = render(
        [12, 48, 48],
        &[[10.3, 12.7, 5.2], [30.0, 30.0, 6.6], [38.1, 9.4, 3.5]],
    );
    let params = noiseless();
    let d = vol.dims();
    let mut particles = Vec::new();
    for z in 0..d.z {
        let view = SliceView::new(d.h, d.w, vol.slice(0, z));
        let mask = detection::preprocess_slice(view, 0, z, &params);
        particles.extend(detection::extract_particles(&mask, view, &params));
    }
    let dets = detection::consolidate_3d(&particles, &params);
    assert!(dets.len() <= particles.len());
    assert_eq!(
        dets.iter().map(|d| d.voxel_count).sum::<usize>(),
        particles.iter().map(|p| p.area).sum::<usize>()
    );
    assert_eq!(dets, detection::detect_frame(&vol, 0, &params, 1).unwrap());
}

#[test]
fn detection_order_ignores_worker_count() {
    let vol = render(
        [12, 48, 48],
        &[[10.3, 12.7, 5.2], [30.0, 30.0, 6.6], [38.1, 9.4, 3.5]],
    );
    let one = detection::detect_frame(&vol, 0, &DetectParams::default(), 1).unwrap();
    for workers in [2, 5] {
        assert_eq!(
            one,
            detection::detect_frame(&vol, 0, &DetectParams::default(), workers).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn integer_shifts_move_detections_by_the_same_vector(
        x in 8.0..20.0f64, y in 8.0..20.0f64, z in 4.0..7.0f64,
        dx in 0i32..8, dy in 0i32..8, dz in 0i32..3,
    ) {
        let params = noiseless();
        let base = detection::detect_frame(&render([14, 36, 36], &[[x, y, z]]), 0, &params, 1).unwrap();
        let moved = render([14, 36, 36], &[[x + f64::from(dx), y + f64::from(dy), z + f64::from(dz)]]);
        let shifted = detection::detect_frame(&moved, 0, &params, 1).unwrap();
        prop_assert_eq!(base.len(), 1);
        prop_assert_eq!(shifted.len(), 1);
        let delta = [f64::from(dx), f64::from(dy), f64::from(dz)];
        for k in 0..3 {
            prop_assert!((shifted[0].center[k] - base[0].center[k] - delta[k]).abs() < 1e-9);
        }
    }
}
