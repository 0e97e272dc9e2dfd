use super::*;

#[test]
fn fiber_count_endpoints() {
    // round(vf / (pi r^2)) at the range extremes: 12.599 -> 13, 26.42 -> 26.
    assert_eq!(fiber_count(0.31, R_F_REF).unwrap(), 13);
    assert_eq!(fiber_count(0.65, R_F_REF).unwrap(), 26);
    assert_eq!(fiber_count(0.0, R_F_REF).unwrap(), 0);
}

#[test]
fn fiber_count_domain_errors() {
    assert!(fiber_count(0.8, R_F_REF).is_err());
    assert!(fiber_count(-0.1, R_F_REF).is_err());
    assert!(fiber_count(0.5, 0.0).is_err());
    assert!(fiber_count(0.5, 0.5).is_err());
}

#[test]
fn single_fiber_always_placeable() {
    for seed in 0..5 {
        let c = place_fibers(1, R_F_REF, seed).unwrap();
        assert_eq!(c.len(), 1);
    }
}

#[test]
fn placement_deterministic_and_non_overlapping() {
    let a = place_fibers(26, R_F_REF, 7).unwrap();
    let b = place_fibers(26, R_F_REF, 7).unwrap();
    assert_eq!(a.len(), 26);
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.0.to_bits(), q.0.to_bits());
        assert_eq!(p.1.to_bits(), q.1.to_bits());
    }
    let min_dist = 2.0 * R_F_REF * (1.0 - DEFAULT_OVERLAP_TOL);
    for i in 0..a.len() {
        for j in 0..i {
            let d = ((a[i].0 - a[j].0).powi(2) + (a[i].1 - a[j].1).powi(2)).sqrt();
            assert!(d >= min_dist - 1e-12, "pair ({i},{j}) at distance {d}");
        }
    }
}

#[test]
fn placement_fails_beyond_capacity() {
    match place_fibers(200, R_F_REF, 1) {
        Err(Error::PlacementFailure { n, .. }) => assert_eq!(n, 200),
        other => panic!("expected PlacementFailure, got {other:?}"),
    }
}

#[test]
fn angles_zero_mma_all_zero() {
    let a = sample_angles(5, 0.0, 42).unwrap();
    assert_eq!(a, vec![0.0; 5]);
}

#[test]
fn angles_mean_abs_matches_mma() {
    let a = sample_angles(10, 1.76, 3).unwrap();
    let mean_abs = a.iter().map(|x| x.abs()).sum::<f64>() / 10.0;
    assert!((mean_abs - 1.76).abs() < 1e-9, "mean |angle| = {mean_abs}");
}

#[test]
fn single_angle_has_mma_magnitude() {
    let a = sample_angles(1, 4.97, 11).unwrap();
    assert!((a[0].abs() - 4.97).abs() < 1e-12);
}

#[test]
fn rasterize_empty_is_uniform_background() {
    let img = rasterize(&[], &[], R_F_REF, (64, 64)).unwrap();
    assert!(img.pixels().iter().all(|&p| p == BACKGROUND_INTENSITY));
}

#[test]
fn rasterize_single_circle_area_and_center() {
    let img = rasterize(&[(0.5, 0.5)], &[0.0], R_F_REF, (64, 64)).unwrap();
    let mask: Vec<(usize, usize)> = (0..64)
        .flat_map(|i| (0..64).map(move |j| (i, j)))
        .filter(|&(i, j)| img.at(i, j) > 0.5)
        .collect();
    // Disk of pixel radius r_f * 64 = 5.664; count tracks the true area.
    let expected = std::f64::consts::PI * (R_F_REF * 64.0).powi(2);
    let count = mask.len() as f64;
    assert!(
        (count - expected).abs() / expected < 0.05,
        "count {count} vs {expected}"
    );
    let cx = mask.iter().map(|&(_, j)| j as f64 + 0.5).sum::<f64>() / count;
    let cy = mask.iter().map(|&(i, _)| i as f64 + 0.5).sum::<f64>() / count;
    assert!((cx - 32.0).abs() < 0.75 && (cy - 32.0).abs() < 0.75);
}

#[test]
fn rasterize_sixty_degrees_axis_ratio() {
    // Second moments of a solid ellipse are a^2/4 and b^2/4, so the square
    // root of the principal-moment ratio recovers a/b = 1/cos(60 deg) = 2.
    let img = rasterize(&[(0.5, 0.5)], &[60.0], 0.07, (128, 128)).unwrap();
    let mut m = [0.0f64; 5]; // count, sx, sy, then central sxx, syy, sxy
    let mut pts = Vec::new();
    for i in 0..128 {
        for j in 0..128 {
            if img.at(i, j) > 0.5 {
                pts.push((j as f64 + 0.5, i as f64 + 0.5));
            }
        }
    }
    m[0] = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m[0];
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m[0];
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    sxx /= m[0];
    syy /= m[0];
    sxy /= m[0];
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    let ratio = (l1 / l2).sqrt();
    assert!((ratio - 2.0).abs() < 0.12, "axis ratio {ratio}");
}

#[test]
fn surrogate_hits_table_extremes() {
    let d = Descriptor::new(0.65, 0.0, R_F_REF).unwrap();
    let p = surrogate_properties(&d, &[], None);
    assert!((p.yield_strength - YIELD_MAX).abs() < 1e-9);

    let d = Descriptor::new(0.31, 3.3, R_F_REF).unwrap();
    let p = surrogate_properties(&d, &[], None);
    assert!((p.yield_strength - YIELD_MIN).abs() < 1e-9);
}

#[test]
fn surrogate_reference_point_golden() {
    // Frozen from the closed form: vf_norm = 0.5, yield = 13 + 2136.8 *
    // 0.5^1.5 * exp(-0.528), elongation = 1.6e-4 + 0.01984 * 0.5^1.2 *
    // exp(-0.176).
    let d = Descriptor::new(0.48, 1.76, R_F_REF).unwrap();
    let p = surrogate_properties(&d, &[], None);
    assert!((p.yield_strength - 458.565_334_712_389_87).abs() < 1e-9);
    assert!((p.elongation - 0.007_402_188_829_220_746).abs() < 1e-12);
}

#[test]
fn surrogate_monotonic_on_grid() {
    // Strictly increasing in vf (interior grid) and strictly decreasing in
    // mma at fixed vf > VF_MIN.
    let vfs: Vec<f64> = (0..12).map(|i| 0.32 + 0.03 * i as f64 / 1.2).collect();
    let mmas: Vec<f64> = (0..10).map(|i| 0.5 * i as f64).collect();
    for &mma in &mmas {
        let mut prev = f64::NEG_INFINITY;
        for &vf in &vfs {
            let d = Descriptor::new(vf, mma.min(MMA_MAX), R_F_REF).unwrap();
            let y = surrogate_properties(&d, &[], None).yield_strength;
            assert!(y > prev, "yield not increasing in vf at mma={mma}");
            prev = y;
        }
    }
    for &vf in &vfs {
        let mut prev = f64::INFINITY;
        for &mma in &mmas {
            let d = Descriptor::new(vf, mma.min(MMA_MAX), R_F_REF).unwrap();
            let y = surrogate_properties(&d, &[], None).yield_strength;
            assert!(y < prev, "yield not decreasing in mma at vf={vf}");
            prev = y;
        }
    }
}

#[test]
fn dataset_roundtrip_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 1,
        seed: 5,
        ..Default::default()
    };
    let samples = generate_dataset(&cfg, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(samples[0].image, loaded[0].image);
    assert_eq!(samples[0].descriptor, loaded[0].descriptor);
    assert_eq!(
        samples[0].targets.yield_strength.to_bits(),
        loaded[0].targets.yield_strength.to_bits()
    );
    assert_eq!(
        samples[0].targets.elongation.to_bits(),
        loaded[0].targets.elongation.to_bits()
    );
}

#[test]
fn dataset_generation_is_byte_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 12,
        seed: 0,
        ..Default::default()
    };
    generate_dataset(&cfg, d1.path()).unwrap();
    generate_dataset(&cfg, d2.path()).unwrap();
    let m1 = std::fs::read(manifest_path(d1.path())).unwrap();
    let m2 = std::fs::read(manifest_path(d2.path())).unwrap();
    assert_eq!(m1, m2);
    let i1 = std::fs::read(d1.path().join("images/00003.pgm")).unwrap();
    let i2 = std::fs::read(d2.path().join("images/00003.pgm")).unwrap();
    assert_eq!(i1, i2);
}

#[test]
fn small_dataset_ranges_respected() {
    let cfg = GenConfig {
        count: 40,
        seed: 9,
        ..Default::default()
    };
    let samples = generate_samples(&cfg).unwrap();
    for s in &samples {
        assert!((VF_MIN..=VF_MAX).contains(&s.descriptor.vf));
        assert!((MMA_MIN..=MMA_MAX).contains(&s.descriptor.mma));
        assert!((13..=26).contains(&s.descriptor.fiber_count));
        assert!((YIELD_MIN..=YIELD_MAX).contains(&s.targets.yield_strength));
        assert!((ELONGATION_MIN..=ELONGATION_MAX).contains(&s.targets.elongation));
    }
}

#[test]
fn grid_sampling_covers_range_endpoints() {
    let cfg = GenConfig {
        count: 25,
        seed: 0,
        sampling: Sampling::Grid,
        noise: false,
        ..Default::default()
    };
    let samples = generate_samples(&cfg).unwrap();
    let vf_max = samples.iter().map(|s| s.descriptor.vf).fold(0.0, f64::max);
    let mma_max = samples.iter().map(|s| s.descriptor.mma).fold(0.0, f64::max);
    assert!((vf_max - VF_MAX).abs() < 1e-12);
    assert!((mma_max - MMA_MAX).abs() < 1e-12);
}
