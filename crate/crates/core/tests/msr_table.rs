use svtrv2::msr::{bucket_for_ratio, build_batches_from_sizes, compute_bucket, BucketId, ResizeMode, MAX_R4_UNITS};

fn expected(r: f64) -> (BucketId, (usize, usize)) {
    if r < 1.5 {
        (BucketId::R1, (64, 64))
    } else if r < 2.5 {
        (BucketId::R2, (48, 96))
    } else if r < 3.5 {
        (BucketId::R3, (40, 112))
    } else {
        (BucketId::R4, (32, 32 * (r.floor() as usize).min(MAX_R4_UNITS)))
    }
}

#[test]
fn dense_ratio_grid_matches_table() {
    for i in 1..=2000 {
        let r = i as f64 / 100.0;
        let b = bucket_for_ratio(r).unwrap();
        assert_eq!((b.id, b.target), expected(r), "R = {r}");
        let c = compute_bucket(100, i).unwrap();
        assert_eq!((c.id, c.target), expected(r), "100x{i}");
    }
}

#[test]
fn boundaries_are_left_closed() {
    assert_eq!(bucket_for_ratio(1.5).unwrap().id, BucketId::R2);
    assert_eq!(bucket_for_ratio(1.5 - 1e-12).unwrap().id, BucketId::R1);
    assert_eq!(bucket_for_ratio(2.5).unwrap().id, BucketId::R3);
    assert_eq!(bucket_for_ratio(2.5 - 1e-12).unwrap().id, BucketId::R2);
    assert_eq!(bucket_for_ratio(3.5).unwrap().id, BucketId::R4);
    assert_eq!(bucket_for_ratio(3.5 - 1e-12).unwrap().id, BucketId::R3);
    assert!(bucket_for_ratio(0.0).is_err());
    assert!(bucket_for_ratio(f64::NAN).is_err());
    assert!(compute_bucket(0, 5).is_err());
}

#[test]
fn batches_are_size_homogeneous_and_complete() {
    let sizes: Vec<(usize, usize)> = (0..97).map(|i| (20 + i % 7, 20 + (i * 13) % 200)).collect();
    let m = build_batches_from_sizes(&sizes, 8, 3, ResizeMode::Msr).unwrap();
    let mut seen: Vec<usize> = m.batches.iter().flat_map(|b| b.ids.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..97).collect::<Vec<_>>());
    for b in &m.batches {
        for &i in &b.ids {
            assert_eq!(ResizeMode::Msr.target(sizes[i].0, sizes[i].1).unwrap(), b.target);
        }
    }
    let first_partial = m
        .batches
        .iter()
        .position(|b| b.ids.len() < 8)
        .unwrap_or(m.batches.len());
    assert!(m.batches[first_partial..].iter().all(|b| b.ids.len() < 8));
    assert_eq!(m, build_batches_from_sizes(&sizes, 8, 3, ResizeMode::Msr).unwrap());
}
