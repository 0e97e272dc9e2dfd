use super::*;
use crate::encoders::Modality;
use crate::trainer::split_dataset;

fn batch(rows: &[Vec<f64>], modality: Modality) -> EmbeddingBatch {
    EmbeddingBatch {
        features: Tensor::from_rows(rows),
        modality,
        unit_norm: false,
    }
}

#[test]
fn identical_candidate_ranks_first_with_unit_score() {
    let cands = batch(
        &[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.6, 0.8]],
        Modality::Tabular,
    );
    let r = retrieve(&[1.0, 0.0], 11, &cands, &[10, 11, 12], 2).unwrap();
    assert_eq!(r.ranked[0].0, 11);
    assert!((r.ranked[0].1 - 1.0).abs() < 1e-12);
    assert!(r.hit);
}

#[test]
fn k_equal_to_candidate_count_always_hits() {
    let cands = batch(&[vec![0.0, 1.0], vec![1.0, 0.0]], Modality::Tabular);
    let r = retrieve(&[0.3, 0.1], 7, &cands, &[7, 8], 2).unwrap();
    assert!(r.hit);
}

#[test]
fn angle_ordering_matches_cosine_oracle() {
    // Candidates at 10, 45, 80 degrees from the query.
    let q = [1.0, 0.0];
    let mk = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
    let cands = batch(&[mk(45.0), mk(10.0), mk(80.0)], Modality::Tabular);
    let r = retrieve(&q, 1, &cands, &[0, 1, 2], 3).unwrap();
    assert_eq!(
        r.ranked.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
        vec![1, 0, 2]
    );
    for (i, deg) in [(0usize, 10.0f64), (1, 45.0), (2, 80.0)] {
        assert!((r.ranked[i].1 - deg.to_radians().cos()).abs() < 1e-12);
    }
}

#[test]
fn ties_break_by_ascending_id() {
    let cands = batch(
        &[vec![1.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]],
        Modality::Tabular,
    );
    let r = retrieve(&[1.0, 0.0], 9, &cands, &[5, 3, 9], 3).unwrap();
    // All three have cosine 1 with the query; ids decide the order.
    assert_eq!(
        r.ranked.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
        vec![3, 5, 9]
    );
}

#[test]
fn retrieval_ranking_is_scale_invariant() {
    let rows = vec![vec![0.2, 0.9], vec![0.7, 0.1], vec![0.5, 0.5]];
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|x| x * 37.5).collect())
        .collect();
    let a = retrieve(&[0.3, 0.4], 0, &batch(&rows, Modality::Tabular), &[0, 1, 2], 3).unwrap();
    let b = retrieve(&[0.3, 0.4], 0, &batch(&scaled, Modality::Tabular), &[0, 1, 2], 3).unwrap();
    let ids = |r: &RetrievalResult| r.ranked.iter().map(|(i, _)| *i).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
}

#[test]
fn empty_candidates_rejected() {
    let cands = batch(&[], Modality::Tabular);
    assert!(matches!(
        retrieve(&[1.0], 0, &cands, &[], 1),
        Err(Error::EmptyCandidates)
    ));
}

#[test]
fn accuracy_and_deviation_hand_oracle() {
    // Two queries with hand-set rankings.
    let results = vec![
        RetrievalResult {
            query_id: 1,
            ranked: vec![(1, 0.9), (2, 0.8)],
            k: 2,
            hit: true,
        },
        RetrievalResult {
            query_id: 2,
            ranked: vec![(1, 0.7), (3, 0.6)],
            k: 2,
            hit: false,
        },
    ];
    assert!((topk_accuracy(&results) - 0.5).abs() < 1e-12);
    let mut targets = BTreeMap::new();
    targets.insert(1, vec![10.0, 1.0]);
    targets.insert(2, vec![20.0, 3.0]);
    targets.insert(3, vec![40.0, 0.0]);
    let dev = property_deviation(&results, &targets).unwrap();
    // Query 1: mean(|10-10|, |20-10|)=5 ; mean(|1-1|, |3-1|)=1
    // Query 2: mean(|10-20|, |40-20|)=15 ; mean(|1-3|, |0-3|)=2.5
    assert!((dev.per_property[0] - 10.0).abs() < 1e-12);
    assert!((dev.per_property[1] - 1.75).abs() < 1e-12);
    assert!((dev.aggregate - 5.875).abs() < 1e-12);
}

#[test]
fn deviation_zero_when_only_ground_truth_retrieved() {
    let results = vec![RetrievalResult {
        query_id: 5,
        ranked: vec![(5, 1.0)],
        k: 1,
        hit: true,
    }];
    let mut targets = BTreeMap::new();
    targets.insert(5, vec![3.0, 4.0]);
    let dev = property_deviation(&results, &targets).unwrap();
    assert_eq!(dev.per_property, vec![0.0, 0.0]);
}

#[test]
fn rmse_r2_scalar_oracles() {
    assert!((rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap()).abs() < 1e-12);
    assert!((r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
    // Predicting the mean gives R^2 = 0.
    let truth = [1.0, 2.0, 4.0];
    let mean = truth.iter().sum::<f64>() / 3.0;
    assert!((r2(&[mean, mean, mean], &truth).unwrap()).abs() < 1e-12);
    // pred (1,2,3) vs true (1,2,4): rmse = sqrt(1/3), r2 = 1 - 1/ss_tot.
    let r = rmse(&[1.0, 2.0, 3.0], &truth).unwrap();
    assert!((r - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let expect = 1.0 - 1.0 / ss_tot;
    assert!((r2(&[1.0, 2.0, 3.0], &truth).unwrap() - expect).abs() < 1e-12);

    assert!(matches!(
        rmse(&[1.0], &[1.0, 2.0]),
        Err(Error::LengthMismatch(1, 2))
    ));
    assert!(matches!(
        r2(&[1.0, 2.0], &[3.0, 3.0]),
        Err(Error::ZeroVariance)
    ));
}

#[test]
fn predictor_learns_identity_probe() {
    // Features that carry the target directly must reach R^2 > 0.99.
    let n = 600;
    let ids: Vec<u64> = (0..n as u64).collect();
    let split = split_dataset(&ids, 11).unwrap();
    let mut targets = BTreeMap::new();
    let mut rows = Vec::new();
    for &id in &ids {
        let y = (id as f64) * 0.01 - 3.0;
        targets.insert(id, y);
        rows.push(vec![y; 16]);
    }
    let features = Tensor::from_rows(&rows);
    let out = train_predictor(
        &features,
        &ids,
        &targets,
        &split,
        PredictorMode::Tabular,
        &PredictorConfig::default(),
    )
    .unwrap();
    assert!(out.r2 > 0.99, "r2 = {}", out.r2);
}

#[test]
fn predictor_constant_targets_reports_nan_r2() {
    let n = 30;
    let ids: Vec<u64> = (0..n as u64).collect();
    let split = split_dataset(&ids, 3).unwrap();
    let mut targets = BTreeMap::new();
    let mut rows = Vec::new();
    for &id in &ids {
        targets.insert(id, 7.5);
        rows.push(vec![id as f64 * 0.01, 1.0]);
    }
    let features = Tensor::from_rows(&rows);
    let out = train_predictor(
        &features,
        &ids,
        &targets,
        &split,
        PredictorMode::Vision,
        &PredictorConfig {
            epochs: 5,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(out.r2.is_nan());
    assert!(out.rmse < 1e-6);
}

#[test]
fn fusion_requires_projection_width() {
    let head = PredictorHead::init(4, false, 0);
    let wide = Tensor::zeros(&[3, 8]);
    assert!(matches!(
        head.predict(&wide),
        Err(Error::ShapeMismatch { .. })
    ));
    let fused = PredictorHead::init(4, true, 0);
    assert!(fused.predict(&Tensor::zeros(&[3, 8])).is_ok());
    assert!(fused.predict(&Tensor::zeros(&[3, 4])).is_err());
}

#[test]
fn similarity_matrix_unit_diagonal_for_identical_batches() {
    let rows = vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.5, 0.5]];
    let hv = batch(&rows, Modality::Vision);
    let ht = batch(&rows, Modality::Tabular);
    let (m, order) = similarity_matrix(&hv, &ht, &[2.0, 0.0, 1.0]).unwrap();
    assert_eq!(order, vec![1, 2, 0]); // sorted by target
    for i in 0..3 {
        assert!((m.at(&[i, i]) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn similarity_matrix_matches_cosine_oracle() {
    let hv = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], Modality::Vision);
    let ht = batch(&[vec![0.6, 0.8], vec![1.0, 1.0]], Modality::Tabular);
    let (m, _) = similarity_matrix(&hv, &ht, &[0.0, 1.0]).unwrap();
    assert!((m.at(&[0, 0]) - 0.6).abs() < 1e-12);
    assert!((m.at(&[0, 1]) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    assert!((m.at(&[1, 0]) - 0.8).abs() < 1e-12);
}

#[test]
fn pca_recovers_planar_points_exactly() {
    // Points on a 2-D plane embedded in 6 dims: reconstruction error ~ 0.
    let d = 6;
    let e1: Vec<f64> = (0..d).map(|i| if i == 1 { 3.0 } else { 0.3 }).collect();
    let e2: Vec<f64> = (0..d).map(|i| if i == 4 { -2.0 } else { 0.1 }).collect();
    let mut rows = Vec::new();
    for i in 0..12 {
        let (a, b) = ((i as f64) * 0.7 - 4.0, ((i * i) % 7) as f64 - 3.0);
        rows.push(
            (0..d)
                .map(|c| 1.5 + a * e1[c] + b * e2[c])
                .collect::<Vec<f64>>(),
        );
    }
    let features = Tensor::from_rows(&rows);
    let proj = project_2d(&features).unwrap();
    for i in 0..rows.len() {
        for c in 0..d {
            let recon = proj.mean[c]
                + proj.coords.at(&[i, 0]) * proj.basis[0][c]
                + proj.coords.at(&[i, 1]) * proj.basis[1][c];
            assert!(
                (recon - rows[i][c]).abs() < 1e-8,
                "row {i} col {c}: {recon} vs {}",
                rows[i][c]
            );
        }
    }
}

#[test]
fn band_means_prefers_diagonal_for_banded_matrix() {
    let n = 40;
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            m.data_mut()[i * n + j] = 1.0 / (1.0 + i.abs_diff(j) as f64);
        }
    }
    let (near, far) = band_means(&m, 5, 30);
    assert!(near > far);
}
