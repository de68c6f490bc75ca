mod common;

use std::path::Path;

use common::*;
use hmf::embed::{
    deflate_embeddings, fold, group_orthogonality_residual, slice_project, slice_project_batch, unfold,
    EmbeddingBatch,
};
use hmf::io::{self, TripletFile};
use hmf::{generate_instance, DenseMatrix, HmfError, SourceObservation, SynthConfig};
use proptest::prelude::*;
use rand::Rng;

fn divisor_pair() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..6).prop_map(|(d, k)| (d * k, k))
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

proptest! {
    #[test]
    fn fold_unfold_are_exact_inverses((r, k) in divisor_pair(), seed in any::<u64>()) {
        let mut g = rng(seed);
        let v: Vec<f64> = (0..r).map(|_| g.random::<f64>() * 1e3 - 5e2).collect();
        let m = fold(&v, k).unwrap();
        prop_assert_eq!(m.shape(), (r / k, k));
        prop_assert_eq!(unfold(&m), v.clone());
        prop_assert_eq!(fold(&unfold(&m), k).unwrap(), m);
    }

    #[test]
    fn deflation_is_orthogonal_idempotent_and_pure(seed in any::<u64>(), k in 1usize..4) {
        let mut g = rng(seed);
        let r = 4 * k * g.random_range(1..3);
        let b = g.random_range(1..6);
        let eg = EmbeddingBatch::new(gaussian(&mut g, r, b), k).unwrap();
        let el = EmbeddingBatch::new(gaussian(&mut g, r, b), k).unwrap();
        let eg_copy = eg.clone();
        let once = deflate_embeddings(&eg, &el).unwrap();
        prop_assert!(once.ridged_columns.is_empty());
        prop_assert_eq!(&eg, &eg_copy);
        prop_assert!(group_orthogonality_residual(&eg, &once.batch).unwrap() <= 1e-10);
        let twice = deflate_embeddings(&eg, &once.batch).unwrap();
        prop_assert!(twice.batch.vectors.max_abs_diff(&once.batch.vectors) <= 1e-12);
    }

    #[test]
    fn unfolded_deflation_with_k_one_is_vector_projection(seed in any::<u64>()) {
        let mut g = rng(seed);
        let eg = gaussian(&mut g, 6, 4);
        let el = gaussian(&mut g, 6, 4);
        let out = deflate_embeddings(&EmbeddingBatch::new(eg.clone(), 1).unwrap(), &EmbeddingBatch::new(el.clone(), 1).unwrap()).unwrap();
        for j in 0..4 {
            let a = DenseMatrix::column_vector(&eg.column(j));
            let bvec = DenseMatrix::column_vector(&el.column(j));
            let expected = bvec.sub(&slice_project(&a, &bvec).unwrap()).unwrap();
            prop_assert!(DenseMatrix::column_vector(&out.batch.vectors.column(j)).max_abs_diff(&expected) < 1e-13);
        }
    }

    #[test]
    fn slice_projection_is_idempotent(seed in any::<u64>()) {
        let mut g = rng(seed);
        let d = g.random_range(2..8);
        let c = g.random_range(1..d);
        let a = gaussian(&mut g, d, c);
        let b = gaussian(&mut g, d, c);
        let p = slice_project(&a, &b).unwrap();
        prop_assert!(slice_project(&a, &p).unwrap().max_abs_diff(&p) < 1e-12);
        let batch = slice_project_batch(&[a.clone(), a], &[b.clone(), p.clone()]).unwrap();
        prop_assert_eq!(&batch[0], &p);
    }

    #[test]
    fn dense_csv_round_trips_bits(rows in 1usize..6, cols in 1usize..6, values in prop::collection::vec(finite(), 36)) {
        let m = DenseMatrix::from_fn(rows, cols, |r, c| values[r * 6 + c]);
        let back = io::parse_dense_csv(&io::format_dense_csv(&m), Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (x, y) in back.data().iter().zip(m.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn triplets_round_trip(seed in any::<u64>()) {
        let mut g = rng(seed);
        let (rows, cols) = (g.random_range(1..7), g.random_range(1..7));
        let m = gaussian(&mut g, rows, cols);
        let source = SourceObservation::masked(m, random_mask(&mut g, rows, cols, 0.4)).unwrap();
        let file = TripletFile::from_observation(&source);
        let parsed = TripletFile::parse(&file.format(), Path::new("mem"), false).unwrap();
        prop_assert_eq!(&parsed, &file);
        prop_assert_eq!(parsed.to_observation().unwrap(), source);
    }

    #[test]
    fn patches_round_trip(seed in any::<u64>(), ph in 1usize..5, pw in 1usize..5, gh in 1usize..4, gw in 1usize..4) {
        let mut g = rng(seed);
        let img = gaussian(&mut g, ph * gh, pw * gw);
        let patches = io::patchify(&img, ph, pw, false).unwrap();
        prop_assert_eq!(patches.shape(), (gh * gw, ph * pw));
        prop_assert_eq!(io::unpatchify(&patches, img.rows(), img.cols(), ph, pw).unwrap(), img);
    }

    #[test]
    fn grouping_conserves_records(seed in any::<u64>()) {
        let mut g = rng(seed);
        let rows = g.random_range(1..6);
        let cols = g.random_range(1..9);
        let groups = g.random_range(1..4);
        let assign: Vec<Option<usize>> = (0..cols).map(|_| Some(g.random_range(0..groups))).collect();
        let mask = random_mask(&mut g, rows, cols, 0.5);
        let records: Vec<(usize, usize, f64)> = mask.entries.iter().map(|&(r, c)| (r, c, g.random::<f64>())).collect();
        let out = io::group_triplets(rows, &records, &assign, groups).unwrap();
        let total: usize = out.observations.sources.iter().map(|s| s.observed_count()).sum();
        prop_assert_eq!(total, records.len());
        for (gi, map) in out.column_map.iter().enumerate() {
            prop_assert!(map.windows(2).all(|w| w[0] < w[1]));
            let s = &out.observations.sources[gi];
            for &(r, c) in &s.mask.as_ref().unwrap().entries {
                let original = records.iter().find(|x| x.0 == r && x.1 == map[c]).unwrap();
                prop_assert_eq!(s.matrix[(r, c)], original.2);
            }
        }
    }
}

#[test]
fn deflation_worked_example() {
    let eg = EmbeddingBatch::new(DenseMatrix::column_vector(&[1.0, 0.0, 0.0, 1.0]), 2).unwrap();
    let el = EmbeddingBatch::new(DenseMatrix::column_vector(&[1.0, 1.0, 1.0, 1.0]), 2).unwrap();
    let out = deflate_embeddings(&eg, &el).unwrap();
    let fg = eg.folded(0).unwrap();
    let fl = out.batch.folded(0).unwrap();
    assert!(fg.matmul_tn(&fl).unwrap().max_abs() < 1e-15);
    let already = deflate_embeddings(&eg, &out.batch).unwrap();
    assert_eq!(already.batch, out.batch);
}

#[test]
fn singular_shared_fold_uses_ridge() {
    let eg = EmbeddingBatch::new(DenseMatrix::column_vector(&[1.0, 2.0, 2.0, 4.0]), 2).unwrap();
    let el = EmbeddingBatch::new(DenseMatrix::column_vector(&[1.0, 0.0, 0.0, 1.0]), 2).unwrap();
    let out = deflate_embeddings(&eg, &el).unwrap();
    assert_eq!(out.ridged_columns, vec![0]);
    assert!(out.batch.vectors.is_finite());
    let mismatched = EmbeddingBatch::new(DenseMatrix::zeros(4, 1), 4).unwrap();
    assert!(deflate_embeddings(&eg, &mismatched).is_err());
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SynthConfig::uniform(6, 7, 3, 2, 1, 5);
    cfg.noise_scale = 0.1;
    let (obs, truth) = generate_instance(&cfg).unwrap();
    io::write_ground_truth(dir.path().join("truth"), &truth).unwrap();
    assert_eq!(io::read_ground_truth(dir.path().join("truth")).unwrap(), truth);
    io::write_factors(dir.path().join("state"), &truth.to_state()).unwrap();
    let state = io::read_factors(dir.path().join("state")).unwrap();
    assert_eq!(state, truth.to_state());
    assert!(io::read_ground_truth(dir.path().join("state")).unwrap().noise.is_empty());

    let path = dir.path().join("m.csv");
    io::write_dense_csv(&path, &obs.sources[0].matrix).unwrap();
    assert_eq!(io::read_dense_csv(&path).unwrap(), obs.sources[0].matrix);

    let full = TripletFile::from_observation(&obs.sources[1]);
    assert_eq!(full.records.len(), 42);
    assert_eq!(full.to_observation().unwrap().matrix, obs.sources[1].matrix);
}

#[test]
fn one_record_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let rec = hmf::TraceRecord {
        iter: 0,
        objective: 1.5,
        shared_err: None,
        unique_err: Some(0.25),
        orth_residual: 0.0,
        grad_norm_sq: 3.0,
    };
    io::write_trace(&path, std::slice::from_ref(&rec)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("0,1.5"));
    assert_eq!(io::read_trace(&path).unwrap(), vec![rec]);
    assert!(io::parse_trace("iter,objective\n", Path::new("mem")).is_err());
}

#[test]
fn io_errors_name_the_file() {
    match io::read_dense_csv("/nonexistent/x.csv") {
        Err(HmfError::Io { path, .. }) => assert!(path.ends_with("x.csv")),
        other => panic!("expected I/O error, got {other:?}"),
    }
    assert!(matches!(
        TripletFile::parse("2 2\n", Path::new("mem"), false),
        Err(HmfError::Parse { line: 1, .. })
    ));
}

#[test]
fn grouping_examples() {
    let records = vec![(0, 0, 1.0), (1, 1, 2.0), (0, 2, 3.0), (1, 3, 4.0)];
    let split = io::group_triplets(2, &records, &[Some(0), Some(0), Some(1), Some(1)], 2).unwrap();
    assert_eq!(split.observations.n2(), vec![2, 2]);
    assert_eq!(split.column_map, vec![vec![0, 1], vec![2, 3]]);
    assert_eq!(split.observations.sources[1].matrix, DenseMatrix::from_rows(&[[3.0, 0.0], [0.0, 4.0]]));
    assert!(split.warnings.is_empty());

    let whole = io::group_triplets(2, &records, &[Some(0); 4], 1).unwrap();
    let direct = TripletFile { rows: 2, cols: 4, records: records.clone() }.to_observation().unwrap();
    assert_eq!(whole.observations.sources[0], direct);

    let empty = io::group_triplets(2, &records, &[Some(0); 4], 2).unwrap();
    assert_eq!(empty.observations.sources[1].cols(), 0);
    assert_eq!(empty.warnings.len(), 1);

    match io::group_triplets(2, &records, &[Some(0), Some(0), None, Some(0)], 1) {
        Err(e) => assert!(e.to_string().contains("column 2")),
        Ok(_) => panic!("unassigned column accepted"),
    }
}

#[test]
fn patch_grid_order_and_padding() {
    let img = DenseMatrix::from_fn(14, 21, |r, c| (r * 21 + c) as f64);
    let p = io::patchify(&img, 7, 7, false).unwrap();
    assert_eq!(p.shape(), (6, 49));
    assert_eq!(p[(1, 0)], 7.0);
    assert_eq!(p[(3, 0)], (7 * 21) as f64);
    assert!(matches!(io::patchify(&img, 4, 7, false), Err(HmfError::Dimension { .. })));
    let padded = io::patchify(&img, 4, 7, true).unwrap();
    assert_eq!(padded.shape(), (12, 28));
    assert_eq!(io::unpatchify(&padded, 14, 21, 4, 7).unwrap(), img);
}
