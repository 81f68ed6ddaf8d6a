use std::sync::Arc;

use hierflow::data::{
    generate_synthetic, load_panel, read_sample_paths, write_ensemble, write_panel, write_synthetic, CovariateSource,
    Family, SyntheticSidecar, SyntheticSpec,
};
use hierflow::reconcile::{ForecastEnsemble, SamplePaths};

#[test]
fn synthetic_files_reload_bit_exactly() {
    for family in [Family::GaussianAr1, Family::SeasonalSine, Family::HeavyTailAr1] {
        let spec = SyntheticSpec {
            depth: 2,
            branching: 3,
            length: 90,
            family,
            seed: 21,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(&data, dir.path()).unwrap();

        let loaded = load_panel(&dir.path().join("hierarchy.csv"), &dir.path().join("panel.csv"), spec.period).unwrap();
        let (a, b) = (&data.panel, &loaded.panel);
        assert_eq!(a.hierarchy.ids(), b.hierarchy.ids());
        assert_eq!(a.timestamps, b.timestamps);
        assert_eq!(a.labels, b.labels);
        let bits = |m: &hierflow::nalgebra::DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.values), bits(&b.values), "{family:?}");
        assert_eq!(bits(&a.covariates), bits(&b.covariates));
        assert_eq!(
            loaded.covariates,
            CovariateSource::Calendar {
                period: 12,
                scale: 90.0
            }
        );
        assert!(loaded.max_coherency_error <= 1e-9);

        let sidecar: SyntheticSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("synthetic.json")).unwrap()).unwrap();
        assert_eq!(sidecar, data.sidecar);
        assert_eq!(sidecar.leaves.len(), 9);
    }
}

#[test]
fn panel_with_covariates_round_trips() {
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(&data, dir.path()).unwrap();
    // give every series its own copy of the calendar columns, series-major
    let shared = &data.panel.covariates;
    let per_series = hierflow::nalgebra::DMatrix::from_fn(shared.nrows(), 3 * 7, |t, k| shared[(t, k % 3)]);
    let mut panel = data.panel.clone();
    panel.covariates = per_series;
    let path = dir.path().join("with_cov.csv");
    write_panel(&panel, true, std::fs::File::create(&path).unwrap()).unwrap();
    let loaded = load_panel(&dir.path().join("hierarchy.csv"), &path, 12).unwrap();
    assert_eq!(loaded.covariates, CovariateSource::External);
    assert_eq!(loaded.panel.covariates.ncols(), 3 * 7);
    for t in [0, 57, 199] {
        let row = loaded.panel.covariate_row(t);
        for i in 0..7 {
            assert_eq!(&row[3 * i..3 * i + 3], data.panel.covariate_row(t).as_slice());
        }
    }
    assert_eq!(loaded.panel.values, data.panel.values);
}

#[test]
fn ensemble_csv_round_trips() {
    let tree = Arc::new(SyntheticSpec::default().tree().unwrap());
    let mut paths = SamplePaths::zeros(3, 4, tree.n());
    for s in 0..3 {
        for t in 0..4 {
            let bottom: Vec<f64> = (0..4).map(|j| (s * 31 + t * 7 + j) as f64 / 3.0 + 1e-7).collect();
            paths.get_mut(s, t).copy_from_slice(&tree.aggregate(&bottom).unwrap());
        }
    }
    let ens = ForecastEnsemble {
        paths,
        hierarchy: Arc::clone(&tree),
        timestamps: (0..4).map(|t| format!("2024-01-0{}", t + 1)).collect(),
    };
    let mut buf = Vec::new();
    write_ensemble(&ens, &mut buf).unwrap();
    let back = read_sample_paths(&tree, buf.as_slice()).unwrap();
    assert_eq!(back.data, ens.paths.data);

    let text = String::from_utf8(buf).unwrap();
    let truncated: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
    let err = read_sample_paths(&tree, truncated.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("missing ensemble cell"), "{err}");
}
