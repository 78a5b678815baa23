use sisifus::global_prior::GlobalPriorConfig;
use sisifus::io::{read_plane, write_plane, PlaneFormat};
use sisifus::phantom::{generate_scene, preset_scene, Preset};
use sisifus::pipeline::{
    run_pipeline, sweep_table_csv, sweep_undersampling, InputConfig, Manifest, PipelineConfig,
    RunOptions,
};
use sisifus::{Error, Role};

fn small_config(dir: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(4, InputConfig::phantom(Preset::TwoClass, 64, 3));
    cfg.output_dir = dir.to_path_buf();
    cfg.input.bins = 64;
    cfg.input.bin_width = 0.2;
    cfg.global_prior = GlobalPriorConfig {
        epochs: 2,
        n_inits: 2,
        batch: 64,
        conv_filters: vec![4, 4],
        dense_units: vec![8],
        ..Default::default()
    };
    cfg
}

const ARTIFACTS: [&str; 9] = [
    "bilinear.fbin",
    "composite_sr.png",
    "gp.fbin",
    "gp_weight.fbin",
    "history.csv",
    "lp.fbin",
    "lr.fbin",
    "metrics.json",
    "sr.fbin",
];

fn quiet() -> impl FnMut(&str, &str) {
    |_: &str, _: &str| {}
}

#[test]
fn two_class_run_lists_all_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let first = run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    let names: Vec<&str> = first
        .manifest
        .artifacts
        .iter()
        .map(|a| a.name.as_str())
        .collect();
    assert_eq!(names, ARTIFACTS);
    for a in &first.manifest.artifacts {
        let bytes = std::fs::read(tmp.path().join(&a.name)).unwrap();
        assert_eq!(bytes.len(), a.bytes);
    }
    let metrics_first = std::fs::read(tmp.path().join("metrics.json")).unwrap();
    let manifest_first = std::fs::read(tmp.path().join("manifest.json")).unwrap();
    assert!(first.cached.is_empty());
    let c = first.metrics.comparison.as_ref().unwrap();
    assert!(c.class_accuracy.is_some() && c.global_prior.is_some());

    // fresh directory, same config: byte-identical outputs
    let other = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.output_dir = other.path().to_path_buf();
    run_pipeline(&cfg2, &RunOptions { force: true }, &mut quiet()).unwrap();
    assert_eq!(
        std::fs::read(other.path().join("metrics.json")).unwrap(),
        metrics_first
    );
    let m2 = Manifest::load(other.path()).unwrap();
    assert_eq!(m2.artifacts, first.manifest.artifacts);

    // rerun in place: everything cached, same bytes
    let again = run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    assert_eq!(again.cached.len(), again.manifest.stages.len());
    assert_eq!(
        std::fs::read(tmp.path().join("manifest.json")).unwrap(),
        manifest_first
    );
}

#[test]
fn changed_solver_settings_only_rerun_downstream_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.priors.global = false;
    run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    cfg.reconstruction.admm_iters = Some(5);
    let again = run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    assert_eq!(again.cached, ["decimate", "baseline", "local_prior"]);
    let history = std::fs::read_to_string(tmp.path().join("history.csv")).unwrap();
    assert_eq!(
        history.lines().filter(|l| !l.starts_with('#')).count(),
        1 + 5
    );

    // a tampered artifact is recomputed
    std::fs::write(tmp.path().join("lp.fbin"), b"junk").unwrap();
    let again = run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    assert!(!again.cached.contains(&"local_prior".to_string()));
    let forced = run_pipeline(&cfg, &RunOptions { force: true }, &mut quiet()).unwrap();
    assert!(forced.cached.is_empty());
}

#[test]
fn missing_factor_is_named() {
    let err = PipelineConfig::from_toml("[input]\nphantom = \"two-class\"\n").unwrap_err();
    assert!(
        matches!(&err, Error::InvalidConfig(m) if m.contains("factor")),
        "{err}"
    );
    let err = PipelineConfig::from_toml("factor = 4\n[input]\n").unwrap_err();
    assert!(err.to_string().contains("exactly one"), "{err}");
    let err = PipelineConfig::from_toml("factor = 4\nfactr = 2\n[input]\nphantom = \"rough\"\n")
        .unwrap_err();
    assert!(err.to_string().contains("factr"), "{err}");
}

#[test]
fn config_file_round_trip_and_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = preset_scene(Preset::AffineLocal, 64, 0).unwrap();
    let (tau, i) = generate_scene(&scene).unwrap();
    write_plane(&tau, tmp.path().join("tau.fbin"), PlaneFormat::Fbin).unwrap();
    write_plane(&i, tmp.path().join("i.fbin"), PlaneFormat::Fbin).unwrap();
    let text = r#"
factor = 4
output_dir = "out"

[input]
lifetime = "tau.fbin"
intensity = "i.fbin"
ground_truth = "tau.fbin"

[priors]
global = false

[reconstruction]
admm_iters = 3
"#;
    std::fs::write(tmp.path().join("run.toml"), text).unwrap();
    let cfg = PipelineConfig::load(tmp.path().join("run.toml")).unwrap();
    assert_eq!(cfg.output_dir, tmp.path().join("out"));
    let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let summary = run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    assert_eq!(summary.manifest.artifacts.len(), 7);
    let c = summary.metrics.comparison.unwrap();
    assert!(c.class_accuracy.is_none());
    // the local prior is exact on this scene
    assert!(c.local_prior.as_ref().unwrap().mae < 1e-5, "{:?}", c);
    let lr = read_plane(tmp.path().join("out/lr.fbin"), PlaneFormat::Fbin).unwrap();
    assert_eq!(lr.shape(), (16, 16));
    assert_eq!(lr.role(), Role::Lifetime);
}

#[test]
fn sweep_table_rows_follow_factors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.priors.global = false;
    let rows = sweep_undersampling(&cfg, &[2, 4], &RunOptions::default(), &mut quiet()).unwrap();
    assert_eq!(rows.iter().map(|r| r.factor).collect::<Vec<_>>(), [2, 4]);
    assert!(tmp.path().join("factor-2/manifest.json").exists());
    let csv = sweep_table_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("2,"));
    assert!(
        sweep_undersampling(&cfg, &[], &RunOptions::default(), &mut quiet())
            .unwrap()
            .is_empty()
    );
}

#[test]
fn full_sampling_reproduces_the_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.factor = 1;
    cfg.priors.global = false;
    let s = run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    let c = s.metrics.comparison.unwrap();
    // with every pixel sampled the bilinear baseline is the fitted plane itself
    let sr = c.sisifus.psnr_db.unwrap();
    let fit = c.bilinear.psnr_db.unwrap();
    assert!(sr >= fit - 0.5, "reconstruction {sr} dB vs fit {fit} dB");
}

#[test]
fn stage_errors_carry_the_stage_name() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(4, InputConfig::default());
    cfg.input.lr_lifetime = Some(tmp.path().join("missing.fbin"));
    cfg.input.intensity = Some(tmp.path().join("missing_i.fbin"));
    cfg.output_dir = tmp.path().join("out");
    let err = run_pipeline(&cfg, &RunOptions::default(), &mut quiet()).unwrap_err();
    assert!(err.to_string().starts_with("stage `input` failed"), "{err}");
}
