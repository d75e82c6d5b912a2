use std::fs;
use std::path::Path;

use vitsig::dataset::{Dataset, Sample};
use vitsig::pipeline::{
    accuracy_from_posteriors, run_stage, Layout, PipelineError, Report, RunConfig, Stage, SIGNATURES,
};
use vitsig::tensor::Tensor;

fn tiny(out: &Path) -> RunConfig {
    let text = format!(
        "seed = 5
out = {}
image_side = 16
patch_side = 8
depth = 2
heads = 2
embed_dim = 16
mlp_hidden = 32
train_per_class = 3
eval_per_class = 4
max_epochs = 2
batch_size = 8
attacks = fgsm:0.05, pgd:0.01:0.005:3, cw:0.0001:0:5:0.01
bins = 20
",
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

fn report(layout: &Layout) -> Report {
    serde_json::from_str(&fs::read_to_string(layout.report_dir().join("report.json")).unwrap()).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn tiny_run_writes_a_complete_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(&cfg, Stage::All).unwrap();
    let layout = Layout::new(dir.path());

    let r = report(&layout);
    assert_eq!(r.clean.count, 40);
    assert_eq!(r.clean.cka_batches, 10);
    assert_eq!(r.clean.cka_leftover, 0);
    assert_eq!(r.clean.accuracy, r.clean_accuracy_from_posteriors);
    assert_eq!(r.attacks.len(), 3);
    assert!(r.attacks.iter().all(|a| a.status == "ok"));

    let seps = r.separability.as_ref().unwrap();
    assert_eq!(seps.len(), 3 * SIGNATURES.len());
    for s in seps {
        assert!((0.0..=1.0 + 1e-9).contains(&s.bc), "{} {}: {}", s.attack, s.signature, s.bc);
        let refined = matches!(s.signature.as_str(), "s_ap" | "s_cka");
        assert_eq!(!s.refinement.is_empty(), refined, "{}", s.signature);
        for f in &s.refinement {
            assert!((0.0..=1.0 + 1e-9).contains(&f.bc));
        }
    }
    assert_eq!(r.trends.as_ref().unwrap().len(), SIGNATURES.len());

    assert_eq!(
        header(&layout.attack_dir("fgsm-eps0.05").join("manifest.csv")),
        "source_file,label,family,hyperparameters,success,clean_prediction,prediction,linf,l2,iterations"
    );
    assert!(header(&layout.signatures_dir().join("clean.csv")).starts_with("sample_id,attack,fr,ph,ad_b0h0,"));
    assert_eq!(
        header(&layout.report_dir().join("separability.csv")),
        "attack,signature,bc,clean_mean,attacked_mean,refined_bc,selected,best_unit,heldout_bc,heldout_summary_bc,heldout_selected"
    );
    for sig in SIGNATURES {
        let dir = layout.compare_dir("pgd-eps0.01");
        assert!(dir.join(format!("{sig}.json")).is_file());
        let hist = fs::read_to_string(dir.join(format!("{sig}_hist.csv"))).unwrap();
        assert_eq!(hist.lines().count(), 1 + 20);
    }
    for set in ["clean", "fgsm-eps0.05", "pgd-eps0.01", "cw-c0.0001"] {
        for ext in ["csv", "json"] {
            assert!(layout.signatures_dir().join(format!("{set}.{ext}")).is_file(), "{set}.{ext}");
        }
        assert!(layout.cka_dir().join(format!("{set}.csv")).is_file());
        assert!(layout.cka_dir().join(format!("{set}_d.json")).is_file(), "{set}_d.json");
        assert!(layout.cka_dir().join(format!("{set}_d.vtf")).is_file(), "{set}_d.vtf");
    }
    let config = fs::read_to_string(layout.config_file()).unwrap();
    assert!(!config.contains("out ="));
    assert_eq!(RunConfig::parse(&config).unwrap(), RunConfig { out: "run".into(), phi: Some(16), ..cfg });
}

#[test]
fn attacked_images_respect_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for stage in [Stage::GenData, Stage::Train, Stage::Attack] {
        run_stage(&cfg, stage).unwrap();
    }
    let layout = Layout::new(dir.path());
    let clean = Dataset::load(&layout.eval_dir()).unwrap();
    for (tag, eps) in [("fgsm-eps0.05", 0.05), ("pgd-eps0.01", 0.01)] {
        let adv = Dataset::load(&layout.attack_dir(tag)).unwrap();
        assert_eq!(adv.len(), clean.len());
        for (a, c) in adv.samples.iter().zip(&clean.samples) {
            assert_eq!(a.id, c.id);
            assert_eq!(a.label, c.label);
            assert!(a.image.max_abs_diff(&c.image) <= eps + 1e-9);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn runs_are_byte_identical_across_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_stage(&tiny(a.path()), Stage::All).unwrap();
    run_stage(&tiny(b.path()), Stage::All).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta.len(), tb.len());
    for ((pa, da), (pb, db)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(da == db, "{pa} differs");
    }
}

#[test]
fn seed_changes_the_bundle() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_stage(&tiny(a.path()), Stage::GenData).unwrap();
    let other = RunConfig { seed: 6, ..tiny(b.path()) };
    run_stage(&other, Stage::GenData).unwrap();
    let la = Dataset::load(&Layout::new(a.path()).eval_dir()).unwrap();
    let lb = Dataset::load(&Layout::new(b.path()).eval_dir()).unwrap();
    assert_ne!(la.samples[0].image, lb.samples[0].image);
}

#[test]
fn empty_grid_reports_clean_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { attacks: Vec::new(), ..tiny(dir.path()) };
    run_stage(&cfg, Stage::All).unwrap();
    let r = report(&Layout::new(dir.path()));
    assert!(r.attacks.is_empty());
    assert!(r.separability.is_none());
    assert!(r.trends.is_none());
    assert_eq!(r.clean.count, 40);
}

#[test]
fn rerunning_report_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(&cfg, Stage::All).unwrap();
    let path = Layout::new(dir.path()).report_dir().join("report.json");
    let before = fs::read(&path).unwrap();
    run_stage(&cfg, Stage::Compare).unwrap();
    run_stage(&cfg, Stage::Report).unwrap();
    assert_eq!(before, fs::read(&path).unwrap());
}

#[test]
fn tampered_posteriors_are_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { attacks: Vec::new(), ..tiny(dir.path()) };
    run_stage(&cfg, Stage::All).unwrap();
    let layout = Layout::new(dir.path());
    let path = layout.signatures_dir().join("clean_posteriors.csv");
    let (correct, n) = accuracy_from_posteriors(&path).unwrap();
    // make every row predict its label, or none of them
    let all_right = correct < n;
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let label: usize = f[1].parse().unwrap();
        let k = f.len() - 2;
        let hot = if all_right { label } else { (label + 1) % k };
        let p: Vec<&str> = (0..k).map(|i| if i == hot { "1" } else { "0" }).collect();
        out.push_str(&format!("{},{},{}\n", f[0], f[1], p.join(",")));
    }
    fs::write(&path, out).unwrap();
    let err = run_stage(&cfg, Stage::Report).unwrap_err();
    assert!(matches!(err, PipelineError::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let cfg = RunConfig { phi: Some(99), ..tiny(&out) };
    let err = run_stage(&cfg, Stage::All).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!out.exists());
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(&tiny(dir.path()), Stage::Train).unwrap_err();
    assert!(matches!(err, PipelineError::Data(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn external_dataset_with_bad_pixels_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let mut pixels = vec![0.5; 3 * 16 * 16];
    pixels[7] = 1.5;
    Dataset {
        samples: vec![Sample {
            id: "x".into(),
            image: Tensor::new(vec![3, 16, 16], pixels).unwrap(),
            label: 0,
        }],
    }
    .save(&data_dir)
    .unwrap();
    let mut cfg = tiny(&dir.path().join("bundle"));
    cfg.set("eval_data", data_dir.to_str().unwrap()).unwrap();
    let err = run_stage(&cfg, Stage::GenData).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
