mod common;

use std::fs;
use std::path::Path;

use common::tiny_config;
use gsimclr::config::RunConfig;
use gsimclr::eval::{EvalTarget, Method};
use gsimclr::pipeline::{self, Context, RunPaths, StageOutcome};
use gsimclr::scheduler::PlanMode;
use gsimclr::Error;

fn ctx(dir: &Path, mode: PlanMode, seed: u64) -> Context {
    let mut c = tiny_config();
    c.scheduler.mode = mode;
    c.seed = seed;
    Context::new(c, dir, false)
}

fn producer(e: Error) -> &'static str {
    match e {
        Error::MissingArtifact { producer, .. } => producer,
        other => panic!("expected a missing artifact, got {other}"),
    }
}

#[test]
fn both_modes_then_report() {
    let dir = tempfile::tempdir().unwrap();
    pipeline::run_pipeline(&ctx(dir.path(), PlanMode::Guided, 0)).unwrap();
    pipeline::run_pipeline(&ctx(dir.path(), PlanMode::Random, 0)).unwrap();
    let paths = RunPaths::new(dir.path());
    for f in [
        paths.config(),
        paths.dae_dir(0).join("autoencoder.json"),
        paths.dae_dir(0).join("autoencoder.bin"),
        paths.dae_dir(0).join("history.csv"),
        paths.dae_dir(0).join("latents.csv"),
        paths.cluster_dir(0).join("pseudo_labels.csv"),
        paths.cluster_dir(0).join("kmeans.json"),
        paths.plan_dir(0, PlanMode::Guided).join("plan.jsonl"),
        paths.plan_dir(0, PlanMode::Random).join("diagnostics.json"),
        paths.contrastive_dir(0, PlanMode::Guided).join("encoder.bin"),
        paths.contrastive_dir(0, PlanMode::Random).join("head.json"),
        paths.contrastive_dir(0, PlanMode::Random).join("loss.csv"),
    ] {
        assert!(f.exists(), "{} missing", f.display());
    }
    assert!(!paths.dae_dir(0).join("..").join("random").join("dae").exists());

    let report = pipeline::report(dir.path()).unwrap();
    for m in [Method::Guided, Method::RandomBaseline] {
        for t in [EvalTarget::P1, EvalTarget::P2, EvalTarget::P3, EvalTarget::Finetune] {
            assert!(report.summary.mean(m, t).is_some(), "{m:?} {t:?}");
        }
    }
    assert!(report.table.contains("| guided |") && report.table.contains("| random-baseline |"));
    assert!(report.table.contains("+0.58"));
    for f in ["comparison.md", "summary.json", "dae_loss.csv", "contrastive_loss.csv"] {
        assert!(paths.report_dir().join(f).exists(), "{f}");
    }
    let curves = fs::read_to_string(paths.report_dir().join("contrastive_loss.csv")).unwrap();
    assert!(curves.contains("mode,seed,epoch,batch,loss") && curves.contains("\nrandom,0,2,"));
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), PlanMode::Guided, 0);
    pipeline::run_pipeline(&c).unwrap();
    pipeline::report(dir.path()).unwrap();
    let hash = c.config_hash();
    let mut stack = vec![dir.path().to_path_buf()];
    let mut seen = 0;
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ["csv", "jsonl", "json", "md"].contains(&ext) {
                let text = fs::read_to_string(&p).unwrap();
                assert!(text.contains(&hash), "{} lacks the config hash", p.display());
                seen += 1;
            }
        }
    }
    assert!(seen >= 12, "{seen}");
}

#[test]
fn completed_stages_are_skipped_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), PlanMode::Guided, 0);
    pipeline::run_pipeline(&c).unwrap();
    let results = fs::read(RunPaths::new(dir.path()).results()).unwrap();
    assert_eq!(pipeline::train_dae(&c).unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline::cluster(&c).unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline::plan(&c).unwrap().0, StageOutcome::UpToDate);
    assert_eq!(pipeline::train_contrastive(&c).unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline::probe(&c).unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline::finetune(&c).unwrap(), StageOutcome::UpToDate);
    let mut forced = ctx(dir.path(), PlanMode::Guided, 0);
    forced.force = true;
    assert_eq!(pipeline::train_dae(&forced).unwrap(), StageOutcome::Ran);
    assert_eq!(pipeline::probe(&forced).unwrap(), StageOutcome::Ran);
    assert_eq!(fs::read(RunPaths::new(dir.path()).results()).unwrap(), results);

    let mut changed = tiny_config();
    changed.cluster.k = 5;
    let c2 = Context::new(changed, dir.path(), false);
    assert_eq!(pipeline::train_dae(&c2).unwrap(), StageOutcome::Ran);
}

#[test]
fn missing_upstream_artifacts_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let g = ctx(dir.path(), PlanMode::Guided, 0);
    assert_eq!(producer(pipeline::cluster(&g).unwrap_err()), "train-dae");
    assert_eq!(producer(pipeline::plan(&g).unwrap_err()), "cluster");
    assert_eq!(producer(pipeline::train_contrastive(&g).unwrap_err()), "plan");
    assert_eq!(producer(pipeline::probe(&g).unwrap_err()), "train-contrastive");
    assert_eq!(producer(pipeline::finetune(&g).unwrap_err()), "train-contrastive");
    assert_eq!(producer(pipeline::report(dir.path()).unwrap_err()), "probe");
    let r = ctx(dir.path(), PlanMode::Random, 0);
    assert_eq!(pipeline::plan(&r).unwrap().0, StageOutcome::Ran);
}

#[test]
fn single_cluster_plan_warns() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.cluster.k = 1;
    let c = Context::new(c, dir.path(), false);
    pipeline::train_dae(&c).unwrap();
    pipeline::cluster(&c).unwrap();
    let (_, warnings) = pipeline::plan(&c).unwrap();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("degenerates"), "{warnings:?}");
}

#[test]
fn report_refuses_mixed_datasets() {
    let dir = tempfile::tempdir().unwrap();
    pipeline::run_pipeline(&ctx(dir.path(), PlanMode::Random, 0)).unwrap();
    let mut other = tiny_config();
    other.dataset.synthetic_seed = 99;
    other.scheduler.mode = PlanMode::Random;
    other.seed = 1;
    pipeline::run_pipeline(&Context::new(other, dir.path(), false)).unwrap();
    assert!(matches!(pipeline::report(dir.path()), Err(Error::Incompatible(_))));
}

#[test]
fn identical_runs_write_identical_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        pipeline::run_pipeline(&ctx(d, PlanMode::Guided, 3)).unwrap();
    }
    let ra = fs::read(RunPaths::new(a.path()).results()).unwrap();
    let rb = fs::read(RunPaths::new(b.path()).results()).unwrap();
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
}

#[test]
fn sequential_execution_matches_parallel() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::run_pipeline(&ctx(a.path(), PlanMode::Guided, 0)).unwrap();
    gsimclr_tensor::exec::set_parallel(false);
    let seq = pipeline::run_pipeline(&ctx(b.path(), PlanMode::Guided, 0));
    gsimclr_tensor::exec::set_parallel(true);
    seq.unwrap();
    assert_eq!(
        fs::read(RunPaths::new(a.path()).results()).unwrap(),
        fs::read(RunPaths::new(b.path()).results()).unwrap()
    );
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = RunConfig::load(&root.join("default.ini")).unwrap();
    assert_eq!(default, {
        let mut d = RunConfig::default();
        d.dataset.path = "data/cifar-10-batches-bin".into();
        d
    });
    let smoke = RunConfig::load(&root.join("smoke.ini")).unwrap();
    assert!(smoke.problems().is_empty());
}

#[test]
fn unknown_keys_and_bad_values_are_all_listed() {
    let text =
        "seed = 1\n[dataset]\nsource = imagenet\n[eval]\ntap_points = P4\nfinetune_fraction = 2\n[cluster]\nkk = 3\n";
    let Err(Error::Config(errs)) = RunConfig::parse(text) else {
        panic!("expected config errors");
    };
    let all = errs.join("\n");
    for needle in [
        "dataset.source",
        "eval.tap_points",
        "eval.finetune_fraction",
        "cluster.kk",
    ] {
        assert!(all.contains(needle), "{needle} missing in\n{all}");
    }
}
