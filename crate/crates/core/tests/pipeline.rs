use std::fs;
use std::path::{Path, PathBuf};

use nightvis::config::RunConfig;
use nightvis::experiment::{run_experiment, SUMMARY_JSON, TIMINGS_JSON};

fn tiny() -> RunConfig {
    RunConfig::read(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json")).unwrap()
}

fn outputs(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_str().unwrap().to_owned();
            if p.is_dir() {
                stack.push(p);
            } else if name != TIMINGS_JSON && name != SUMMARY_JSON {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_with_threads(cfg: &RunConfig, root: &Path, threads: usize) {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| run_experiment(cfg, root))
        .unwrap();
}

#[test]
fn experiment_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = tiny();
    run_with_threads(&cfg, &a, 1);
    run_with_threads(&cfg, &b, 3);
    let (fa, fb) = (outputs(&a), outputs(&b));
    assert!(fa.len() > 50);
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in fa.iter().zip(&fb) {
        assert!(x.1 == y.1, "{} differs", x.0.display());
    }
}

#[test]
fn experiment_reports_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let cfg = tiny();
    let first = run_experiment(&cfg, &root).unwrap();
    let sizes: Vec<usize> = first.diffusion.sweep.iter().map(|r| r.size).collect();
    assert_eq!(sizes, cfg.sweep_sizes);
    assert_eq!(first.baseline.sweep.len(), 1);
    assert_eq!(first.diffusion.report.rows.len(), 4);
    let cov: Vec<f64> = first.diffusion.coverage.iter().map(|r| r.pooled).collect();
    assert_eq!(cov[0], 0.0);
    assert!(cov.windows(2).all(|w| w[0] <= w[1]), "{cov:?}");
    let c = &first.summary.checks;
    assert_eq!(c.ensemble_size, cfg.ensemble_size);
    assert_eq!(c.rmse_single, first.diffusion.sweep[0].rmse);
    assert!(first.summary.timings.contains_key("train_diffusion"));

    let before = outputs(&root);
    // a second call finds every stage complete and only rescores
    let second = run_experiment(&cfg, &root).unwrap();
    assert_eq!(outputs(&root), before);
    assert_eq!(second.summary.checks, first.summary.checks);

    // losing the last ensemble resumes just that tile
    let preds = cfg.paths.under(&root).predictions_dir;
    let mut tiles: Vec<PathBuf> = fs::read_dir(&preds).unwrap().map(|e| e.unwrap().path()).collect();
    tiles.sort();
    fs::remove_dir_all(tiles.last().unwrap()).unwrap();
    run_experiment(&cfg, &root).unwrap();
    assert_eq!(outputs(&root), before);
}
