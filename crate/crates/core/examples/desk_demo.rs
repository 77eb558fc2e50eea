//! Full synthetic run: blobs, reference MLP, AIDE fit, PGD, scoring and
//! evaluation. Artifacts go to the directory given as the first argument
//! (default `desk_out`); an optional second argument names a JSON config.
//!
//!     cargo run --example desk_demo -- /tmp/desk [config.json]

use std::path::PathBuf;
use std::time::Instant;

use mlcs::pipeline::{run_demo, PipelineConfig};

fn main() -> mlcs::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MLCS_LOG", "info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk_out".into()));
    let cfg = match std::env::args().nth(2) {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let start = Instant::now();
    let summary = run_demo(&cfg, &out)?;
    println!("test accuracy {:.4}, ASR {:.4} ({} adversarial)", summary.test_accuracy, summary.asr, summary.n_adversarial);
    println!("{:<28} {:>7} {:>7}", "detector/case", "AUC", "FPR*");
    for (k, m) in &summary.evaluation.metrics {
        println!("{k:<28} {:>7.4} {:>7.4}", m.auc, m.fpr_star);
    }
    let u = &summary.evaluation.unified["score"];
    println!("unified threshold {:.4}: mean FPR {:.4}, max {:.4}", u.threshold, u.mean.unwrap_or(f64::NAN), u.max.unwrap_or(f64::NAN));
    println!("done in {:.1?}, artifacts in {}", start.elapsed(), out.display());
    Ok(())
}
