//! The scoring pipeline step by step on a small synthetic problem: train a
//! reference MLP, fit per-layer models and protoclasses, then compare the
//! scores of in-distribution, shifted and noisy inputs.

use mlcs::pipeline::{evaluate, fit, score, synth, train_refnet, Observations, PipelineConfig, RefNet, Subject};

fn small_config() -> mlcs::Result<PipelineConfig> {
    PipelineConfig::from_json(
        r#"{ "seed": 1, "synth": { "n_train": 1600, "n_val": 400, "n_test": 400 },
             "refnet": { "sgd": { "epochs": 15 } } }"#,
    )
}

fn main() -> mlcs::Result<()> {
    let cfg = small_config()?;
    let sets = synth(&cfg)?;
    let (mlp, report) = train_refnet(&cfg, &sets["train"])?;
    println!("reference MLP: train accuracy {:.3}", report.train_accuracy);

    let net = RefNet::Mlp(mlp);
    let layers = cfg.layer_names();
    let observe = |name: &str| Observations::from_network(&net, &sets[name], &layers, None);
    let subject = Subject::Net(net.clone());
    let model = fit(&cfg, &subject, &observe("train")?, &observe("val")?)?;
    for (l, src) in model.aide.protos.source.iter().enumerate() {
        println!("protoclass {l}: {} maps ({src:?})", model.aide.protos.support[l]);
    }

    let mut rows = Vec::new();
    for name in ["test", "ood", "corrupt3"] {
        let r = score(&model, &observe(name)?)?;
        let mean = r.iter().map(|r| r.score).sum::<f64>() / r.len() as f64;
        println!("{name:<9} mean score {mean:.4}");
        rows.extend(r);
    }
    let ev = evaluate(&rows, &cfg.eval)?;
    for case in ["misclassification", "ood", "corrupt3"] {
        let m = ev.get("score", case).expect("case present");
        println!("score/{case:<18} AUC {:.4}  FPR* {:.4}", m.auc, m.fpr_star);
    }
    Ok(())
}
