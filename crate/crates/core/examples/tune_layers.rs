//! Grid search over (kappa, C) for each analyzed layer, ranked by top-3
//! accuracy of the layer estimates on validation data. Writes tuning.csv.

use mlcs::pipeline::{synth, train_refnet, tune, tuning_csv, Observations, PipelineConfig, RefNet, Subject};

fn main() -> mlcs::Result<()> {
    let cfg = PipelineConfig::from_json(
        r#"{ "synth": { "n_train": 1600, "n_val": 400, "n_test": 10 },
             "tune": { "kappa_grid": [2, 8, 33], "cluster_grid": [4, 16] } }"#,
    )?;
    let sets = synth(&cfg)?;
    let (mlp, _) = train_refnet(&cfg, &sets["train"])?;
    let net = RefNet::Mlp(mlp);
    let layers = cfg.layer_names();
    let train = Observations::from_network(&net, &sets["train"], &layers, None)?;
    let val = Observations::from_network(&net, &sets["val"], &layers, None)?;

    let results = tune(&cfg, &Subject::Net(net), &train, &val)?;
    let csv = tuning_csv(&results);
    print!("{csv}");
    std::fs::write("tuning.csv", csv)?;
    for (layer, r) in &results {
        println!("{layer}: kappa {} C {} (top-3 {:.3})", r.best_kappa, r.best_clusters, r.best_accuracy);
    }
    Ok(())
}
