//! Scoring a network that lives outside this crate. Its layer operators and
//! recorded activations arrive as TARC archives; here a reference MLP stands
//! in for the external framework and writes them.
//!
//! Weights archive: `<layer>/W`, `<layer>/b` (or a convolution spec).
//! Data archive: `z` (softmax, N x L), optional `pred`, `label`, `data/tag`,
//! and one `N x n` tensor of layer inputs per analyzed layer.

use mlcs::pipeline::{evaluate, fit, score, synth, train_refnet, Observations, PipelineConfig, Subject};
use mlcs::refnet::synth::Dataset;
use mlcs::refnet::MlpNet;
use mlcs::tensor::{Tensor, TensorArchive};

const LAYERS: [&str; 3] = ["fc0", "fc1", "fc2"];

fn export_weights(net: &MlpNet) -> mlcs::Result<TensorArchive> {
    let mut a = TensorArchive::new();
    for (name, layer) in LAYERS.iter().zip(net.layers()) {
        layer.write_to(&mut a, name)?;
    }
    Ok(a)
}

fn export_data(net: &MlpNet, data: &Dataset) -> mlcs::Result<TensorArchive> {
    let n = data.len();
    let mut z = Vec::new();
    let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); LAYERS.len()];
    for x in &data.x {
        let pass = net.forward(x)?;
        z.extend(pass.probabilities.iter());
        for (slot, v) in inputs.iter_mut().zip(&pass.inputs) {
            slot.extend(v.iter());
        }
    }
    let mut a = TensorArchive::new();
    a.insert("z", Tensor::from_f64(vec![n, net.n_labels()], z)?)?;
    a.insert("data/tag", Tensor::text(&data.tag))?;
    if let Some(labels) = &data.labels {
        a.insert("label", Tensor::vector_i64(labels.iter().map(|&l| l as i64).collect()))?;
    }
    for (name, v) in LAYERS.iter().zip(inputs) {
        let width = v.len() / n.max(1);
        a.insert(*name, Tensor::from_f64(vec![n, width], v)?)?;
    }
    Ok(a)
}

fn main() -> mlcs::Result<()> {
    let cfg = PipelineConfig::from_json(
        r#"{ "synth": { "n_train": 1600, "n_val": 400, "n_test": 400 },
             "layers": [ { "name": "fc0", "kappa": 8, "clusters": 16 },
                         { "name": "fc1", "kappa": 8, "clusters": 16 },
                         { "name": "fc2", "kappa": 8, "clusters": 16 } ],
             "baselines": { "dmd_layer": "fc2", "squeeze": null } }"#,
    )?;
    let sets = synth(&cfg)?;
    let (net, _) = train_refnet(&cfg, &sets["train"])?;

    let subject = Subject::from_archive(export_weights(&net)?)?;
    let observe = |name: &str| -> mlcs::Result<Observations> { Observations::collect(&subject, &export_data(&net, &sets[name])?, &cfg) };
    let model = fit(&cfg, &subject, &observe("train")?, &observe("val")?)?;

    let mut rows = Vec::new();
    for name in ["test", "ood", "corrupt4"] {
        rows.extend(score(&model, &observe(name)?)?);
    }
    let ev = evaluate(&rows, &cfg.eval)?;
    for (case, m) in &ev.metrics {
        println!("{case:<28} AUC {:.4}  FPR* {:.4}", m.auc, m.fpr_star);
    }
    Ok(())
}
