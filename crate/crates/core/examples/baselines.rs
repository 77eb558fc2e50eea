//! The baseline detectors (MSP, DOCTOR, DMD, feature squeezing) on clean and
//! shifted inputs, scored with AUC and FPR at 95% TPR.

use mlcs::baselines::{doctor_score, dmd_score, fit_dmd, fs_score, msp, SqueezeConfig};
use mlcs::metrics::detection_metrics;
use mlcs::pipeline::{synth, train_refnet, PipelineConfig};
use mlcs::refnet::Network;

fn main() -> mlcs::Result<()> {
    let cfg = PipelineConfig::from_json(r#"{ "synth": { "n_train": 1600, "n_val": 400, "n_test": 400 } }"#)?;
    let sets = synth(&cfg)?;
    let (net, _) = train_refnet(&cfg, &sets["train"])?;

    // Mahalanobis features: the input of the output layer
    let penultimate = |x: &[f64]| -> mlcs::Result<Vec<f64>> {
        let pass = net.forward(x)?;
        Ok(pass.inputs.last().expect("layers").as_slice().to_vec())
    };
    let feats = |name: &str| -> mlcs::Result<Vec<Vec<f64>>> { sets[name].x.iter().map(|x| penultimate(x)).collect() };
    let mut dmd = fit_dmd(&feats("train")?, sets["train"].require_labels()?, net.n_labels(), 1e-6)?;
    dmd.calibrate(&feats("val")?)?;
    let squeeze = SqueezeConfig::default();

    let scores = |name: &str| -> mlcs::Result<[Vec<f64>; 4]> {
        let mut out: [Vec<f64>; 4] = Default::default();
        for x in &sets[name].x {
            let logits = net.logits(x)?;
            out[0].push(msp(net.probabilities(x)?.as_slice())?);
            out[1].push(doctor_score(logits.as_slice(), 1.0)?);
            out[2].push(dmd_score(&dmd, &penultimate(x)?)?);
            out[3].push(fs_score(&net, x, &squeeze)?);
        }
        Ok(out)
    };
    let id = scores("test")?;
    for shifted in ["ood", "corrupt5"] {
        let other = scores(shifted)?;
        for (k, name) in ["msp", "doctor", "dmd", "fs"].iter().enumerate() {
            let m = detection_metrics(&id[k], &other[k])?;
            println!("{name:<6} vs {shifted:<8} AUC {:.4}  FPR* {:.4}", m.auc, m.fpr_star);
        }
    }
    Ok(())
}
