//! FGSM, BIM and PGD against a reference MLP at the 8/255 budget.

use mlcs::pipeline::{synth, train_refnet, PipelineConfig};
use mlcs::refnet::attacks::{run_attack, AttackConfig, AttackKind};

fn main() -> mlcs::Result<()> {
    let cfg = PipelineConfig::from_json(r#"{ "synth": { "n_train": 1600, "n_val": 10, "n_test": 400 } }"#)?;
    let sets = synth(&cfg)?;
    let (net, _) = train_refnet(&cfg, &sets["train"])?;
    let test = &sets["test"];
    println!("clean accuracy {:.3}", net.accuracy(test)?);

    for kind in [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd] {
        let steps = if kind == AttackKind::Fgsm { 1 } else { 10 };
        let a = AttackConfig { kind, steps, seed: 9, ..AttackConfig::default() };
        let out = run_attack(&net, test, &a)?;
        let linf = out
            .adversarial
            .x
            .iter()
            .zip(&out.source_index)
            .flat_map(|(adv, &i)| adv.iter().zip(&test.x[i]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        println!("{:<5} ASR {:.3}  ({} adversarial, max |delta| {linf:.4})", kind.name(), out.asr, out.adversarial.len());
    }
    Ok(())
}
