//! Full-covariance EM on three elongated 2-D blobs.

use mlcs::gmm::{fit_gmm, GmmConfig};
use mlcs::rng::SeededRng;
use nalgebra::DVector;

fn main() -> mlcs::Result<()> {
    let mut rng = SeededRng::new(5);
    let centers = [(-8.0, 0.0), (0.0, 6.0), (8.0, -2.0)];
    let data: Vec<DVector<f64>> = (0..600)
        .map(|t| {
            let (cx, cy) = centers[t % 3];
            let a = rng.normal();
            DVector::from_vec(vec![cx + 1.5 * a, cy + 0.5 * a + 0.3 * rng.normal()])
        })
        .collect();

    let model = fit_gmm(&data, 3, &GmmConfig::default())?;
    let trace = model.ll_trace();
    println!("EM: {} steps, mean log-likelihood {:.4} -> {:.4}", trace.len() - 1, trace[0], trace[trace.len() - 1]);
    for (k, (w, mu)) in model.weights().iter().zip(model.means()).enumerate() {
        println!("component {k}: weight {w:.3}, mean ({:.2}, {:.2})", mu[0], mu[1]);
    }
    for p in [vec![-8.0, 0.0], vec![1.0, 6.2], vec![1e6, -1e6]] {
        let m = model.membership(&DVector::from_vec(p.clone()))?;
        println!("membership of {p:?}: {:.4?}", m.as_slice());
    }
    Ok(())
}
