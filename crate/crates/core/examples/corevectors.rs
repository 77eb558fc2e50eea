//! Truncated-SVD corevectors of a random layer: how the discarded energy
//! falls as kappa grows, and the corevector of one input.

use mlcs::affine::AffineMap;
use mlcs::corevector::fit_projector;
use mlcs::rng::SeededRng;
use nalgebra::{DMatrix, DVector};

fn main() -> mlcs::Result<()> {
    let mut rng = SeededRng::new(11);
    // low-rank-ish layer: 24 outputs, 16 inputs, a few dominant directions
    let u = DMatrix::from_fn(24, 4, |_, _| rng.normal());
    let v = DMatrix::from_fn(4, 16, |_, _| rng.normal());
    let noise = DMatrix::from_fn(24, 16, |_, _| 0.05 * rng.normal());
    let map = AffineMap::new(u * v + noise, DVector::from_fn(24, |_, _| rng.normal()))?;
    let total = map.augmented().norm_squared();

    println!("kappa  tail energy  fraction");
    for kappa in [1, 2, 3, 4, 5, 8, 12, 17] {
        let p = fit_projector(&map, kappa)?;
        println!("{kappa:>5}  {:>11.4}  {:>8.5}", p.tail_energy(), p.tail_energy() / total);
    }

    let p = fit_projector(&map, 4)?;
    let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    println!("sigma = {:?}", &p.sigma()[..4]);
    println!("corevector of x: {}", p.project(&x)?.transpose());
    Ok(())
}
