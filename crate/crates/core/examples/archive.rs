//! Writes a small TARC archive, reads it back and shows what a damaged file
//! reports.
//!
//!     cargo run --example archive -- /tmp/demo.tarc

use mlcs::tensor::{Tensor, TensorArchive};
use nalgebra::DMatrix;

fn main() -> mlcs::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "demo.tarc".into());
    let mut a = TensorArchive::new();
    a.insert("layer0/W", Tensor::from_matrix(&DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64)))?;
    a.insert("layer0/b", Tensor::vector_f64(vec![0.5, -0.5, 1.0]))?;
    a.insert("pred", Tensor::vector_i64(vec![2, 0, 1]))?;
    a.insert("data/tag", Tensor::text("id"))?;
    a.save(&path)?;

    let back = TensorArchive::load(&path)?;
    for (name, t) in back.iter() {
        println!("{name:<10} {:?} {:?}", t.dtype(), t.shape());
    }
    println!("W =\n{}", back.require("layer0/W")?.to_matrix()?);

    let bytes = std::fs::read(&path)?;
    match TensorArchive::from_bytes(&bytes[..bytes.len() - 3]) {
        Ok(_) => println!("truncated archive parsed (unexpected)"),
        Err(e) => println!("truncated archive: {e}"),
    }
    Ok(())
}
