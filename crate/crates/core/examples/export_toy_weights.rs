//! Writes the bundled toy checkpoint from its seed.

use gfi_core::backend::{toy, weights};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_cnn.safetensors").to_string());
    let mut net = toy::generate(toy::TOY_SEED);
    std::fs::write(&path, weights::to_bytes(&mut net)?)?;
    println!("wrote {path}");
    Ok(())
}
