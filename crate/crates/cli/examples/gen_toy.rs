//! Regenerates the committed toy-model fixtures:
//!
//! ```text
//! cargo run -p patchtunnel-cli --example gen_toy
//! ```

use std::fs;
use std::path::PathBuf;

use patchtunnel::modelio::{save_image_pnm, save_weights, serialize_spec};
use patchtunnel::{execute_network, synth, MemoryBudget, NetworkWeights, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let net = synth::toy_network();
    let weights: NetworkWeights<f32> = synth::network_weights(&net, &mut rng);
    let image: Tensor<f32> = synth::unit_image(net.input, &mut rng);
    let pixels = save_image_pnm(&image)?;
    // score what the file decodes to, not the unquantized draw
    let image = patchtunnel::modelio::load_image_pnm(&pixels)?;

    let mut zero_fc = weights.clone();
    zero_fc.fc.iter_mut().for_each(|v| *v = 0.0);

    let (scores, _) = execute_network(&net, &weights, &image, &MemoryBudget::new(1 << 20, 1)?)?;
    let golden: String = scores.iter().enumerate().map(|(i, s)| format!("{i}: {s}\n")).collect();

    fs::write(dir.join("toy.json"), serialize_spec(&net) + "\n")?;
    fs::write(dir.join("toy.weights"), save_weights(&weights, &net)?)?;
    fs::write(dir.join("toy_zero_fc.weights"), save_weights(&zero_fc, &net)?)?;
    fs::write(dir.join("toy.ppm"), pixels)?;
    fs::write(dir.join("toy_run.stdout"), golden)?;
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
