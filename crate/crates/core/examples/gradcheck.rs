//! Finite-difference check of the full training objective for a small
//! network, parameter by parameter.
//!
//! `cargo run --example gradcheck -- [key=value ...]`

use emoattn::data::{make_batch, synth_dataset, CropSpec, Sample};
use emoattn::diffcore::GradCheckOptions;
use emoattn::train::{objective_gradcheck, TrainConfig};

fn main() -> emoattn::Result<()> {
    let mut config = TrainConfig::from_text("channels = 2,3,4\nn_dim = 6\nn_cat = 5\nembed_d = 4\nrnn_u = 3")?;
    for arg in std::env::args().skip(1) {
        config.apply_text(&arg)?;
    }
    let data = synth_dataset(2, 1);
    let refs: Vec<&Sample> = data.samples.iter().collect();
    let batch = make_batch(&refs, &[CropSpec::CENTER; 2])?;
    let report = objective_gradcheck(
        &config,
        &batch,
        &GradCheckOptions {
            max_elements: Some(16),
            ..GradCheckOptions::default()
        },
    )?;
    for p in &report.params {
        println!("{:<36} {:>3} checked  max rel err {:.2e}", p.name, p.checked, p.max_rel_error);
    }
    println!(
        "{} elements, {} skipped at kinks, worst {:.2e}",
        report.checked(),
        report.skipped(),
        report.max_rel_error()
    );
    Ok(())
}
