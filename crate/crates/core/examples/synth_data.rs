//! Generates a small synthetic face set, exports it as PNG + manifest and
//! reads it back.
//!
//! `cargo run --example synth_data -- /tmp/faces 16`

use emoattn::data::{export_dataset, synth_dataset, Dataset};

fn main() -> emoattn::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "synth_faces".into());
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);
    let ds = synth_dataset(n, 7);
    let manifest = export_dataset(&ds, &dir)?;
    let (back, rejected) = Dataset::from_manifest(&manifest)?;
    println!("wrote {} faces to {}", ds.len(), manifest.display());
    println!("reloaded {} ({} rejected), identical: {}", back.len(), rejected.len(), back == ds);
    for (i, s) in ds.samples.iter().take(8).enumerate() {
        println!(
            "{i}: valence {:+.3} arousal {:+.3} expression {}",
            s.valence,
            s.arousal,
            s.expression.unwrap()
        );
    }
    Ok(())
}
