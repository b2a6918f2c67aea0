//! Squared error against Tukey's biweight on clean and corrupted residuals,
//! plus CCC and RMSE of a few prediction sets.
//!
//! `cargo run --example robust_loss`

use emoattn::objective::{ccc, mse, rmse, tukey_grad, tukey_loss, PredictionPair, TukeyConfig};

fn main() -> emoattn::Result<()> {
    let cfg = TukeyConfig::default();
    println!("c = {}, saturation c^2/6 = {:.4}", cfg.c(), cfg.c() * cfg.c() / 6.0);
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "r", "r^2", "rho(r)", "2r", "psi(r)");
    for r in [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 4.685, 6.0] {
        println!(
            "{r:>6.3} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r * r,
            cfg.rho(r),
            2.0 * r,
            tukey_grad(r, cfg)
        );
    }

    let truth = [0.2, -0.4, 0.6, -0.1, 0.3, 0.0];
    let close = [0.25, -0.35, 0.5, -0.1, 0.35, 0.05];
    let mut outlier = close;
    outlier[2] = 8.0;
    for (name, pred) in [("close", &close[..]), ("one outlier", &outlier[..])] {
        let pair = PredictionPair::new(&truth, pred)?;
        println!(
            "{name:<12} mse {:.4}  tukey {:.4}  rmse {:.4}  ccc {:.4}",
            mse(pair),
            tukey_loss(pair, cfg),
            rmse(pair),
            ccc(pair)?.value
        );
    }
    let constant = [0.1; 6];
    let c = ccc(PredictionPair::new(&truth, &constant)?)?;
    println!("constant predictions: ccc {} degenerate {}", c.value, c.degenerate);
    Ok(())
}
