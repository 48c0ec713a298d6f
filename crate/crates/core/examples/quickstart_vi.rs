//! Fit the variational heteroscedastic RVM to a noisy sine and inspect the
//! learned noise level across the input range.

use hrvm::io::{synth_split, Generator};
use hrvm::model::KernelSpec;
use hrvm::predict::{nlpd, predict, rmse};
use hrvm::vi::{fit_vi, ViConfig};
use nalgebra::DMatrix;

fn main() -> hrvm::Result<()> {
    let (train, test) = synth_split(Generator::GoldbergSine, 100, 200, 0, 0.3)?;
    let model = fit_vi(&train, &KernelSpec::default(), &ViConfig::default())?;
    println!(
        "status {:?} after {} iterations, {} of {} basis functions kept, bound {:.3}",
        model.status,
        model.training_log.len(),
        model.active_count(),
        train.n() + 1,
        model.final_objective().unwrap_or(f64::NAN)
    );

    let pred = predict(&model, &test.x)?;
    println!(
        "test rmse {:.4}  nlpd {:.4}",
        rmse(&pred.latent_mean, &test.y)?,
        nlpd(&pred, &test.y)?
    );

    // the true noise sd rises linearly from 0.5 to 1.5
    let xs = DMatrix::from_column_slice(5, 1, &[0.0, 0.25, 0.5, 0.75, 1.0]);
    let grid = predict(&model, &xs)?;
    for (i, sd) in grid.noise_sd().iter().enumerate() {
        println!(
            "x = {:.2}: mean {:+.3}, noise sd {:.3} (true {:.3})",
            xs[(i, 0)],
            grid.latent_mean[i],
            sd,
            0.5 + xs[(i, 0)]
        );
    }
    Ok(())
}
