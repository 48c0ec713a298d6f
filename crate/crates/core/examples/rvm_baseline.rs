//! The homoscedastic relevance vector machine on its own: sparse weights and
//! a single noise variance.

use hrvm::artifact::HrvmModel;
use hrvm::io::{synth_split, Generator};
use hrvm::model::KernelSpec;
use hrvm::predict::{nlpd, predict, rmse};
use hrvm::rvm::{fit_rvm, RvmConfig};

fn main() -> hrvm::Result<()> {
    let (train, test) = synth_split(Generator::ConstNoise, 100, 200, 2, 0.3)?;
    let fit = fit_rvm(&train, &KernelSpec::rbf(0.8), &RvmConfig::default())?;
    let sd = fit.sigma2.sqrt() * fit.standardization.y_scale;
    println!(
        "relevance vectors: {} (noise sd {:.3}, true 0.3)",
        fit.active_indices.len(),
        sd
    );
    for (j, a) in fit.active_indices.iter().zip(&fit.alpha) {
        println!("  column {j:>3}  alpha {a:.3e}");
    }

    let model: HrvmModel = fit.into();
    let pred = predict(&model, &test.x)?;
    println!(
        "test rmse {:.4}  nlpd {:.4}",
        rmse(&pred.latent_mean, &test.y)?,
        nlpd(&pred, &test.y)?
    );
    Ok(())
}
