//! Draw each synthetic generator, fit it and print a plottable TSV table of
//! truth and predictive bands (pipe into gnuplot or a spreadsheet).

use hrvm::io::{plot_table, synth, true_function, Generator, SynthSpec};
use hrvm::model::KernelSpec;
use hrvm::predict::predict;
use hrvm::vi::{fit_vi, ViConfig};
use nalgebra::DMatrix;

fn main() -> hrvm::Result<()> {
    let which: Generator = std::env::args()
        .nth(1)
        .as_deref()
        .unwrap_or("goldberg_sine")
        .parse()?;
    let (data, noise_sd) = synth(&SynthSpec::new(which, 120, 7))?;
    eprintln!(
        "{which:?}: {} points, noise sd in [{:.3}, {:.3}]",
        data.n(),
        noise_sd.min(),
        noise_sd.max()
    );

    let model = fit_vi(&data, &KernelSpec::default(), &ViConfig::default())?;
    let (lo, hi) = (data.x.min(), data.x.max());
    let xs: Vec<f64> = (0..60).map(|i| lo + (hi - lo) * i as f64 / 59.0).collect();
    let pred = predict(&model, &DMatrix::from_column_slice(xs.len(), 1, &xs))?;
    let truth: Vec<f64> = xs.iter().map(|&x| true_function(which, x)).collect();
    print!("{}", plot_table(&xs, &truth, &pred)?);
    Ok(())
}
