//! Save a trained model as versioned JSON with an attached run description,
//! reload it and check the predictions are bit-identical.

use hrvm::io::{load_model, model_from_json, save_model_with_config, synth_split, Generator};
use hrvm::model::KernelSpec;
use hrvm::predict::predict;
use hrvm::vi::{fit_vi, ViConfig};
use serde_json::json;

fn main() -> hrvm::Result<()> {
    let (train, test) = synth_split(Generator::LinearHet, 80, 50, 3, 0.3)?;
    let model = fit_vi(&train, &KernelSpec::rbf(0.7), &ViConfig::default())?;

    let path = std::env::temp_dir().join("hrvm_example_model.json");
    save_model_with_config(
        &model,
        Some(json!({ "experiment": "linear_het", "seed": 3 })),
        &path,
    )?;
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path)?.len()
    );

    let loaded = load_model(&path)?;
    let (_, config) = model_from_json(&std::fs::read_to_string(&path)?)?;
    println!("embedded config: {}", config.unwrap_or_default());

    let same = predict(&model, &test.x)? == predict(&loaded, &test.x)?;
    println!("reloaded predictions identical: {same}");

    // malformed files give a field path
    match model_from_json(r#"{"format": "hrvm-model", "version": 1, "method": "vi", "kernel": 3}"#)
    {
        Ok(_) => println!("unexpectedly parsed"),
        Err(e) => println!("rejected: {e}"),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
