//! Work with the collapsed variational bound directly: evaluate its terms,
//! check analytic gradients against finite differences and watch an inner
//! optimization raise the bound.

use hrvm::model::{build_design_matrix, Dataset, GpNoisePrior, KernelSpec};
use hrvm::numerics::grad_check;
use hrvm::numerics::optimize::LbfgsSettings;
use hrvm::vi::{bound_gradients, collapsed_bound, optimize_q_g, BoundParams, VariationalState};
use nalgebra::DVector;

fn main() -> hrvm::Result<()> {
    let x: Vec<f64> = (0..12).map(|i| -1.5 + 3.0 * i as f64 / 11.0).collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v.sin() + 0.1 * (1.0 + v.abs()) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let data = Dataset::from_1d(&x, &y)?;
    let phi = build_design_matrix(&data, &KernelSpec::rbf(0.8))?.values;
    let active: Vec<usize> = (0..phi.ncols()).collect();
    let alpha = vec![1.0; active.len()];
    let prior = GpNoisePrior::new(-2.0, 1.0, 1.0);
    let mut state = VariationalState::new(
        data.x.clone(),
        DVector::from_element(data.n(), 0.5),
        alpha.clone(),
        active.clone(),
        prior.clone(),
    )?;

    let t = collapsed_bound(&state, &phi, &data.y)?;
    println!(
        "start: F = {:.4} = data fit {:.4} - trace {:.4} - KL {:.4}",
        t.value, t.data_fit, t.trace_penalty, t.kl
    );

    let x0 = BoundParams::from_state(&state).to_vec();
    let rebuild = |v: &[f64]| {
        let p = BoundParams::from_slice(v);
        VariationalState::new(
            data.x.clone(),
            p.lambda(),
            alpha.clone(),
            active.clone(),
            p.prior(&prior),
        )
    };
    let err = grad_check(
        |v| {
            collapsed_bound(&rebuild(v).unwrap(), &phi, &data.y)
                .unwrap()
                .value
        },
        |v| {
            bound_gradients(&rebuild(v).unwrap(), &phi, &data.y)
                .unwrap()
                .to_vec()
        },
        &x0,
    )?;
    println!(
        "gradient check over {} parameters: max relative error {err:.2e}",
        x0.len()
    );

    let (status, grad_norm) = optimize_q_g(
        &mut state,
        &phi,
        &data.y,
        &LbfgsSettings::default(),
        true,
        true,
    )?;
    let t = collapsed_bound(&state, &phi, &data.y)?;
    println!(
        "after L-BFGS ({status:?}, |grad| {grad_norm:.1e}): F = {:.4}, mu0 = {:.3}",
        t.value, state.prior.mu0
    );
    let sd: Vec<String> = state
        .mu
        .iter()
        .map(|g| format!("{:.3}", (0.5 * g).exp()))
        .collect();
    println!("posterior median noise sd per point: {}", sd.join(" "));
    Ok(())
}
