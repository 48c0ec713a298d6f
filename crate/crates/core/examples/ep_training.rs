//! Train with expectation propagation on the noise process and compare its
//! predictive density with the variational fit on the same split.

use hrvm::ep::{fit_ep, EpConfig};
use hrvm::io::{synth_split, Generator};
use hrvm::model::KernelSpec;
use hrvm::predict::{nlpd, predict};
use hrvm::vi::{fit_vi, ViConfig};

fn main() -> hrvm::Result<()> {
    let (train, test) = synth_split(Generator::GoldbergSine, 100, 200, 1, 0.3)?;
    let kernel = KernelSpec::default();

    let ep = fit_ep(
        &train,
        &kernel,
        &EpConfig {
            damping: 0.7,
            ..Default::default()
        },
    )?;
    println!(
        "ep: status {:?}, {} passes, {} bases",
        ep.status,
        ep.training_log.len(),
        ep.active_count()
    );
    for rec in ep.training_log.iter().step_by(5) {
        println!(
            "  pass {:>3}  log Z {:.4}  active {}",
            rec.iteration, rec.objective, rec.active
        );
    }
    for line in &ep.fit_log {
        println!("  note: {line}");
    }

    let vi = fit_vi(&train, &kernel, &ViConfig::default())?;
    println!(
        "test nlpd: ep {:.4}, vi {:.4}",
        nlpd(&predict(&ep, &test.x)?, &test.y)?,
        nlpd(&predict(&vi, &test.x)?, &test.y)?
    );
    Ok(())
}
