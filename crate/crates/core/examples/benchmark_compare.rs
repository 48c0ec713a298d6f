//! Compare rvm, vi and ep over several seeds on a heteroscedastic and a
//! homoscedastic problem, fitting seeds in parallel.

use hrvm::artifact::HrvmModel;
use hrvm::ep::{fit_ep, EpConfig};
use hrvm::io::{synth_split, Generator};
use hrvm::model::KernelSpec;
use hrvm::predict::{nlpd, predict};
use hrvm::rvm::{fit_rvm, RvmConfig};
use hrvm::vi::{fit_vi, ViConfig};
use rayon::prelude::*;

fn scores(gen: Generator, seed: u64) -> hrvm::Result<[f64; 3]> {
    let (train, test) = synth_split(gen, 100, 100, seed, 0.3)?;
    let k = KernelSpec::default();
    let models: [HrvmModel; 3] = [
        fit_rvm(&train, &k, &RvmConfig::default())?.into(),
        fit_vi(
            &train,
            &k,
            &ViConfig {
                seed,
                ..Default::default()
            },
        )?,
        fit_ep(
            &train,
            &k,
            &EpConfig {
                seed,
                ..Default::default()
            },
        )?,
    ];
    let mut out = [0.0; 3];
    for (o, m) in out.iter_mut().zip(&models) {
        *o = nlpd(&predict(m, &test.x)?, &test.y)?;
    }
    Ok(out)
}

fn main() -> hrvm::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    for gen in [Generator::GoldbergSine, Generator::ConstNoise] {
        let rows: Vec<[f64; 3]> = (0..seeds)
            .into_par_iter()
            .map(|s| scores(gen, s))
            .collect::<hrvm::Result<_>>()?;
        println!("{gen:?}: test NLPD per seed (rvm / vi / ep)");
        for (s, r) in rows.iter().enumerate() {
            println!("  seed {s}: {:.3} / {:.3} / {:.3}", r[0], r[1], r[2]);
        }
        let vi_wins = rows.iter().filter(|r| r[1] < r[0]).count();
        println!("  vi better than rvm in {vi_wins}/{seeds}");
    }
    Ok(())
}
