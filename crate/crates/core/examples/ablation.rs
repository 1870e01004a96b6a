//! The pipeline ablation: each added stage against the plain full-slice run.
//!
//! Rows are the five pipeline modes, columns mean volume Dice per
//! structure over all cases and both phases, repeated with fresh backend
//! seeds.
//!
//! ```text
//! cargo run --release --example ablation [cases] [repetitions] [noisy-px]
//! ```

use cardiocascade::backend::BackendSpec;
use cardiocascade::dataset::{make_phantom, PhantomDims};
use cardiocascade::evaluate::{ablation_dice, repetition_seed};
use cardiocascade::metrics::{mean, stdev};
use cardiocascade::segment::{PipelineMode, SegBackends, SegConfig};
use cardiocascade::PathologyClass;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(Ok(20), |s| s.parse())?;
    let reps: usize = args.next().map_or(Ok(3), |s| s.parse())?;
    let px: usize = args.next().map_or(Ok(1), |s| s.parse())?;

    let dims = PhantomDims {
        slices: 3,
        ..Default::default()
    };
    let cases: Vec<_> = (0..n)
        .map(|i| make_phantom(i as u64, PathologyClass::ALL[i % 5], dims))
        .collect();
    let refs: Vec<_> = cases.iter().collect();
    let cfg = SegConfig::default();

    let mut tables = Vec::new();
    for rep in 0..reps {
        let backends = SegBackends::uniform(&BackendSpec::Noisy(px), &cfg, repetition_seed(7, rep))?;
        tables.push(ablation_dice(&refs, &backends, &cfg)?);
    }

    println!("{n} cases, {reps} repetitions, noisy:{px}");
    println!("{:<8}{:>9}{:>9}{:>9}{:>9}{:>9}", "mode", "RV", "MYO", "LV", "mean", "stdev");
    for (m, mode) in PipelineMode::ALL.iter().enumerate() {
        let per_rep: Vec<f64> = tables.iter().map(|t| mean(&t[m])).collect();
        let cols: Vec<f64> = (0..3).map(|s| mean(&tables.iter().map(|t| t[m][s]).collect::<Vec<_>>())).collect();
        println!(
            "{:<8}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}",
            mode.label(),
            cols[0],
            cols[1],
            cols[2],
            mean(&per_rep),
            stdev(&per_rep)
        );
    }
    Ok(())
}
