//! Recomputing the scale-to-sigma model from phantom ground truth.
//!
//! With no arguments this reproduces the fit behind
//! `SigmaModel::default()`: the training split of the default phantom set
//! at scales 2, 3 and 4. It takes a few minutes on one core.
//!
//! ```text
//! cargo run --release --example sigma_calibration [train-per-class] [out.json]
//! ```

use cardiocascade::calibrate::{calibrate, save_model, CalibrationConfig};
use cardiocascade::dataset::{phantom_cases, PhantomSetSpec};
use cardiocascade::grid::SigmaModel;
use std::collections::BTreeMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let per_class: usize = args.next().map_or(Ok(20), |s| s.parse())?;
    let spec = PhantomSetSpec {
        train_per_class: per_class,
        test_per_class: 0,
        ..Default::default()
    };
    let (cases, _) = phantom_cases(&spec);
    let cal = calibrate(&cases, &CalibrationConfig::default())?;

    let mut by_scale: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &cal.points {
        by_scale.entry(format!("{:.1}", p.scale)).or_default().push(p.sigma);
    }
    for (scale, sigmas) in &by_scale {
        let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        let lo = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sigmas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("scale {scale}: best sigma mean {mean:.3}  range [{lo:.1}, {hi:.1}]  n={}", sigmas.len());
    }
    let d = SigmaModel::default();
    println!("fit      sigma = {:.4} * scale + {:.4}", cal.model.slope, cal.model.intercept);
    println!("default  sigma = {:.4} * scale + {:.4}", d.slope, d.intercept);

    if let Some(out) = args.next() {
        save_model(out.as_ref(), &cal.model)?;
        println!("wrote {out}");
    }
    Ok(())
}
