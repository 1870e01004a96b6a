//! Localize, segment and smooth one synthetic case end to end.
//!
//! ```text
//! cargo run --release --example phantom_pipeline [noisy-px]
//! ```

use cardiocascade::backend::BackendSpec;
use cardiocascade::dataset::{make_phantom, Phase, PhantomDims};
use cardiocascade::mask::Structure;
use cardiocascade::metrics::dice;
use cardiocascade::segment::{run_pipeline, SegBackends, SegConfig, SliceInput, Step};
use cardiocascade::PathologyClass;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let px: usize = std::env::args().nth(1).map_or(Ok(1), |s| s.parse())?;
    let case = make_phantom(11, PathologyClass::Minf, PhantomDims::default());
    let cfg = SegConfig::default();
    let backends = SegBackends::uniform(&BackendSpec::Noisy(px), &cfg, 5)?;

    let gt = case.ground_truth(Phase::Ed).unwrap();
    println!("{} ED, {} slices, noisy:{px} backends", case.id, gt.len());
    for (k, truth) in gt.iter().enumerate() {
        let image = case.ed_volume.slice(k);
        let input = SliceInput {
            image: &image,
            ground_truth: Some(truth),
            case_id: &case.id,
            phase: Phase::Ed,
            slice_index: k,
        };
        let res = run_pipeline(&input, &backends, &cfg)?;
        let scores: Vec<String> = Structure::ALL
            .iter()
            .map(|&s| format!("{s} {:.3}", dice(&res.final_mask.structure(s), &truth.structure(s)).unwrap()))
            .collect();
        println!("slice {k}: {}", scores.join("  "));
        for t in res.trace.iter().filter(|t| t.step == Step::Segment) {
            if let Some(r) = &t.region {
                println!(
                    "    {:<3} region {}x{} at ({}, {})  sigma {:.2}",
                    t.structure.name(),
                    r.width(),
                    r.height(),
                    r.x0,
                    r.y0,
                    t.sigma.unwrap_or(0.0)
                );
            }
        }
    }
    Ok(())
}
