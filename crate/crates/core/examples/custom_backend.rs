//! Plugging a hand-written predictor into the segmentation engine.
//!
//! Any `SlicePredictor` can fill any of the six roles. Here the
//! localizers stay oracles and each segmenter is a plain intensity
//! window, which is enough on the synthetic phantoms.
//!
//! ```text
//! cargo run --release --example custom_backend
//! ```

use cardiocascade::backend::{BackendError, OraclePredictor, SliceContext, SlicePredictor};
use cardiocascade::dataset::{make_phantom, Phase, PhantomDims};
use cardiocascade::grid::Grid2D;
use cardiocascade::mask::Structure;
use cardiocascade::metrics::dice_volume;
use cardiocascade::segment::{segment_phase, PipelineMode, SegBackends, SegConfig};
use cardiocascade::PathologyClass;

/// Foreground where the normalized intensity falls in `[lo, hi)`.
struct Window {
    name: String,
    lo: f64,
    hi: f64,
}

impl SlicePredictor for Window {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, image: &Grid2D, _ctx: &SliceContext<'_>) -> Result<Grid2D, BackendError> {
        Ok(image.map(|v| (v >= self.lo && v < self.hi) as u8 as f64))
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let case = make_phantom(2, PathologyClass::Nor, PhantomDims::default());
    let window = |s: Structure, lo, hi| -> Box<dyn SlicePredictor> {
        Box::new(Window {
            name: format!("window:{s}"),
            lo,
            hi,
        })
    };
    let backends = SegBackends::new(
        Structure::ALL.map(|s| Box::new(OraclePredictor::new(s)) as Box<dyn SlicePredictor>),
        [
            window(Structure::Rv, 0.6, 1.01),
            window(Structure::Myo, 0.2, 0.55),
            window(Structure::Lv, 0.6, 1.01),
        ],
    );
    let cfg = SegConfig::default();
    let res = segment_phase(&case, Phase::Ed, &backends, &cfg, PipelineMode::Full)?;
    let gt = case.ground_truth(Phase::Ed).unwrap();
    for s in Structure::ALL {
        let pred: Vec<_> = res.iter().map(|r| r.final_mask.structure(s)).collect();
        let truth: Vec<_> = gt.iter().map(|m| m.structure(s)).collect();
        println!("{s:<4} Dice {:.3}", dice_volume(&pred, &truth)?);
    }
    Ok(())
}
