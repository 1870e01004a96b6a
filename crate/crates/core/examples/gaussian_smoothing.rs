//! Restoring a coarse mask: nearest-neighbour versus Gaussian-smoothed upscaling.
//!
//! ```text
//! cargo run --release --example gaussian_smoothing
//! ```

use cardiocascade::grid::{gaussian_blur, resize, upscale_mask_smoothed, Grid2D, ResizeMode, SigmaModel};
use cardiocascade::mask::{BinaryMask, Structure};
use cardiocascade::metrics::dice;

fn ring(n: usize, r_in: f64, r_out: f64) -> Grid2D {
    let c = n as f64 / 2.0;
    Grid2D::from_fn(n, n, |x, y| {
        let d = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
        (d >= r_in && d <= r_out) as u8 as f64
    })
}

fn main() {
    let full = ring(192, 30.0, 42.0);
    let truth = BinaryMask::new(full.clone(), Structure::Myo).unwrap();
    let model = SigmaModel::default();

    println!("scale  sigma  dice(nearest)  dice(smoothed)");
    for scale in [1.5, 2.0, 3.0, 4.0] {
        let n = (192.0 / scale) as usize;
        let coarse = resize(&full, n, n, ResizeMode::Bilinear).threshold(0.5);

        let near = resize(&coarse, 192, 192, ResizeMode::Nearest);
        let smooth = upscale_mask_smoothed(&coarse, 192, 192, &model);
        let d_near = dice(&BinaryMask::new(near, Structure::Myo).unwrap(), &truth).unwrap();
        let d_smooth = dice(&BinaryMask::new(smooth, Structure::Myo).unwrap(), &truth).unwrap();
        println!(
            "{scale:>5.1}  {:>5.2}  {d_near:>13.4}  {d_smooth:>14.4}",
            model.predict(192.0 / n as f64)
        );
    }

    // The blur itself keeps mass away from the borders.
    let blurred = gaussian_blur(&full, 2.0).unwrap();
    let before: f64 = full.data().iter().sum();
    let after: f64 = blurred.data().iter().sum();
    println!("\nmass before {before:.1}, after sigma=2 blur {after:.1}");
}
