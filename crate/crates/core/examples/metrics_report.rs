//! Confusion matrices, ROC/AUC and the cascade aggregate accuracy.
//!
//! ```text
//! cargo run --release --example metrics_report
//! ```

use cardiocascade::metrics::{
    aggregate_accuracy, classification_metrics, compare_published, roc_auc, ConfusionMatrix,
};
use cardiocascade::Stage;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A small binary problem: scores with their true labels.
    let scored = [
        (0.95, true),
        (0.80, true),
        (0.72, false),
        (0.66, true),
        (0.40, false),
        (0.35, true),
        (0.20, false),
        (0.05, false),
    ];
    let mut cm = ConfusionMatrix::for_stage(Stage::LvPathology);
    for &(s, t) in &scored {
        cm.add_index(t as usize, (s >= 0.5) as usize);
    }
    let m = classification_metrics(&cm)?;
    println!("labels {:?}", cm.labels);
    for (label, row) in cm.labels.iter().zip(&cm.counts) {
        println!("  {label:<13} {row:?}");
    }
    println!("accuracy {:.3}", m.accuracy);
    for c in &m.per_class {
        println!(
            "  {:<13} precision {:?} recall {:?} f1 {:?}",
            c.label, c.precision, c.recall, c.f1
        );
    }
    let roc = roc_auc(&scored)?;
    println!("AUC {:.4} over {} ROC points", roc.auc, roc.points.len());

    // Stage accuracies 0.96, 1.00, 1.00, 0.90 combine into per-class and
    // overall accuracies along the cascade paths.
    let agg = aggregate_accuracy(0.96, 1.00, 1.00, 0.90);
    for (class, a) in &agg.per_class {
        println!("  {:<5} {a:.4}", class.name());
    }
    let cmp = compare_published(agg.overall);
    println!(
        "overall {:.4}  published {:.3}  delta {:+.4}  flagged {}",
        agg.overall, cmp.published, cmp.delta, cmp.flagged
    );
    Ok(())
}
