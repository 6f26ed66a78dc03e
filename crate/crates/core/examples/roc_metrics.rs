//! ROC-AUC with ties, the ROC curve, and the confusion at a threshold.

use stam::metrics::{roc_auc, roc_points, trapezoid_auc, Confusion};

fn main() -> stam::Result<()> {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9, 0.2];
    let labels = [0, 0, 1, 1, 1, 1, 0];
    let auc = roc_auc(&scores, &labels)?;
    let points = roc_points(&scores, &labels)?;
    for p in &points {
        println!("threshold {:>4}: fpr {:.3} tpr {:.3}", p.threshold, p.fpr, p.tpr);
    }
    println!("rank AUC {auc:.6}, trapezoid {:.6}", trapezoid_auc(&points));
    let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
    let c = Confusion::from_predictions(&predicted, &labels);
    println!("{c:?}, accuracy {:.3}", c.accuracy());
    Ok(())
}
