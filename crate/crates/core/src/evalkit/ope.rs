use crate::error::{invalid, Result};
use crate::head::PixelBox;

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const PRECISION_THRESHOLDS: usize = 51;

/// Success threshold `i` of the 21-point IoU grid.
pub fn success_threshold(i: usize) -> f64 {
    i as f64 / 20.0
}

/// One-pass evaluation of a tracked sequence; frame 0 is not scored.
#[derive(Clone, Debug, PartialEq)]
pub struct OPEResult {
    pub center_errors: Vec<f64>,
    pub ious: Vec<f64>,
    /// Fraction of frames with center error `≤ d` for `d = 0, 1, …, 50` px.
    pub precision_curve: Vec<f64>,
    /// Fraction of frames with IoU `> t` for `t = 0, 0.05, …, 1`.
    pub success_curve: Vec<f64>,
    pub precision_at_20: f64,
    pub success_auc: f64,
}

pub fn ope_evaluate(pred: &[PixelBox], gt: &[PixelBox]) -> Result<OPEResult> {
    if pred.len() != gt.len() {
        return Err(invalid(format!("{} predictions for {} ground-truth frames", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(invalid("at least one frame after initialization is needed"));
    }
    let center_errors: Vec<f64> = pred[1..].iter().zip(&gt[1..]).map(|(p, g)| p.center_distance(g)).collect();
    let ious: Vec<f64> = pred[1..].iter().zip(&gt[1..]).map(|(p, g)| p.iou(g)).collect();
    let n = ious.len() as f64;
    let precision_curve: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|d| center_errors.iter().filter(|&&e| e <= d as f64).count() as f64 / n)
        .collect();
    let success_curve: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|i| ious.iter().filter(|&&v| v > success_threshold(i)).count() as f64 / n)
        .collect();
    let success_auc = success_curve.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok(OPEResult { precision_at_20: precision_curve[20], success_auc, center_errors, ious, precision_curve, success_curve })
}

impl OPEResult {
    /// `kind,threshold,value` rows for both curves.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("curve,threshold,value\n");
        for (d, v) in self.precision_curve.iter().enumerate() {
            s.push_str(&format!("precision,{d},{v}\n"));
        }
        for (i, v) in self.success_curve.iter().enumerate() {
            s.push_str(&format!("success,{},{v}\n", success_threshold(i)));
        }
        s
    }
}

/// Mean precision@20 and success AUC over sequences.
pub fn ope_aggregate(results: &[OPEResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(invalid("no sequences to aggregate"));
    }
    let k = results.len() as f64;
    Ok((
        results.iter().map(|r| r.precision_at_20).sum::<f64>() / k,
        results.iter().map(|r| r.success_auc).sum::<f64>() / k,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64) -> PixelBox {
        PixelBox::new(x, 0.0, 10.0, 10.0)
    }

    #[test]
    fn perfect_prediction() {
        let gt: Vec<PixelBox> = (0..10).map(|i| at(i as f64)).collect();
        let r = ope_evaluate(&gt, &gt).unwrap();
        assert_eq!(r.precision_at_20, 1.0);
        assert!((r.success_auc - 20.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn precision_counts_center_errors() {
        let gt = vec![at(0.0); 4];
        let pred = vec![at(0.0), at(5.0), at(25.0), at(10.0)];
        let r = ope_evaluate(&pred, &gt).unwrap();
        assert_eq!(r.center_errors, vec![5.0, 25.0, 10.0]);
        assert!((r.precision_at_20 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let gt = vec![at(0.0); 5];
        let pred = vec![at(100.0); 5];
        assert_eq!(ope_evaluate(&pred, &gt).unwrap().success_auc, 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(ope_evaluate(&[at(0.0), at(1.0)], &[at(0.0)]).is_err());
    }
}
