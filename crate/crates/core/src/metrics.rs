//! Smoothed Jaccard training loss and the Dice / IoU / MAE evaluation
//! metrics.

use crate::engine::{Graph, Real, Tensor, Var};
use crate::error::{config_err, dim_err, Error, Result};

/// Smoothing constant of the Jaccard loss.
pub const JACCARD_ALPHA: f64 = 0.7;

/// Probability threshold separating foreground from background.
pub const THRESHOLD: f64 = 0.5;

fn check_loss_inputs<F: Real>(g: &Graph<F>, y: Var, yhat: Var, alpha: f64) -> Result<()> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return config_err(format!("jaccard_loss: alpha must be positive, got {alpha}"));
    }
    if g.shape(y) != g.shape(yhat) {
        return dim_err(format!("jaccard_loss: target {:?} vs prediction {:?}", g.shape(y), g.shape(yhat)));
    }
    if g.value(y).data().iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(Error::Usage("jaccard_loss: target must be binary".into()));
    }
    if g.value(yhat).data().iter().any(|&v| v < F::zero() || v > F::one()) {
        return Err(Error::Usage("jaccard_loss: prediction must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `α·(1 − (α + Σ y·ŷ)/(α + Σ y + Σ ŷ − Σ y·ŷ))` over every element,
/// differentiable with respect to both inputs.
pub fn jaccard_loss<F: Real>(g: &mut Graph<F>, y: Var, yhat: Var, alpha: f64) -> Result<Var> {
    check_loss_inputs(g, y, yhat, alpha)?;
    let inter = g.mul(y, yhat)?;
    let inter = g.sum(inter)?;
    let sy = g.sum(y)?;
    let sh = g.sum(yhat)?;
    jaccard_from_sums(g, inter, sy, sh, alpha)
}

fn jaccard_from_sums<F: Real>(g: &mut Graph<F>, inter: Var, sy: Var, sh: Var, alpha: f64) -> Result<Var> {
    let num = g.add_scalar(inter, alpha)?;
    let den = g.add(sy, sh)?;
    let den = g.sub(den, inter)?;
    let den = g.add_scalar(den, alpha)?;
    let ratio = g.div(num, den)?;
    let one_minus = g.scale(ratio, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    g.scale(one_minus, alpha)
}

/// Mean over the batch axis of per-sample Jaccard losses.
pub fn batch_jaccard_loss<F: Real>(g: &mut Graph<F>, y: Var, yhat: Var, alpha: f64) -> Result<Var> {
    check_loss_inputs(g, y, yhat, alpha)?;
    let shape = g.shape(y).to_vec();
    let n = shape[0];
    let rest = shape.iter().product::<usize>() / n;
    let y2 = g.reshape(y, &[n, rest])?;
    let h2 = g.reshape(yhat, &[n, rest])?;
    let inter = g.mul(y2, h2)?;
    let inter = g.sum_last(inter)?;
    let sy = g.sum_last(y2)?;
    let sh = g.sum_last(h2)?;
    let per_sample = jaccard_from_sums(g, inter, sy, sh, alpha)?;
    g.mean(per_sample)
}

/// Jaccard loss of two plain tensors.
pub fn jaccard_loss_value<F: Real>(y: &Tensor<F>, yhat: &Tensor<F>, alpha: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(y.clone()), g.constant(yhat.clone()));
    let l = jaccard_loss(&mut g, a, b, alpha)?;
    Ok(g.value(l).item()?.as_f64())
}

/// Thresholds probabilities: `p ≥ 0.5` becomes 1.
pub fn binarize<F: Real>(probs: &Tensor<F>) -> Tensor<F> {
    let t = F::lit(THRESHOLD);
    probs.map(|v| if v >= t { F::one() } else { F::zero() })
}

struct Counts {
    a: usize,
    b: usize,
    both: usize,
}

fn counts<F: Real>(y: &Tensor<F>, pred: &Tensor<F>) -> Result<Counts> {
    if y.shape() != pred.shape() {
        return dim_err(format!("mask shapes differ: {:?} vs {:?}", y.shape(), pred.shape()));
    }
    let t = F::lit(THRESHOLD);
    let mut c = Counts { a: 0, b: 0, both: 0 };
    for (&u, &v) in y.data().iter().zip(pred.data()) {
        let (ia, ib) = (u >= t, v >= t);
        c.a += ia as usize;
        c.b += ib as usize;
        c.both += (ia && ib) as usize;
    }
    Ok(c)
}

/// `2|A∩B| / (|A| + |B|)` on binary masks; 1.0 when both are empty.
pub fn dice<F: Real>(y: &Tensor<F>, pred: &Tensor<F>) -> Result<f64> {
    let c = counts(y, pred)?;
    if c.a + c.b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * c.both as f64 / (c.a + c.b) as f64)
}

/// `|A∩B| / |A∪B|` on binary masks; 1.0 when both are empty.
pub fn iou<F: Real>(y: &Tensor<F>, pred: &Tensor<F>) -> Result<f64> {
    let c = counts(y, pred)?;
    let union = c.a + c.b - c.both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(c.both as f64 / union as f64)
}

/// Mean absolute difference between a mask and a probability map.
pub fn mae<F: Real>(y: &Tensor<F>, probs: &Tensor<F>) -> Result<f64> {
    if y.shape() != probs.shape() {
        return dim_err(format!("mae: shapes differ: {:?} vs {:?}", y.shape(), probs.shape()));
    }
    let total: f64 = y.data().iter().zip(probs.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(total / y.numel() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
}

/// Per-sample metrics and their unweighted means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub m_dice: f64,
    pub m_iou: f64,
    pub mae: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        MetricsReport { m_dice: mean(|s| s.dice), m_iou: mean(|s| s.iou), mae: mean(|s| s.mae), per_sample }
    }

    /// Scores `(id, ground truth, probabilities)` triples, thresholding
    /// the probabilities for Dice and IoU.
    pub fn from_predictions<'a, F: Real>(
        items: impl IntoIterator<Item = (&'a str, &'a Tensor<F>, &'a Tensor<F>)>,
    ) -> Result<Self> {
        let per_sample = items
            .into_iter()
            .map(|(id, y, p)| {
                let bin = binarize(p);
                Ok(SampleMetrics { id: id.to_string(), dice: dice(y, &bin)?, iou: iou(y, &bin)?, mae: mae(y, p)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_samples(per_sample))
    }

    /// Tab-separated table: header, one row per sample, then the means.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tdice\tiou\tmae\n");
        for s in &self.per_sample {
            out.push_str(&format!("{}\t{:.4}\t{:.4}\t{:.4}\n", s.id, s.dice, s.iou, s.mae));
        }
        out.push_str(&format!("mean\t{:.4}\t{:.4}\t{:.4}\n", self.m_dice, self.m_iou, self.mae));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Tensor<f64> {
        Tensor::from_fn(vec![bits.len()], |i| bits[i] as f64).unwrap()
    }

    #[test]
    fn jaccard_hand_values() {
        let y = mask(&[1, 0, 1, 1]);
        assert_eq!(jaccard_loss_value(&y, &y, JACCARD_ALPHA).unwrap(), 0.0);
        let l = jaccard_loss_value(&mask(&[1]), &mask(&[0]), 0.7).unwrap();
        assert!((l - 0.7 * (1.0 - 0.7 / 1.7)).abs() < 1e-12);
        assert!((l - 0.4117647).abs() < 1e-6);
        assert_eq!(jaccard_loss_value(&mask(&[0, 0]), &mask(&[0, 0]), 0.7).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_errors() {
        let y = mask(&[1, 0]);
        assert!(matches!(jaccard_loss_value(&y, &mask(&[1, 0, 0]), 0.7), Err(Error::Dimension(_))));
        assert!(matches!(jaccard_loss_value(&y, &y, 0.0), Err(Error::Config(_))));
        assert!(matches!(jaccard_loss_value(&y, &y, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let y = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 1.0, 1.0]).unwrap();
        let p = Tensor::<f64>::from_f64(vec![2, 2], &[0.25, 0.5, 0.75, 0.0]).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(y), g.constant(p));
        let l = batch_jaccard_loss(&mut g, a, b, 0.7).unwrap();
        let l0 = jaccard_loss_value(&mask(&[1, 0]), &Tensor::from_f64(vec![2], &[0.25, 0.5]).unwrap(), 0.7).unwrap();
        let l1 = jaccard_loss_value(&mask(&[1, 1]), &Tensor::from_f64(vec![2], &[0.75, 0.0]).unwrap(), 0.7).unwrap();
        assert!((g.value(l).item().unwrap() - 0.5 * (l0 + l1)).abs() < 1e-15);
    }

    #[test]
    fn dice_and_iou_hand_values() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(&[0, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert!((iou(&a, &mask(&[0, 1, 1, 0])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = mask(&[0, 0, 0, 0]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &mask(&[1])).is_err());
    }

    #[test]
    fn mae_hand_values() {
        let a = mask(&[1, 0]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&mask(&[1, 1]), &mask(&[0, 0])).unwrap(), 1.0);
        assert_eq!(mae(&a, &Tensor::from_f64(vec![2], &[0.5, 0.5]).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn report_table_layout() {
        let y = mask(&[1, 0]);
        let p = Tensor::from_f64(vec![2], &[0.9, 0.2]).unwrap();
        let r = MetricsReport::from_predictions([("a", &y, &p), ("b", &y, &y)]).unwrap();
        let tsv = r.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "id\tdice\tiou\tmae");
        assert_eq!(lines[1], "a\t1.0000\t1.0000\t0.1500");
        assert_eq!(lines[3], "mean\t1.0000\t1.0000\t0.0750");
    }
}
