//! Segmentation metrics: confusion matrices, IoU, temporal consistency and
//! class-wise feature variance.

use crate::error::{Error, Result};
use crate::flowwarp::{backward_warp, FlowField, ValidityMask};
use crate::segnet::ProbMap;
use serde::{Deserialize, Serialize};

/// `C×C` counts, rows are ground truth and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one label map; `truth` and `pred` are per-pixel class indices.
    pub fn add(&mut self, truth: &[u8], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let c = self.num_classes;
        for (&t, &p) in truth.iter().zip(pred) {
            if t as usize >= c || p >= c {
                return Err(Error::InvalidArgument(format!("class index out of range for {c} classes")));
            }
            self.counts[t as usize * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class IoU (`None` for classes absent from both truth and
/// prediction) and their mean over the present classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("no class present in truth or prediction".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, mean))
}

/// Counts of pixels where the argmax of `p_k` matches the argmax of `p_km1`
/// warped onto frame `k`, over pixels that are both inside the frame after
/// warping and valid in `visible`. Returns `(agree, total)`.
pub fn temporal_agreement(p_k: &ProbMap, p_km1: &ProbMap, flow_bwd: &FlowField, visible: &ValidityMask) -> Result<(u64, u64)> {
    let a = p_k.tensor();
    if !a.same_shape(p_km1.tensor()) || visible.height != a.height || visible.width != a.width {
        return Err(Error::ShapeMismatch("temporal consistency inputs differ in shape".into()));
    }
    let (warped, inside) = backward_warp(p_km1.tensor(), flow_bwd)?;
    let valid = inside.and(visible);
    let cur = a.argmax_channels();
    let prev = warped.argmax_channels();
    let mut agree = 0;
    let mut total = 0;
    for i in 0..cur.len() {
        if valid.data[i] {
            total += 1;
            agree += (cur[i] == prev[i]) as u64;
        }
    }
    Ok((agree, total))
}

/// Share of valid, non-occluded pixels whose predicted class survives the
/// flow from frame `k-1` to frame `k`.
pub fn temporal_consistency(p_k: &ProbMap, p_km1: &ProbMap, flow_bwd: &FlowField, visible: &ValidityMask) -> Result<f64> {
    let (agree, total) = temporal_agreement(p_k, p_km1, flow_bwd, visible)?;
    if total == 0 {
        return Err(Error::InvalidArgument("no valid pixels for temporal consistency".into()));
    }
    Ok(agree as f64 / total as f64)
}

/// Running class-wise sums for [`feature_variance`], so features from many
/// frames can be pooled without storing them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    dim: usize,
    count: Vec<u64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl FeatureStats {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        FeatureStats {
            dim,
            count: vec![0; num_classes],
            sum: vec![0.0; num_classes * dim],
            sum_sq: vec![0.0; num_classes],
        }
    }

    pub fn add(&mut self, class: usize, feature: &[f64]) {
        assert_eq!(feature.len(), self.dim);
        self.count[class] += 1;
        for (s, &f) in self.sum[class * self.dim..(class + 1) * self.dim].iter_mut().zip(feature) {
            *s += f;
        }
        self.sum_sq[class] += feature.iter().map(|f| f * f).sum::<f64>();
    }

    /// `(σ²_inter, σ²_intra)`.
    pub fn variances(&self) -> Result<(f64, f64)> {
        let d = self.dim;
        let present: Vec<usize> = (0..self.count.len()).filter(|&k| self.count[k] > 0).collect();
        if present.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature variance needs at least two classes, found {}",
                present.len()
            )));
        }
        let centroids: Vec<Vec<f64>> = present
            .iter()
            .map(|&k| {
                let n = self.count[k] as f64;
                self.sum[k * d..(k + 1) * d].iter().map(|s| s / n).collect()
            })
            .collect();
        let intra = present
            .iter()
            .zip(&centroids)
            .map(|(&k, mu)| {
                let n = self.count[k] as f64;
                let mu_sq: f64 = mu.iter().map(|m| m * m).sum();
                (self.sum_sq[k] / n - mu_sq).max(0.0)
            })
            .sum::<f64>()
            / present.len() as f64;
        let mut global = vec![0.0; d];
        for mu in &centroids {
            for (g, m) in global.iter_mut().zip(mu) {
                *g += m / centroids.len() as f64;
            }
        }
        let inter = centroids
            .iter()
            .map(|mu| mu.iter().zip(&global).map(|(m, g)| (m - g).powi(2)).sum::<f64>())
            .sum::<f64>()
            / centroids.len() as f64;
        Ok((inter, intra))
    }
}

/// `(σ²_inter, σ²_intra)` of `features` (one vector per entry) grouped by
/// `labels`. Intra is the mean over classes of the mean squared distance to
/// the class centroid; inter is the mean squared distance of the class
/// centroids to their average.
pub fn feature_variance(features: &[Vec<f64>], labels: &[u8]) -> Result<(f64, f64)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch("features differ in length".into()));
    }
    let num_classes = *labels.iter().max().unwrap() as usize + 1;
    // Centre first: the statistics are translation invariant and this keeps
    // the sum-of-squares form well conditioned.
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / features.len() as f64;
        }
    }
    let mut stats = FeatureStats::new(num_classes, dim);
    let mut buf = vec![0.0; dim];
    for (f, &l) in features.iter().zip(labels) {
        for ((b, v), m) in buf.iter_mut().zip(f).zip(&mean) {
            *b = v - m;
        }
        stats.add(l as usize, &buf);
    }
    stats.variances()
}

/// Evaluation summary for one model on one set of clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub temporal_consistency: f64,
    pub confusion: ConfusionMatrix,
    pub sigma2_inter: Option<f64>,
    pub sigma2_intra: Option<f64>,
}

impl EvalReport {
    /// Plain-text table: one row per class, then the mean and the temporal
    /// consistency.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut out = String::from("class            IoU\n");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            match iou {
                Some(v) => out.push_str(&format!("{name:<12} {:>7.2}\n", 100.0 * v)),
                None => out.push_str(&format!("{name:<12} {:>7}\n", "n/a")),
            }
        }
        out.push_str(&format!("{:<12} {:>7.2}\n", "mIoU", 100.0 * self.miou));
        out.push_str(&format!("{:<12} {:>7.2}\n", "temporal", 100.0 * self.temporal_consistency));
        if let (Some(inter), Some(intra)) = (self.sigma2_inter, self.sigma2_intra) {
            out.push_str(&format!("{:<12} {:>7.3}\n{:<12} {:>7.3}\n", "var_inter", inter, "var_intra", intra));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowwarp::FlowDirection;
    use crate::tensor::Tensor;

    #[test]
    fn miou_examples() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 9]]).unwrap();
        let (pc, m) = miou(&cm).unwrap();
        assert!(pc.iter().all(|v| *v == Some(1.0)));
        assert_eq!(m, 1.0);

        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 3]]).unwrap();
        let (pc, m) = miou(&cm).unwrap();
        assert_eq!(pc, vec![Some(0.6), Some(0.6)]);
        assert!((m - 0.6).abs() < 1e-15);

        let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![1, 3, 0], vec![0, 0, 0]]).unwrap();
        let (pc, m) = miou(&cm).unwrap();
        assert_eq!(pc[2], None);
        assert!((m - 0.6).abs() < 1e-15);

        assert!(miou(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn confusion_counts_and_merge() {
        let mut a = ConfusionMatrix::new(2);
        a.add(&[0, 1, 1], &[0, 0, 1]).unwrap();
        assert_eq!(a.get(1, 0), 1);
        let b = a.clone();
        a.merge(&b).unwrap();
        assert_eq!(a.total(), 6);
        assert!(a.add(&[2], &[0]).is_err());
    }

    fn onehot(classes: &[usize], c: usize) -> ProbMap {
        let n = classes.len();
        let mut t = Tensor::zeros(c, 1, n);
        for (i, &k) in classes.iter().enumerate() {
            t.data[k * n + i] = 1.0;
        }
        ProbMap::new(t).unwrap()
    }

    #[test]
    fn temporal_consistency_examples() {
        let zero = FlowField::zeros(1, 4, FlowDirection::Backward);
        let all = ValidityMask::all(1, 4, true);
        let p = onehot(&[0, 1, 2, 1], 3);
        assert_eq!(temporal_consistency(&p, &p, &zero, &all).unwrap(), 1.0);
        let q = onehot(&[1, 2, 0, 0], 3);
        assert_eq!(temporal_consistency(&p, &q, &zero, &all).unwrap(), 0.0);
        let r = onehot(&[0, 1, 0, 0], 3);
        assert_eq!(temporal_consistency(&p, &r, &zero, &all).unwrap(), 0.5);
        // Occluded pixels are ignored.
        let mask = ValidityMask {
            height: 1,
            width: 4,
            data: vec![true, true, false, false],
        };
        assert_eq!(temporal_consistency(&p, &r, &zero, &mask).unwrap(), 1.0);
        assert!(temporal_consistency(&p, &r, &zero, &ValidityMask::all(1, 4, false)).is_err());
    }

    #[test]
    fn feature_variance_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert_eq!(feature_variance(&same, &[0, 0, 1, 1]).unwrap(), (0.0, 0.0));

        let (inter, intra) = feature_variance(&[vec![0.0], vec![0.0], vec![2.0]], &[0, 0, 1]).unwrap();
        assert!((inter - 1.0).abs() < 1e-12 && intra.abs() < 1e-12);

        let f = vec![vec![0.0, 1.0], vec![1.0, 3.0], vec![5.0, 5.0], vec![4.0, 2.0], vec![2.0, 2.0]];
        let l = [0, 0, 1, 1, 2];
        let base = feature_variance(&f, &l).unwrap();
        let doubled: Vec<_> = f.iter().chain(&f).cloned().collect();
        let l2: Vec<u8> = l.iter().chain(&l).copied().collect();
        let dup = feature_variance(&doubled, &l2).unwrap();
        assert!((base.0 - dup.0).abs() < 1e-12 && (base.1 - dup.1).abs() < 1e-12);

        assert!(feature_variance(&same, &[1, 1, 1, 1]).is_err());
    }
}
