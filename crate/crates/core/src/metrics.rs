//! Fusion quality metrics (EN, SD, SF, SCD) and segmentation scores.
//!
//! EN works on 8-bit levels. SD and SF are reported on whatever scale the
//! values arrive in; [`FusionScores::compute`] uses the 0–255 scale.

use std::io::Write;

use serde::Serialize;

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Quantizes `[0, 1]` samples to 8-bit levels.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Shannon entropy in bits of the 256-bin level histogram.
pub fn entropy(levels: &[u8]) -> f64 {
    if levels.is_empty() {
        return 0.0;
    }
    let mut hist = [0u64; 256];
    for &l in levels {
        hist[l as usize] += 1;
    }
    let n = levels.len() as f64;
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Population standard deviation.
pub fn sd(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Row and column frequency `(RF, CF)` of a row-major `h × w` image, each the
/// root mean square of its neighbour differences.
pub fn row_col_frequency(values: &[f64], h: usize, w: usize) -> Result<(f64, f64)> {
    if values.len() != h * w {
        return Err(Error::shape(format!("{} values for a {h}x{w} image", values.len())));
    }
    let (mut rs, mut cs) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = values[y * w + x];
            if x + 1 < w {
                rs += (values[y * w + x + 1] - v).powi(2);
            }
            if y + 1 < h {
                cs += (values[(y + 1) * w + x] - v).powi(2);
            }
        }
    }
    let rn = h * w.saturating_sub(1);
    let cn = h.saturating_sub(1) * w;
    let rf = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let cf = if cn > 0 { (cs / cn as f64).sqrt() } else { 0.0 };
    Ok((rf, cf))
}

/// Spatial frequency `sqrt(RF² + CF²)`.
pub fn sf(values: &[f64], h: usize, w: usize) -> Result<f64> {
    let (rf, cf) = row_col_frequency(values, h, w)?;
    Ok((rf * rf + cf * cf).sqrt())
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Sum of correlations of differences: `r(u − y, x) + r(u − x, y)`.
pub fn scd(u: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    if u.len() != x.len() || u.len() != y.len() {
        return Err(Error::shape("scd inputs differ in length"));
    }
    let uy: Vec<f64> = u.iter().zip(y).map(|(a, b)| a - b).collect();
    let ux: Vec<f64> = u.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(pearson(&uy, x)? + pearson(&ux, y)?)
}

/// Per-image fusion quality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionScores {
    pub image: String,
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub scd: f64,
}

impl FusionScores {
    /// Scores a fused image `u` against visible `x` and infrared `y`, all
    /// row-major `h × w` in `[0, 1]`.
    pub fn compute(image: &str, u: &[f32], x: &[f32], y: &[f32], h: usize, w: usize) -> Result<Self> {
        if u.len() != h * w || x.len() != h * w || y.len() != h * w {
            return Err(Error::shape("fusion metric inputs do not match the image size"));
        }
        let scaled = |v: &[f32]| -> Vec<f64> { v.iter().map(|&p| p as f64 * 255.0).collect() };
        let (us, xs, ys) = (scaled(u), scaled(x), scaled(y));
        Ok(Self {
            image: image.to_string(),
            en: entropy(&quantize(u)),
            sd: sd(&us),
            sf: sf(&us, h, w)?,
            scd: scd(&us, &xs, &ys)?,
        })
    }
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts `pred` against `gt`, skipping `ignore_index` pixels.
    pub fn add(&mut self, pred: &[u16], gt: &[u16], ignore_index: u16) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        let n = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= n || p as usize >= n {
                return Err(Error::shape(format!("class pair ({g}, {p}) outside {n} classes")));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Confusion matrix of one prediction against its label map.
pub fn confusion(pred: &[u16], gt: &LabelMap) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(gt.num_classes());
    cm.add(pred, gt.classes(), gt.ignore_index())?;
    Ok(cm)
}

/// Per-class recall and IoU; `None` where a class is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub acc: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub macc: f64,
    pub miou: f64,
}

/// Recall is defined for classes present in ground truth; IoU for classes
/// with a non-empty union. Means skip undefined entries.
pub fn class_scores(cm: &ConfusionMatrix) -> Result<ClassScores> {
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let n = cm.num_classes;
    let mut acc = Vec::with_capacity(n);
    let mut iou = Vec::with_capacity(n);
    for c in 0..n {
        let tp = cm.get(c, c) as f64;
        let row: u64 = (0..n).map(|j| cm.get(c, j)).sum();
        let col: u64 = (0..n).map(|j| cm.get(j, c)).sum();
        acc.push((row > 0).then(|| tp / row as f64));
        let union = row + col - cm.get(c, c);
        iou.push((union > 0).then(|| tp / union as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let d: Vec<f64> = v.iter().flatten().copied().collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    Ok(ClassScores {
        macc: mean(&acc),
        miou: mean(&iou),
        acc,
        iou,
    })
}

/// Writes `image,en,sd,sf,scd` rows.
pub fn write_fusion_csv<W: Write>(out: W, rows: &[FusionScores]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Writes `class,acc,iou` rows followed by `mean` (mAcc, mIoU); undefined
/// entries are left empty.
pub fn write_seg_csv<W: Write>(out: W, scores: &ClassScores) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "acc", "iou"]).map_err(csv_err)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (c, (a, i)) in scores.acc.iter().zip(&scores.iou).enumerate() {
        w.write_record([c.to_string(), cell(*a), cell(*i)]).map_err(csv_err)?;
    }
    w.write_record(["mean".to_string(), scores.macc.to_string(), scores.miou.to_string()])
        .map_err(csv_err)?;
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv>", e.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[7; 50]), 0.0);
        assert_eq!(entropy(&[0, 255, 0, 255]), 1.0);
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(entropy(&all), 8.0);
    }

    #[test]
    fn sd_examples() {
        assert_eq!(sd(&[3.0; 9]), 0.0);
        assert_eq!(sd(&[0.0, 255.0, 0.0, 255.0]), 127.5);
    }

    #[test]
    fn sf_examples() {
        assert_eq!(sf(&[0.4; 12], 3, 4).unwrap(), 0.0);
        assert_eq!(row_col_frequency(&[0.0, 1.0, 0.0, 1.0], 2, 2).unwrap(), (1.0, 0.0));
        assert_eq!(sf(&[0.0, 1.0, 0.0, 1.0], 2, 2).unwrap(), 1.0);
    }

    #[test]
    fn sf_is_not_permutation_invariant() {
        let a = [0.0, 1.0, 0.0, 1.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        assert_ne!(
            row_col_frequency(&a, 2, 2).unwrap(),
            row_col_frequency(&b, 2, 2).unwrap()
        );
        // b is a's transpose: the two frequencies swap, SF stays
        assert_eq!(sf(&a, 2, 2).unwrap(), sf(&b, 2, 2).unwrap());
    }

    #[test]
    fn scd_examples() {
        let x = [0.0, 1.0, 0.0, 1.0];
        let y = [0.0, 0.0, 1.0, 1.0];
        let u: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        assert!((scd(&u, &x, &y).unwrap() - 2.0).abs() < 1e-15);
        // u == y: first difference is all zero
        let first = pearson(&[0.0; 4], &x).unwrap();
        assert_eq!(first, 0.0);
        assert_eq!(scd(&y, &x, &y).unwrap(), pearson(&[0.0, -1.0, 1.0, 0.0], &y).unwrap());
    }

    #[test]
    fn confusion_examples() {
        let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1], 2, 255).unwrap();
        let cm = confusion(&[0, 1, 1, 1], &gt).unwrap();
        assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [1, 1, 0, 2]);
        let s = class_scores(&cm).unwrap();
        assert_eq!(s.acc, vec![Some(0.5), Some(1.0)]);
        assert_eq!(s.iou, vec![Some(0.5), Some(2.0 / 3.0)]);

        let perfect = confusion(&[0, 0, 1, 1], &gt).unwrap();
        assert_eq!(perfect.get(0, 1) + perfect.get(1, 0), 0);
        assert_eq!(class_scores(&perfect).unwrap().miou, 1.0);

        let ignored = LabelMap::new(2, 2, vec![255; 4], 2, 255).unwrap();
        let cm = confusion(&[0, 1, 0, 1], &ignored).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(class_scores(&cm), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn all_one_class_prediction() {
        let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1], 2, 255).unwrap();
        let s = class_scores(&confusion(&[0; 4], &gt).unwrap()).unwrap();
        assert_eq!(s.iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(s.miou, 0.25);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1], 4, 255).unwrap();
        let s = class_scores(&confusion(&[0, 0, 1, 1], &gt).unwrap()).unwrap();
        assert_eq!(s.acc[3], None);
        assert_eq!(s.iou[2], None);
        assert_eq!((s.macc, s.miou), (1.0, 1.0));
    }

    #[test]
    fn csv_layouts() {
        let mut buf = Vec::new();
        let row = FusionScores {
            image: "a".into(),
            en: 1.0,
            sd: 2.0,
            sf: 3.0,
            scd: 0.5,
        };
        write_fusion_csv(&mut buf, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "image,en,sd,sf,scd\na,1.0,2.0,3.0,0.5\n"
        );
        let mut buf = Vec::new();
        let gt = LabelMap::new(1, 2, vec![0, 0], 2, 255).unwrap();
        write_seg_csv(&mut buf, &class_scores(&confusion(&[0, 0], &gt).unwrap()).unwrap()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "class,acc,iou\n0,1,1\n1,,\nmean,1,1\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn entropy_and_sd_ignore_order(mut v in proptest::collection::vec(any::<u8>(), 1..200)) {
            let e = entropy(&v);
            let s = sd(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
            prop_assert!((0.0..=8.0).contains(&e));
            v.reverse();
            prop_assert_eq!(entropy(&v), e);
            let s2 = sd(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
            prop_assert!((s - s2).abs() <= 1e-9 * s.max(1.0));
        }

        #[test]
        fn scd_is_bounded(
            u in proptest::collection::vec(0.0f64..1.0, 16),
            x in proptest::collection::vec(0.0f64..1.0, 16),
            y in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let v = scd(&u, &x, &y).unwrap();
            prop_assert!(v.abs() <= 2.0 + 1e-12);
        }

        #[test]
        fn miou_invariant_under_relabeling(
            gt in proptest::collection::vec(0u16..4, 16),
            pred in proptest::collection::vec(0u16..4, 16),
            perm in Just([2u16, 0, 3, 1]),
        ) {
            let a = LabelMap::new(4, 4, gt.clone(), 4, 255).unwrap();
            let b = LabelMap::new(4, 4, gt.iter().map(|&c| perm[c as usize]).collect(), 4, 255).unwrap();
            let pb: Vec<u16> = pred.iter().map(|&c| perm[c as usize]).collect();
            let sa = class_scores(&confusion(&pred, &a).unwrap()).unwrap();
            let sb = class_scores(&confusion(&pb, &b).unwrap()).unwrap();
            prop_assert!((sa.miou - sb.miou).abs() < 1e-12);
            prop_assert!((sa.macc - sb.macc).abs() < 1e-12);
        }
    }
}
