//! Soft IoU training loss and the evaluation metrics (mean IoU, F1,
//! frame-level AUC).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{MaskFrame, Video};

/// Default `eps` of the soft IoU loss.
pub const IOU_EPS: f64 = 1e-6;

/// Per-pixel probabilities of one frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub height: u32,
    pub width: u32,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: u32, width: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != height as usize * width as usize {
            return Err(Error::shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height as usize * width as usize,
                values.len()
            )));
        }
        Ok(ProbabilityMap { height, width, values })
    }

    pub fn filled(height: u32, width: u32, v: f32) -> Self {
        ProbabilityMap {
            height,
            width,
            values: vec![v; height as usize * width as usize],
        }
    }

    pub fn from_mask(mask: &MaskFrame) -> Self {
        ProbabilityMap {
            height: mask.height(),
            width: mask.width(),
            values: mask.bits().iter().map(|&b| b as f32).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// `1 - ΣPY / (Σ(P + Y - PY) + eps)` over every element of `pred` and
/// `target` jointly.
pub fn iou_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for (&p, &y) in pred.iter().zip(target) {
        inter += p * y;
        union += p + y - p * y;
    }
    Ok(1.0 - inter / (union + eps))
}

/// Pixels at or above `threshold` become foreground.
pub fn binarize(p: &ProbabilityMap, threshold: f32) -> MaskFrame {
    let bits = p.values.iter().map(|&v| (v >= threshold) as u8).collect();
    MaskFrame::new(p.height, p.width, bits).expect("binary values of matching length")
}

/// `(IoU, F1)` of two binary masks; both are 1 when the masks are empty.
pub fn frame_iou_f1(pred: &MaskFrame, gt: &MaskFrame) -> Result<(f64, f64)> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "mask {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut inter, mut p, mut y) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        inter += (a & b) as usize;
        p += a as usize;
        y += b as usize;
    }
    if p + y == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + y - inter;
    Ok((inter as f64 / union as f64, 2.0 * inter as f64 / (p + y) as f64))
}

/// Area under the ROC curve via the Mann–Whitney rank statistic; tied
/// positive/negative pairs count one half.
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative frame".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video: String,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iou: f64,
    pub f1: f64,
    /// `None` when the frame labels contain a single class.
    pub auc: Option<f64>,
    pub per_video: Vec<VideoMetrics>,
}

/// Anything that maps a video to per-frame probability maps.
pub trait Predictor {
    fn predict_video(&mut self, video: &Video) -> Result<Vec<ProbabilityMap>>;
}

/// Predicts the ground-truth mask of every frame (empty when absent).
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthEcho;

impl Predictor for GroundTruthEcho {
    fn predict_video(&mut self, video: &Video) -> Result<Vec<ProbabilityMap>> {
        Ok(match &video.masks {
            Some(masks) => masks.iter().map(ProbabilityMap::from_mask).collect(),
            None => video
                .frames
                .iter()
                .map(|f| ProbabilityMap::filled(f.height(), f.width(), 0.0))
                .collect(),
        })
    }
}

/// Per-frame IoU/F1 averaged over every frame of `videos` (so longer
/// videos weigh more), and frame-level AUC of mean probabilities with
/// `negatives` (pristine videos) as additional negative frames.
pub fn evaluate_dataset<P: Predictor + ?Sized>(
    model: &mut P,
    videos: &[Video],
    negatives: &[Video],
    threshold: f32,
) -> Result<MetricsReport> {
    if videos.is_empty() {
        return Err(Error::arg("cannot evaluate an empty dataset"));
    }
    let (mut iou_sum, mut f1_sum, mut frames) = (0.0, 0.0, 0usize);
    let mut per_video = Vec::with_capacity(videos.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for v in videos {
        let masks = v
            .masks
            .as_ref()
            .ok_or_else(|| Error::arg(format!("video {} has no ground truth", v.name)))?;
        let preds = model.predict_video(v)?;
        if preds.len() != masks.len() {
            return Err(Error::shape(format!(
                "{}: {} predictions for {} frames",
                v.name,
                preds.len(),
                masks.len()
            )));
        }
        let (mut vi, mut vf) = (0.0, 0.0);
        for (p, m) in preds.iter().zip(masks) {
            let (iou, f1) = frame_iou_f1(&binarize(p, threshold), m)?;
            vi += iou;
            vf += f1;
            scores.push(p.mean());
            labels.push(m.area() > 0);
        }
        iou_sum += vi;
        f1_sum += vf;
        frames += masks.len();
        per_video.push(VideoMetrics {
            video: v.name.clone(),
            iou: vi / masks.len() as f64,
            f1: vf / masks.len() as f64,
        });
    }
    for v in negatives {
        for p in model.predict_video(v)? {
            scores.push(p.mean());
            labels.push(false);
        }
    }
    let auc = match frame_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("AUC not reported: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        mean_iou: iou_sum / frames as f64,
        f1: f1_sum / frames as f64,
        auc,
        per_video,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: u32, w: u32, on: impl Fn(u32, u32) -> bool) -> MaskFrame {
        let mut m = MaskFrame::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, on(y, x));
            }
        }
        m
    }

    #[test]
    fn iou_loss_analytic_cases() {
        let ones = vec![1.0; 100];
        let zeros = vec![0.0; 100];
        assert!(iou_loss(&ones, &ones, IOU_EPS).unwrap() < 1e-7);
        assert!((iou_loss(&ones, &zeros, IOU_EPS).unwrap() - 1.0).abs() < 1e-12);
        let half = vec![0.5; 100];
        assert!((iou_loss(&half, &ones, IOU_EPS).unwrap() - 0.5).abs() < 1e-6);
        assert!(iou_loss(&half, &ones[..99], IOU_EPS).is_err());
    }

    #[test]
    fn binarize_threshold_convention() {
        let m = binarize(&ProbabilityMap::filled(2, 2, 0.5), 0.5);
        assert_eq!(m.area(), 4);
        assert_eq!(binarize(&ProbabilityMap::filled(2, 2, 0.499), 0.5).area(), 0);
        assert_eq!(binarize(&ProbabilityMap::filled(2, 2, 0.0), 0.0).area(), 4);
    }

    #[test]
    fn iou_f1_cases() {
        let a = mask(4, 4, |y, _| y < 2);
        assert_eq!(frame_iou_f1(&a, &a).unwrap(), (1.0, 1.0));
        let b = mask(4, 4, |y, _| y >= 2);
        assert_eq!(frame_iou_f1(&a, &b).unwrap(), (0.0, 0.0));
        let half = mask(4, 4, |y, _| y < 1);
        let (iou, f1) = frame_iou_f1(&half, &a).unwrap();
        assert!((iou - 0.5).abs() < 1e-12 && (f1 - 2.0 / 3.0).abs() < 1e-12);
        let e = MaskFrame::empty(4, 4);
        assert_eq!(frame_iou_f1(&e, &e).unwrap(), (1.0, 1.0));
        assert!(frame_iou_f1(&e, &MaskFrame::empty(4, 5)).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(frame_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(frame_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        let a = frame_auc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        assert!(matches!(
            frame_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn echo_scores_perfectly() {
        let m = mask(16, 16, |y, x| y < 5 && x < 7);
        let frame = crate::media::Frame::filled(16, 16, [9, 9, 9]).unwrap();
        let v = Video {
            name: "a".into(),
            frames: vec![frame.clone(); 2],
            masks: Some(vec![m.clone(); 2]),
        };
        let neg = Video {
            name: "b".into(),
            frames: vec![frame; 2],
            masks: None,
        };
        let r = evaluate_dataset(&mut GroundTruthEcho, std::slice::from_ref(&v), &[neg], 0.5).unwrap();
        assert_eq!((r.mean_iou, r.f1, r.auc), (1.0, 1.0, Some(1.0)));
        let r = evaluate_dataset(&mut GroundTruthEcho, &[v], &[], 0.5).unwrap();
        assert_eq!(r.auc, None);
        assert!(evaluate_dataset(&mut GroundTruthEcho, &[], &[], 0.5).is_err());
    }
}
