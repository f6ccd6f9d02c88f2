//! Segmentation metrics, dispersion statistics, the paired t-test, and
//! throughput measurement.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel confusion counts between a binarized prediction and ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Binarization threshold applied to probability maps before counting.
pub const BIN_THRESHOLD: f64 = 0.5;

pub fn binarize(t: &Tensor, threshold: f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
    }
}

pub fn confusion_counts(pred: &Tensor, gt: &Tensor) -> Result<Counts> {
    if pred.shape != gt.shape {
        return Err(Error::shape(format!(
            "confusion_counts shape mismatch: {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

// Degenerate denominators (e.g. empty-vs-empty masks) score 1.0, the
// perfect-agreement convention, so aggregates never see NaN.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dsc(c: &Counts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn miou(c: &Counts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn recall(c: &Counts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn precision(c: &Counts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

// ---- paired t-test ---------------------------------------------------------

/// Two-sided paired t-test. Returns `(t, p)`; the degrees of freedom are
/// `n - 1`. Errors when the paired differences have zero variance.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::stats(format!(
            "paired t-test requires equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::stats("paired t-test requires at least 2 pairs".to_string()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let ss: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum();
    if ss == 0.0 {
        return Err(Error::stats(
            "paired t-test undefined: differences have zero variance".to_string(),
        ));
    }
    let sd = (ss / (n - 1) as f64).sqrt();
    let t = mean / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    let p = regularized_inc_beta(df / 2.0, 0.5, df / (df + t * t));
    Ok((t, p))
}

/// Lanczos approximation of ln Γ(x), g = 7, n = 9.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

// ---- report ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub id: String,
    pub dsc: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
    pub fps: Option<f64>,
    /// Two-sided p-value of the paired t-test on per-image DSC against a
    /// baseline report, when one was supplied.
    pub p_value_vs_baseline: Option<f64>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ImageMetrics>) -> Self {
        MetricsReport { rows, fps: None, p_value_vs_baseline: None }
    }

    pub fn push(&mut self, id: String, counts: &Counts) {
        self.rows.push(ImageMetrics {
            id,
            dsc: dsc(counts),
            miou: miou(counts),
            recall: recall(counts),
            precision: precision(counts),
        });
    }

    fn column(&self, f: impl Fn(&ImageMetrics) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn dsc_values(&self) -> Vec<f64> {
        self.column(|r| r.dsc)
    }

    /// Mean and per-image dispersion (population standard deviation).
    pub fn mean_std(&self, f: impl Fn(&ImageMetrics) -> f64) -> (f64, f64) {
        let vals = self.column(f);
        if vals.is_empty() {
            return (0.0, 0.0);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    }

    pub fn mean_dsc(&self) -> f64 {
        self.mean_std(|r| r.dsc).0
    }

    /// Attaches the paired t-test against a baseline's per-image DSC.
    pub fn compare_to(&mut self, baseline: &MetricsReport) -> Result<()> {
        let (_, p) = paired_t_test(&self.dsc_values(), &baseline.dsc_values())?;
        self.p_value_vs_baseline = Some(p);
        Ok(())
    }

    /// Plain-text aligned table with aggregate mean +/- std rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>9}",
            "image_id", "dsc", "miou", "recall", "precision"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>9.4}",
                r.id, r.dsc, r.miou, r.recall, r.precision
            );
        }
        let (dm, ds) = self.mean_std(|r| r.dsc);
        let (im, is) = self.mean_std(|r| r.miou);
        let (rm, rs) = self.mean_std(|r| r.recall);
        let (pm, ps) = self.mean_std(|r| r.precision);
        let _ = writeln!(
            out,
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>9.4}",
            "mean", dm, im, rm, pm
        );
        let _ = writeln!(
            out,
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>9.4}",
            "std", ds, is, rs, ps
        );
        if let Some(fps) = self.fps {
            let _ = writeln!(out, "fps {:.2}", fps);
        }
        if let Some(p) = self.p_value_vs_baseline {
            let _ = writeln!(out, "paired t-test p-value vs baseline: {:.6e}", p);
        }
        out
    }

    /// Machine-readable CSV with the header `image_id,dsc,miou,recall,precision`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,dsc,miou,recall,precision\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.id, r.dsc, r.miou, r.recall, r.precision
            );
        }
        out
    }
}

/// Images per second of `run` (which processes `images_per_pass` images),
/// measured over `trials` calls after one warm-up call.
pub fn fps<F: FnMut()>(mut run: F, images_per_pass: usize, trials: usize) -> f64 {
    run();
    let start = Instant::now();
    for _ in 0..trials {
        run();
    }
    let elapsed = start.elapsed().as_secs_f64();
    (trials * images_per_pass) as f64 / elapsed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_have_no_errors() {
        let m = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let c = confusion_counts(&m, &m).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(dsc(&c), 1.0);
    }

    #[test]
    fn all_ones_vs_all_zeros_is_pure_false_positive() {
        let p = Tensor::full(vec![1, 1, 4, 4], 1.0);
        let g = Tensor::zeros(vec![1, 1, 4, 4]);
        let c = confusion_counts(&p, &g).unwrap();
        assert_eq!(c.fp, 16);
        assert_eq!((c.tp, c.fn_, c.tn), (0, 0, 0));
    }

    #[test]
    fn half_overlap_substitution() {
        // Equal-area masks overlapping on half the union: TP = 2k with
        // FP = FN = k -> DSC = 2/3, IoU = 1/2.
        let c = Counts { tp: 10, fp: 5, fn_: 5, tn: 0 };
        assert!((dsc(&c) - 2.0 / 3.0).abs() < 1e-15);
        assert!((miou(&c) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_vs_empty_scores_one_everywhere() {
        let c = Counts { tp: 0, fp: 0, fn_: 0, tn: 9 };
        assert_eq!(dsc(&c), 1.0);
        assert_eq!(miou(&c), 1.0);
        assert_eq!(recall(&c), 1.0);
        assert_eq!(precision(&c), 1.0);
    }

    #[test]
    fn precision_equals_recall_when_fp_equals_fn() {
        let c = Counts { tp: 7, fp: 3, fn_: 3, tn: 2 };
        assert_eq!(precision(&c), recall(&c));
    }

    #[test]
    fn t_test_rejects_zero_variance_and_short_input() {
        let a = vec![0.5, 0.5, 0.5];
        assert!(matches!(paired_t_test(&a, &a), Err(Error::Stats(_))));
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn t_is_invariant_to_common_scaling_of_differences() {
        let a = vec![1.0, 2.0, 4.0, 0.5];
        let b = vec![0.0; 4];
        let scaled: Vec<f64> = a.iter().map(|v| v * 2.0).collect();
        let (t1, p1) = paired_t_test(&a, &b).unwrap();
        let (t2, p2) = paired_t_test(&scaled, &b).unwrap();
        assert!((t1 - t2).abs() < 1e-12);
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn report_table_and_csv_contain_all_rows() {
        let mut rep = MetricsReport::default();
        rep.push("img_0".to_string(), &Counts { tp: 4, fp: 0, fn_: 0, tn: 12 });
        rep.push("img_1".to_string(), &Counts { tp: 2, fp: 2, fn_: 2, tn: 10 });
        let csv = rep.to_csv();
        assert!(csv.starts_with("image_id,dsc,miou,recall,precision\n"));
        assert_eq!(csv.lines().count(), 3);
        let table = rep.to_table();
        assert!(table.contains("img_1") && table.contains("mean") && table.contains("std"));
    }

    #[test]
    fn fps_of_single_image_single_trial_is_inverse_elapsed() {
        let v = fps(|| std::thread::sleep(std::time::Duration::from_millis(2)), 1, 1);
        assert!(v.is_finite() && v > 0.0 && v < 1000.0);
    }
}
