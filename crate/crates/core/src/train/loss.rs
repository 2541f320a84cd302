//! Classification and logit-distillation losses with their gradients.

use crate::error::{shape_err, Error, Result};
use crate::tensor::FloatTensor;

/// Numerically stable `log softmax(z / t)`.
pub fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
    let lse = z.iter().map(|v| (v / t - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v / t - lse).collect()
}

pub fn softmax_t(z: &[f64], t: f64) -> Vec<f64> {
    log_softmax(z, t).into_iter().map(f64::exp).collect()
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Soft cross-entropy `−Σ softmax(teacher/T) · log softmax(student/T)`.
pub fn distill_loss(student: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return shape_err(format!("{} student logits vs {} teacher logits", student.len(), teacher.len()));
    }
    check_temperature(temperature)?;
    let p = softmax_t(teacher, temperature);
    let ls = log_softmax(student, temperature);
    Ok(-p.iter().zip(&ls).map(|(p, l)| if *p == 0.0 { 0.0 } else { p * l }).sum::<f64>())
}

/// Gradient of [`distill_loss`] with respect to the student logits.
pub fn distill_grad(student: &[f64], teacher: &[f64], temperature: f64) -> Vec<f64> {
    let p = softmax_t(teacher, temperature);
    let q = softmax_t(student, temperature);
    q.iter().zip(&p).map(|(q, p)| (q - p) / temperature).collect()
}

/// Mean loss over a batch of rows and the gradient of that mean.
fn batched(
    logits: &FloatTensor,
    mut per_row: impl FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<(f64, FloatTensor)> {
    let b = logits.rows();
    if b == 0 {
        return shape_err("empty batch");
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for r in 0..b {
        let (l, g) = per_row(r, logits.row(r))?;
        total += l;
        grad.extend(g.into_iter().map(|v| v / b as f64));
    }
    Ok((total / b as f64, FloatTensor::matrix(b, logits.cols(), grad)?))
}

pub fn cross_entropy(logits: &FloatTensor, labels: &[usize]) -> Result<(f64, FloatTensor)> {
    if labels.len() != logits.rows() {
        return shape_err(format!("{} labels for {} rows", labels.len(), logits.rows()));
    }
    batched(logits, |r, z| {
        let y = labels[r];
        if y >= z.len() {
            return Err(Error::Input(format!("label {y} out of range for {} classes", z.len())));
        }
        let ls = log_softmax(z, 1.0);
        let mut g: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
        g[y] -= 1.0;
        Ok((-ls[y], g))
    })
}

pub fn distill_batch(student: &FloatTensor, teacher: &FloatTensor, temperature: f64) -> Result<(f64, FloatTensor)> {
    if student.shape() != teacher.shape() {
        return shape_err("student and teacher logits differ in shape");
    }
    batched(student, |r, z| {
        let t = teacher.row(r);
        Ok((distill_loss(z, t, temperature)?, distill_grad(z, t, temperature)))
    })
}
