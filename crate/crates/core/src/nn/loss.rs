use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-mean cross-entropy together with its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub scalar: f32,
    pub per_sample: Vec<f32>,
    pub(crate) d_logits: Tensor,
    /// Id of the forward tape the logits came from, if any.
    pub(crate) tape_id: Option<u64>,
}

impl LossValue {
    pub fn is_finite(&self) -> bool {
        self.scalar.is_finite() && self.d_logits.is_finite()
    }

    pub fn d_logits(&self) -> &Tensor {
        &self.d_logits
    }
}

pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input element {i}")));
    }
    Ok(softmax_f64(logits).into_iter().map(|p| p as f32).collect())
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax_class(logits: &[f32]) -> Result<usize> {
    let (first, rest) = logits
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("argmax of an empty vector".into()))?;
    let mut best = (0, *first);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    Ok(best.0)
}

/// Softmax cross-entropy averaged over the batch. `logits` is `[N, C]`, or a
/// single `[C]` vector treated as a batch of one.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let (batch, classes) = match *logits.shape() {
        [c] => (1, c),
        [n, c] => (n, c),
        ref s => return Err(Error::Shape(format!("cross-entropy expects [N, C] logits, got {s:?}"))),
    };
    if labels.len() != batch {
        return Err(Error::Shape(format!("{batch} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut per_sample = Vec::with_capacity(batch);
    let mut grad = Vec::with_capacity(batch * classes);
    let mut total = 0f64;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * classes..(n + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        let loss = log_z - row[label] as f64;
        total += loss;
        per_sample.push(loss as f32);
        for (c, &v) in row.iter().enumerate() {
            let p = (v as f64 - log_z).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad.push(((p - target) / batch as f64) as f32);
        }
    }
    Ok(LossValue {
        scalar: (total / batch as f64) as f32,
        per_sample,
        d_logits: Tensor::new(logits.shape().to_vec(), grad)?,
        tape_id: None,
    })
}
