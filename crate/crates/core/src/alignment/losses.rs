//! The two alignment objectives as plain functions over row-major buffers.
//!
//! Both are sums of softmax cross-entropies; the shared kernel
//! [`softmax_xent_rows`] subtracts the row maximum before exponentiating, since
//! a temperature of 0.07 scales unit-norm similarities into a range where
//! single precision `exp` overflows.

use crate::encoders::EmbeddingBatch;
use crate::error::{Error, Result};

/// Unit-norm tolerance for embeddings entering the contrastive loss.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// `sum_r [lse(scale * x_r) - scale * x_r[t_r]]` and its gradient w.r.t. `x`.
pub(crate) fn softmax_xent_rows(
    logits: &[f64],
    rows: usize,
    cols: usize,
    targets: &[usize],
    scale: f64,
) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), rows * cols);
    assert_eq!(targets.len(), rows);
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let (arg, max) = row
            .iter()
            .map(|v| v * scale)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (j, v)| if v > a.1 { (j, v) } else { a });
        // ln(1 + rest) keeps precision when the target dominates the row.
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, v)| (v * scale - max).exp())
            .sum();
        let log_denom = rest.ln_1p();
        let lse = max + log_denom;
        loss += (max - row[targets[r]] * scale) + log_denom;
        let g = &mut grad[r * cols..(r + 1) * cols];
        for (gj, v) in g.iter_mut().zip(row) {
            *gj = scale * (v * scale - lse).exp();
        }
        g[targets[r]] -= scale;
    }
    (loss, grad)
}

/// Similarity matrix `zv @ zr^T` as `[b, b]`.
pub(crate) fn similarity(zv: &[f64], zr: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            s[i * b + j] = zv[i * d..(i + 1) * d]
                .iter()
                .zip(&zr[j * d..(j + 1) * d])
                .map(|(a, c)| a * c)
                .sum();
        }
    }
    s
}

pub(crate) fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

fn check_normalized(z: &EmbeddingBatch, which: &str) -> Result<()> {
    if !z.normalized {
        return Err(Error::Precondition(format!(
            "{which} embeddings are not marked normalized"
        )));
    }
    for (i, row) in z.rows().enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Precondition(format!(
                "{which} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Global cross-modal alignment: image-anchored InfoNCE summed over the batch,
/// with dot-product similarity scaled by `1 / tau`. With `symmetric` the
/// text-anchored direction is averaged in.
pub fn gca_loss(zv: &EmbeddingBatch, zr: &EmbeddingBatch, tau: f64, symmetric: bool) -> Result<f64> {
    if zv.batch() != zr.batch() || zv.width() != zr.width() {
        return Err(Error::Shape(format!(
            "visual embeddings {}x{} vs report embeddings {}x{}",
            zv.batch(),
            zv.width(),
            zr.batch(),
            zr.width()
        )));
    }
    if zv.batch() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_normalized(zv, "visual")?;
    check_normalized(zr, "report")?;
    let b = zv.batch();
    let targets: Vec<usize> = (0..b).collect();
    let s = similarity(zv.values(), zr.values(), b, zv.width());
    let (rows, _) = softmax_xent_rows(&s, b, b, &targets, 1.0 / tau);
    if symmetric {
        let (cols, _) = softmax_xent_rows(&transpose(&s, b, b), b, b, &targets, 1.0 / tau);
        Ok(0.5 * (rows + cols))
    } else {
        Ok(rows)
    }
}

/// Text-informed multi-view alignment loss. `logits` is `[batch, views, clusters]`
/// row-major; view `m` of sample `i` is labelled with cluster `i`.
pub fn tma_loss(logits: &[f64], batch: usize, views: usize, clusters: usize, tau: f64) -> Result<f64> {
    if batch == 0 || views == 0 {
        return Err(Error::Shape("tma loss needs at least one sample and one view".into()));
    }
    if clusters < batch {
        return Err(Error::Shape(format!(
            "{clusters} cluster logits cannot label a batch of {batch}"
        )));
    }
    if logits.len() != batch * views * clusters {
        return Err(Error::Shape(format!(
            "expected {} logits for [{batch}, {views}, {clusters}], got {}",
            batch * views * clusters,
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite cluster logits".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let targets: Vec<usize> = (0..batch * views).map(|r| r / views).collect();
    let (loss, _) = softmax_xent_rows(logits, batch * views, clusters, &targets, 1.0 / tau);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        let d = rows[0].len();
        EmbeddingBatch::new(rows.iter().flat_map(|r| r.iter().copied()).collect(), d, true).unwrap()
    }

    #[test]
    fn gca_single_pair_is_zero() {
        let z = batch(&[&[0.6, 0.8]]);
        assert_eq!(gca_loss(&z, &z, 0.07, false).unwrap(), 0.0);
    }

    #[test]
    fn gca_uniform_rows_gives_b_ln_b() {
        let r: &[f64] = &[1.0, 0.0, 0.0];
        let z = batch(&[r, r, r, r]);
        let l = gca_loss(&z, &z, 0.07, false).unwrap();
        assert!((l - 4.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn gca_orthonormal_pair_closed_form() {
        let z = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let expect = 2.0 * (1.0 + (-1.0f64 / 0.07).exp()).ln();
        let l = gca_loss(&z, &z, 0.07, false).unwrap();
        assert!((l - expect).abs() < 1e-15, "{l} vs {expect}");
        let sym = gca_loss(&z, &z, 0.07, true).unwrap();
        assert!((sym - expect).abs() < 1e-15);
    }

    #[test]
    fn gca_rejects_mismatch_and_unnormalized() {
        let a = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = batch(&[&[1.0, 0.0]]);
        assert!(matches!(gca_loss(&a, &b, 0.07, false), Err(Error::Shape(_))));
        let mut raw = EmbeddingBatch::new(vec![2.0, 0.0], 2, false).unwrap();
        raw.normalized = true;
        assert!(matches!(gca_loss(&raw, &raw, 0.07, false), Err(Error::Precondition(_))));
        let flag = EmbeddingBatch::new(vec![1.0, 0.0], 2, false).unwrap();
        assert!(matches!(gca_loss(&flag, &flag, 0.07, false), Err(Error::Precondition(_))));
    }

    #[test]
    fn tma_uniform_logits() {
        let l = tma_loss(&[0.3; 4 * 3 * 4], 4, 3, 4, 0.07).unwrap();
        assert!((l - 12.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 16.636).abs() < 1e-3);
    }

    #[test]
    fn tma_single_cluster_is_zero() {
        assert_eq!(tma_loss(&[1.5, -2.0, 7.0], 1, 3, 1, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn tma_scaled_one_hot_closed_form() {
        // logits[i, m] = 10 * e_i
        let logits = [10.0, 0.0, 10.0, 0.0, 0.0, 10.0, 0.0, 10.0];
        let l = tma_loss(&logits, 2, 2, 2, 1.0).unwrap();
        let expect = 4.0 * (1.0 + (-10.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-15);
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let targets = [2, 0];
        let (_, g) = softmax_xent_rows(&logits, 2, 3, &targets, 1.0 / 0.07);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits;
            p[i] += h;
            let mut m = logits;
            m[i] -= h;
            let num = (softmax_xent_rows(&p, 2, 3, &targets, 1.0 / 0.07).0
                - softmax_xent_rows(&m, 2, 3, &targets, 1.0 / 0.07).0)
                / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-5 * (1.0 + num.abs()));
        }
    }
}
