//! Dense numeric kernels shared by the forward and backward passes.
//!
//! Everything is `f64`: the gradient checks compare against central finite
//! differences at a relative tolerance of 1e-4, which single precision
//! cannot hold through the softmax/normalize chains.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{CdbnError, Result};

/// Additive stabilizer inside every `log(p)` evaluated by the losses.
pub const LOG_EPS: f64 = 1e-12;

pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = v.mapv(|x| (x - max).exp());
    let sum = exp.sum();
    exp / sum
}

pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(z.raw_dim());
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))) {
        dst.assign(&softmax(src));
    }
    out
}

/// Vector-Jacobian product of a row-wise softmax: `dz = p * (dp - <p, dp>)`.
pub fn softmax_rows_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((mut out, pr), dpr) in dz
        .axis_iter_mut(Axis(0))
        .zip(p.axis_iter(Axis(0)))
        .zip(dp.axis_iter(Axis(0)))
    {
        let inner = pr.dot(&dpr);
        out.assign(&(&pr * &(&dpr - inner)));
    }
    dz
}

/// Unit-normalizes `v`, reporting the zero-norm case instead of producing NaNs.
pub fn normalize(v: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = l2_norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.mapv(|x| x / n))
}

/// Backward of `y = v / |v|`: `dv = (dy - y <y, dy>) / |v|`.
pub fn normalize_backward(v: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
    let n = l2_norm(v);
    let y = v.mapv(|x| x / n);
    let proj = y.dot(&dy);
    (&dy - &(y * proj)) / n
}

fn row_norms(m: ArrayView2<f64>, what: &'static str) -> Result<Array1<f64>> {
    let norms: Array1<f64> = m.axis_iter(Axis(0)).map(l2_norm).collect();
    if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(CdbnError::ZeroNormFeature { what, row });
    }
    Ok(norms)
}

/// Pairwise cosine similarity: entry `(i, c)` is `cos(features[i], weights[c])`.
pub fn cosine_matrix(features: ArrayView2<f64>, weights: ArrayView2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != weights.ncols() {
        return Err(CdbnError::shape(
            "cosine_matrix",
            format!("feature dim {}", weights.ncols()),
            format!("feature dim {}", features.ncols()),
        ));
    }
    let fn_ = row_norms(features, "image features")?;
    let wn = row_norms(weights, "class features")?;
    let mut out = features.dot(&weights.t());
    for ((i, c), v) in out.indexed_iter_mut() {
        *v = (*v / (fn_[i] * wn[c])).clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Gradient of a loss through `cosine_matrix` with respect to `weights` only.
/// Image features are constants of the frozen encoder.
pub fn cosine_matrix_backward_weights(
    features: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    cos: ArrayView2<f64>,
    dcos: ArrayView2<f64>,
) -> Array2<f64> {
    let mut dw = Array2::zeros(weights.raw_dim());
    let fhat: Vec<Array1<f64>> = features
        .axis_iter(Axis(0))
        .map(|f| {
            let n = l2_norm(f);
            f.mapv(|x| x / n)
        })
        .collect();
    for (c, w) in weights.axis_iter(Axis(0)).enumerate() {
        let wn = l2_norm(w);
        let what = w.mapv(|x| x / wn);
        let mut acc = Array1::<f64>::zeros(w.len());
        for (i, fh) in fhat.iter().enumerate() {
            let g = dcos[[i, c]];
            if g != 0.0 {
                acc.scaled_add(g, fh);
                acc.scaled_add(-g * cos[[i, c]], &what);
            }
        }
        dw.row_mut(c).assign(&(acc / wn));
    }
    dw
}

/// SHA-256 over the little-endian bytes of a sequence of arrays.
pub fn content_hash<'a, I>(parts: I) -> String
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        for x in part {
            hasher.update(x.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(array![0.2, 0.5, 0.5].view()), 1);
        assert_eq!(argmax(array![1.0, 1.0].view()), 0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(array![0.3, 0.3].view());
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let x = array![[0.0, 0.0]];
        let w = array![[1.0, 0.0]];
        assert!(matches!(
            cosine_matrix(x.view(), w.view()),
            Err(CdbnError::ZeroNormFeature { row: 0, .. })
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let v = array![0.3, -1.2, 0.7];
        let dy = array![0.5, 0.1, -0.4];
        let analytic = normalize_backward(v.view(), dy.view());
        let h = 1e-6;
        for k in 0..3 {
            let mut vp = v.clone();
            vp[k] += h;
            let mut vm = v.clone();
            vm[k] -= h;
            let fp = normalize(vp.view()).unwrap().dot(&dy);
            let fm = normalize(vm.view()).unwrap().dot(&dy);
            assert_abs_diff_eq!(analytic[k], (fp - fm) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn hash_changes_with_content() {
        let a = [1.0, 2.0];
        let b = [1.0, 2.0 + 1e-12];
        assert_ne!(content_hash([&a[..]]), content_hash([&b[..]]));
        assert_eq!(content_hash([&a[..]]), content_hash([&a[..]]));
    }
}
