//! Forward and backward kernels.
//!
//! Every kernel is a pure function over [`Tensor`]s. Backward functions take
//! whatever the forward pass cached plus the upstream gradient and return
//! gradients for each differentiable input. [`super::Tape`] composes them.

use super::{Real, Tensor};
use crate::tokenize::AttentionMaskSpec;
use crate::{LumError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Score assigned to disallowed attention entries before the softmax.
///
/// `exp(MASKED_SCORE - max)` underflows to exactly zero, so masked entries are
/// left out of the softmax outright; the result is identical.
pub const MASKED_SCORE: f64 = -1e9;

/// `y = x W + b`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] || b.len() != w.shape()[1] {
        return Err(LumError::Shape(format!(
            "linear x{:?} w{:?} b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let rows = x.rows();
    let x2 = x.clone().reshape(&[rows, x.cols()])?;
    let mut y = x2.matmul(w)?;
    let out = w.shape()[1];
    for r in 0..rows {
        for (yv, &bv) in y.row_mut(r).iter_mut().zip(b.data()) {
            *yv += bv;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    y.reshape(&shape)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let rows = x.rows();
    let x2 = x.clone().reshape(&[rows, x.cols()])?;
    let dy2 = dy.clone().reshape(&[rows, dy.cols()])?;
    let dx = dy2.matmul_nt(w)?.reshape(x.shape())?;
    let dw = x2.matmul_tn(&dy2)?;
    let mut db = Tensor::zeros(&[dy.cols()]);
    for r in 0..rows {
        for (d, &g) in db.data_mut().iter_mut().zip(dy2.row(r)) {
            *d += g;
        }
    }
    Ok((dx, dw, db))
}

/// Attention probabilities cached by the forward pass, `[heads, seq, seq]`.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub probs: Vec<T>,
    pub seq: usize,
    pub heads: usize,
}

fn check_attention_inputs<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: &AttentionMaskSpec,
) -> Result<(usize, usize)> {
    let seq = q.rows();
    let dim = q.cols();
    if k.shape() != q.shape() || v.shape() != q.shape() || q.shape().len() != 2 {
        return Err(LumError::Shape(format!(
            "attention q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(LumError::Shape(format!(
            "attention dim {dim} not divisible into {heads} heads"
        )));
    }
    if mask.len() != seq {
        return Err(LumError::Mask(format!(
            "mask covers {} positions, sequence has {seq}",
            mask.len()
        )));
    }
    for p in 0..seq {
        if !mask.is_padding(p) && !(0..seq).any(|c| mask.allowed(p, c)) {
            return Err(LumError::Mask(format!(
                "non-padding row {p} has no allowed column"
            )));
        }
    }
    Ok((seq, dim / heads))
}

/// Multi-head scaled dot-product attention restricted by `mask`.
///
/// `q`, `k`, `v` are `[seq, heads * head_dim]`; head `h` owns columns
/// `h*head_dim .. (h+1)*head_dim`. Scores are dense per head; masked entries
/// get probability exactly zero, so masked positions cannot leak into the
/// output. Rows with no allowed column output zeros.
pub fn masked_attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: &AttentionMaskSpec,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (seq, hd) = check_attention_inputs(q, k, v, heads, mask)?;
    let dim = heads * hd;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let allowed: Vec<Vec<usize>> = (0..seq).map(|p| mask.allowed_columns(p)).collect();
    let mut out = Tensor::zeros(&[seq, dim]);
    let mut probs = vec![T::zero(); heads * seq * seq];
    let mut scores = vec![T::zero(); seq * seq];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for h in 0..heads {
        let off = h * hd;
        T::gemm(
            seq, hd, seq, scale,
            &qd[off..], dim as isize, 1,
            &kd[off..], 1, dim as isize,
            T::zero(), &mut scores, seq as isize, 1,
        );
        let ph = &mut probs[h * seq * seq..(h + 1) * seq * seq];
        for (p, cols) in allowed.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            let srow = &scores[p * seq..(p + 1) * seq];
            let prow = &mut ph[p * seq..(p + 1) * seq];
            let max = cols.iter().map(|&c| srow[c]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for &c in cols {
                let e = (srow[c] - max).exp();
                prow[c] = e;
                total += e;
            }
            for &c in cols {
                prow[c] /= total;
            }
        }
        T::gemm(
            seq, seq, hd, T::one(),
            ph, seq as isize, 1,
            &vd[off..], dim as isize, 1,
            T::zero(), &mut out.data_mut()[off..], dim as isize, 1,
        );
    }
    Ok((out, AttentionCache { probs, seq, heads }))
}

/// Returns `(dq, dk, dv)`.
pub fn masked_attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let seq = cache.seq;
    let heads = cache.heads;
    let dim = q.cols();
    if dout.shape() != q.shape() || seq != q.rows() {
        return Err(LumError::Shape(format!(
            "attention gradient {:?} for input {:?}",
            dout.shape(),
            q.shape()
        )));
    }
    let hd = dim / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut dq = Tensor::zeros(&[seq, dim]);
    let mut dk = Tensor::zeros(&[seq, dim]);
    let mut dv = Tensor::zeros(&[seq, dim]);
    let mut ds = vec![T::zero(); seq * seq];
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dout.data());
    for h in 0..heads {
        let off = h * hd;
        let ph = &cache.probs[h * seq * seq..(h + 1) * seq * seq];
        // dP = dO V^T
        T::gemm(
            seq, hd, seq, T::one(),
            &gd[off..], dim as isize, 1,
            &vd[off..], 1, dim as isize,
            T::zero(), &mut ds, seq as isize, 1,
        );
        for p in 0..seq {
            let prow = &ph[p * seq..(p + 1) * seq];
            let drow = &mut ds[p * seq..(p + 1) * seq];
            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pr) in drow.iter_mut().zip(prow) {
                *d = if pr == T::zero() { T::zero() } else { pr * (*d - dot) * scale };
            }
        }
        // dV = P^T dO, dQ = dS K, dK = dS^T Q
        T::gemm(
            seq, seq, hd, T::one(),
            ph, 1, seq as isize,
            &gd[off..], dim as isize, 1,
            T::zero(), &mut dv.data_mut()[off..], dim as isize, 1,
        );
        T::gemm(
            seq, seq, hd, T::one(),
            &ds, seq as isize, 1,
            &kd[off..], dim as isize, 1,
            T::zero(), &mut dq.data_mut()[off..], dim as isize, 1,
        );
        T::gemm(
            seq, seq, hd, T::one(),
            &ds, 1, seq as isize,
            &qd[off..], dim as isize, 1,
            T::zero(), &mut dk.data_mut()[off..], dim as isize, 1,
        );
    }
    Ok((dq, dk, dv))
}

/// Normalised activations and inverse standard deviations per row.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalisation followed by the affine `gamma * xhat + beta`.
pub fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if d == 0 || x.shape().is_empty() {
        return Err(LumError::Shape("layer_norm over a zero-size axis".into()));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(LumError::Shape(format!(
            "layer_norm x{:?} gamma{:?} beta{:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let n = T::lit(d as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for (j, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = gamma.data()[j] * xh[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = dy.cols();
    let n = T::lit(d as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for j in 0..d {
            dgamma.data_mut()[j] += g[j] * xh[j];
            dbeta.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let rs = cache.rstd[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs / n * (n * dxhat[j] - sum - xh[j] * sum_x);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax over the last axis.
pub fn softmax_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() == 0 {
        return Err(LumError::Shape("softmax over a zero-size axis".into()));
    }
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(y)
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = dy.row(r);
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

/// Gathers rows of `table` (shape `[vocab, dim]`).
pub fn embedding_forward<T: Real>(
    table: &Tensor<T>,
    indices: &[usize],
    field: &'static str,
) -> Result<Tensor<T>> {
    let vocab = table.rows();
    let dim = table.cols();
    let mut out = Tensor::zeros(&[indices.len(), dim]);
    for (r, &i) in indices.iter().enumerate() {
        if i >= vocab {
            return Err(LumError::OutOfVocabulary {
                field,
                value: i,
                vocab,
            });
        }
        out.row_mut(r).copy_from_slice(table.row(i));
    }
    Ok(out)
}

/// Scatter-adds `dy` rows into a zero table; repeated indices accumulate.
pub fn embedding_backward<T: Real>(
    table_shape: &[usize],
    indices: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dt = Tensor::zeros(table_shape);
    for (r, &i) in indices.iter().enumerate() {
        for (d, &g) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
            *d += g;
        }
    }
    dt
}

/// Mean of the embeddings in each bag; an empty bag yields a zero row.
pub fn embedding_bag_forward<T: Real>(
    table: &Tensor<T>,
    bags: &[Vec<usize>],
    field: &'static str,
) -> Result<Tensor<T>> {
    let vocab = table.rows();
    let dim = table.cols();
    let mut out = Tensor::zeros(&[bags.len(), dim]);
    for (r, bag) in bags.iter().enumerate() {
        if bag.is_empty() {
            continue;
        }
        let w = T::one() / T::lit(bag.len() as f64);
        for &i in bag {
            if i >= vocab {
                return Err(LumError::OutOfVocabulary {
                    field,
                    value: i,
                    vocab,
                });
            }
            for (o, &t) in out.row_mut(r).iter_mut().zip(table.row(i)) {
                *o += w * t;
            }
        }
    }
    Ok(out)
}

pub fn embedding_bag_backward<T: Real>(
    table_shape: &[usize],
    bags: &[Vec<usize>],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dt = Tensor::zeros(table_shape);
    for (r, bag) in bags.iter().enumerate() {
        if bag.is_empty() {
            continue;
        }
        let w = T::one() / T::lit(bag.len() as f64);
        for &i in bag {
            for (d, &g) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                *d += w * g;
            }
        }
    }
    dt
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let du = c * (T::one() + three * a * v * v);
            g * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Cosine similarity of two vectors.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(LumError::Shape(format!(
            "cosine over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(LumError::ZeroNorm("cosine similarity"));
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::AttentionMaskSpec;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_scalar() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let w = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2], &[0., 0.]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap(), x);
        let y = linear_forward(&t(&[1, 1], &[2.]), &t(&[1, 1], &[3.]), &t(&[1], &[1.])).unwrap();
        assert_eq!(y.data(), &[7.]);
    }

    #[test]
    fn linear_shape_mismatch_names_shapes() {
        let err = linear_forward(
            &Tensor::<f32>::zeros(&[2, 3]),
            &Tensor::zeros(&[4, 2]),
            &Tensor::zeros(&[2]),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn attention_single_position_returns_value_row() {
        let q = t(&[1, 4], &[0.3, -1., 2., 0.5]);
        let v = t(&[1, 4], &[9., 8., 7., 6.]);
        let mask = AttentionMaskSpec::causal(1);
        let (out, _) = masked_attention_forward(&q, &q, &v, 2, &mask).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_diagonal_mask_is_identity_on_values() {
        let q = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let v = t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mask = AttentionMaskSpec::from_fn(3, vec![false; 3], |p, c| p == c);
        let (out, _) = masked_attention_forward(&q, &q, &v, 1, &mask).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attention_rejects_empty_non_padding_row() {
        let q = Tensor::<f32>::zeros(&[2, 2]);
        let mask = AttentionMaskSpec::from_fn(2, vec![false; 2], |p, c| p == 0 && c == 0);
        let err = masked_attention_forward(&q, &q, &q, 1, &mask).unwrap_err();
        assert!(matches!(err, LumError::Mask(_)));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[1, 4], &[3., 3., 3., 3.]);
        let (y, _) = layer_norm_forward(&x, &t(&[4], &[1.; 4]), &t(&[4], &[0.; 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(layer_norm_forward(
            &Tensor::<f32>::zeros(&[2, 0]),
            &Tensor::zeros(&[0]),
            &Tensor::zeros(&[0])
        )
        .is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax_forward(&t(&[1, 2], &[0., 0.])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn embedding_repeated_index_accumulates() {
        let dy = t(&[2, 2], &[1., 2., 3., 4.]);
        let dt = embedding_backward(&[3, 2], &[1, 1], &dy);
        assert_eq!(dt.data(), &[0., 0., 4., 6., 0., 0.]);
        let table = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(
            embedding_forward(&table, &[3], "item_id"),
            Err(LumError::OutOfVocabulary { value: 3, .. })
        ));
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(cosine(&[0.0f32, 0.0], &[1.0, 0.0]).is_err());
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
    }
}
