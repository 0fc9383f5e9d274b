//! Multi-head self-attention with an additive logit bias.
//!
//! Per head `h` with width `d/heads`:
//!
//! ```text
//! S_h = Q_h K_hᵀ / √d + B        A_h = softmax_rows(S_h)        O_h = A_h V_h
//! ```
//!
//! where `Q = X W_q`, `K = X W_k`, `V = X W_v`, and `B` is shared by all heads.
//! Heads are concatenated and projected by `W_o`. The temperature uses the
//! model width `d`, not the head width.
//!
//! Everything here is generic over `f32`/`f64` and comes with a hand-written
//! backward pass.

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::reorder::SectorPermutation;

#[inline]
pub(crate) fn cast<T: NdFloat>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

/// Projection matrices, each `d x d`, partitioned column-wise into heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub heads: usize,
}

impl<T: NdFloat> AttentionParams<T> {
    pub fn new(wq: Array2<T>, wk: Array2<T>, wv: Array2<T>, wo: Array2<T>, heads: usize) -> Result<Self> {
        let d = wq.nrows();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        for (name, w) in [("wq", &wq), ("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if w.dim() != (d, d) {
                return Err(Error::Shape(format!("{name} is {:?}, expected ({d}, {d})", w.dim())));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("{name} has non-finite entries")));
            }
        }
        Ok(AttentionParams { wq, wk, wv, wo, heads })
    }

    /// Gaussian init with std `1/√d`.
    pub fn random(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let mut w = || Array2::from_shape_simple_fn((d, d), || {
            let z: f64 = StandardNormal.sample(rng);
            cast::<T>(z * std)
        });
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        AttentionParams::new(wq, wk, wv, wo, heads)
    }

    pub fn width(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_width(&self) -> usize {
        self.width() / self.heads
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.width();
        AttentionParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            heads: self.heads,
        }
    }
}

/// Learnable two-channel coordinate grid (`N x 2`) projected to the model
/// width by a `2 x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbedding<T> {
    pub grid: Array2<T>,
    pub proj: Array2<T>,
}

impl<T: NdFloat> PositionalEmbedding<T> {
    /// `N x d` additive embedding.
    pub fn embedding(&self) -> Array2<T> {
        self.grid.dot(&self.proj)
    }

    /// Gradients of `grid` and `proj` given the gradient of the embedding.
    pub fn backward(&self, d_embedding: ArrayView2<'_, T>) -> (Array2<T>, Array2<T>) {
        (d_embedding.dot(&self.proj.t()), self.grid.t().dot(&d_embedding))
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Post-softmax weights per head.
    weights: Vec<Array2<T>>,
    concat: Array2<T>,
}

impl<T: NdFloat> AttentionCache<T> {
    pub fn weights(&self) -> &[Array2<T>] {
        &self.weights
    }

    /// Head-averaged attention weights.
    pub fn mean_weights(&self) -> Array2<T> {
        let n = self.x.nrows();
        let mut acc = Array2::<T>::zeros((n, n));
        for w in &self.weights {
            acc += w;
        }
        acc / cast::<T>(self.weights.len() as f64)
    }
}

/// Gradients of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub x: Array2<T>,
    pub params: AttentionParams<T>,
    /// Gradient of the shared logit bias, summed over heads.
    pub bias: Array2<T>,
}

fn check_shapes<T: NdFloat>(
    x: &ArrayView2<'_, T>,
    params: &AttentionParams<T>,
    bias: Option<&ArrayView2<'_, T>>,
) -> Result<()> {
    let (n, d) = x.dim();
    if d != params.width() {
        return Err(Error::Shape(format!("tokens have width {d}, params expect {}", params.width())));
    }
    if let Some(b) = bias {
        if b.dim() != (n, n) {
            return Err(Error::Shape(format!("bias is {:?}, expected ({n}, {n})", b.dim())));
        }
    }
    Ok(())
}

/// In-place numerically stable row softmax. Fails on a non-finite row.
fn softmax_rows<T: NdFloat>(s: &mut Array2<T>) -> Result<()> {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        if !max.is_finite() {
            return Err(Error::numeric("attention", "non-finite logits"));
        }
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
    Ok(())
}

/// Forward pass keeping intermediates for [`attend_backward`].
pub fn attend_forward<T: NdFloat>(
    tokens: ArrayView2<'_, T>,
    params: &AttentionParams<T>,
    bias: Option<ArrayView2<'_, T>>,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    check_shapes(&tokens, params, bias.as_ref())?;
    let (n, d) = tokens.dim();
    let dh = params.head_width();
    let scale = cast::<T>(1.0 / (d as f64).sqrt());
    let q = tokens.dot(&params.wq);
    let k = tokens.dot(&params.wk);
    let v = tokens.dot(&params.wv);
    let mut concat = Array2::<T>::zeros((n, d));
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut logits = q.slice(cols).dot(&k.slice(cols).t());
        logits.mapv_inplace(|x| x * scale);
        if let Some(b) = &bias {
            logits += b;
        }
        softmax_rows(&mut logits)?;
        concat.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
        weights.push(logits);
    }
    let out = concat.dot(&params.wo);
    Ok((
        out,
        AttentionCache {
            x: tokens.to_owned(),
            q,
            k,
            v,
            weights,
            concat,
        },
    ))
}

/// Backward pass of [`attend_forward`].
pub fn attend_backward<T: NdFloat>(
    cache: &AttentionCache<T>,
    params: &AttentionParams<T>,
    d_out: ArrayView2<'_, T>,
) -> AttentionGrads<T> {
    let (n, d) = cache.x.dim();
    let dh = params.head_width();
    let scale = cast::<T>(1.0 / (d as f64).sqrt());
    let d_wo = cache.concat.t().dot(&d_out);
    let d_concat = d_out.dot(&params.wo.t());
    let mut dq = Array2::<T>::zeros((n, d));
    let mut dk = Array2::<T>::zeros((n, d));
    let mut dv = Array2::<T>::zeros((n, d));
    let mut d_bias = Array2::<T>::zeros((n, n));
    for (h, a) in cache.weights.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_concat.slice(cols);
        dv.slice_mut(cols).assign(&a.t().dot(&d_oh));
        // dS = A ⊙ (dA - rowsum(dA ⊙ A))
        let mut ds = d_oh.dot(&cache.v.slice(cols).t());
        let dot = (&ds * a).sum_axis(Axis(1));
        Zip::from(ds.rows_mut())
            .and(a.rows())
            .and(&dot)
            .for_each(|mut ds_row, a_row, &r| {
                Zip::from(&mut ds_row).and(&a_row).for_each(|g, &w| *g = w * (*g - r));
            });
        d_bias += &ds;
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let xt = cache.x.t();
    let mut dx = dq.dot(&params.wq.t());
    dx += &dk.dot(&params.wk.t());
    dx += &dv.dot(&params.wv.t());
    AttentionGrads {
        x: dx,
        params: AttentionParams {
            wq: xt.dot(&dq),
            wk: xt.dot(&dk),
            wv: xt.dot(&dv),
            wo: d_wo,
            heads: params.heads,
        },
        bias: d_bias,
    }
}

fn with_pos<T: NdFloat>(tokens: ArrayView2<'_, T>, pos: Option<&PositionalEmbedding<T>>) -> Result<Array2<T>> {
    match pos {
        None => Ok(tokens.to_owned()),
        Some(p) => {
            let e = p.embedding();
            if e.dim() != tokens.dim() {
                return Err(Error::Shape(format!(
                    "positional embedding {:?} vs tokens {:?}",
                    e.dim(),
                    tokens.dim()
                )));
            }
            Ok(&tokens + &e)
        }
    }
}

/// Biased multi-head attention; `pos` is added to the tokens before the
/// projections.
pub fn attend<T: NdFloat>(
    tokens: ArrayView2<'_, T>,
    params: &AttentionParams<T>,
    bias: Option<ArrayView2<'_, T>>,
    pos: Option<&PositionalEmbedding<T>>,
) -> Result<Array2<T>> {
    let x = with_pos(tokens, pos)?;
    attend_forward(x.view(), params, bias).map(|(out, _)| out)
}

/// Head-averaged, row-stochastic attention weights.
pub fn attention_weights<T: NdFloat>(
    tokens: ArrayView2<'_, T>,
    params: &AttentionParams<T>,
    bias: Option<ArrayView2<'_, T>>,
    pos: Option<&PositionalEmbedding<T>>,
) -> Result<Array2<T>> {
    let x = with_pos(tokens, pos)?;
    attend_forward(x.view(), params, bias).map(|(_, cache)| cache.mean_weights())
}

/// Largest absolute difference between `unapply(attend(apply(X)))` and
/// `attend(X)`, with no bias and no positional term.
pub fn equivariance_check<T: NdFloat>(
    tokens: ArrayView2<'_, T>,
    params: &AttentionParams<T>,
    perm: &SectorPermutation,
) -> Result<T> {
    let direct = attend(tokens, params, None, None)?;
    let permuted = perm.apply_rows(tokens)?;
    let through = attend(permuted.view(), params, None, None)?;
    let restored = perm.unapply_rows(through.view())?;
    Ok(direct
        .iter()
        .zip(restored.iter())
        .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
}
