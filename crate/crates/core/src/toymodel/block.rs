use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result, Scalar};

const LN_EPS: f64 = 1e-5;

/// Parameters of one pre-norm block
/// `A = X + D1 ⊙ MHA(LN1 X)`, `X' = A + D2 ⊙ MLP(LN2 A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlockParams<T: Scalar> {
    pub heads: usize,
    pub wq: DMatrix<T>,
    pub wk: DMatrix<T>,
    pub wv: DMatrix<T>,
    pub wo: DMatrix<T>,
    pub bo: DVector<T>,
    /// `d_ff × d`.
    pub w_in: DMatrix<T>,
    pub b_in: DVector<T>,
    /// `d × d_ff`.
    pub w_out: DMatrix<T>,
    pub b_out: DVector<T>,
    pub d1: DVector<T>,
    pub d2: DVector<T>,
    pub ln1_gain: DVector<T>,
    pub ln1_bias: DVector<T>,
    pub ln2_gain: DVector<T>,
    pub ln2_bias: DVector<T>,
}

/// Outputs of one block on a batch.
#[derive(Debug, Clone)]
pub struct BlockOutput<T: Scalar> {
    /// Post-attention residual `A`.
    pub anchor: DMatrix<T>,
    /// Scaled MLP branch `D2 ⊙ MLP(LN2 A)`.
    pub mlp: DMatrix<T>,
    /// `A + mlp`.
    pub out: DMatrix<T>,
}

fn gaussian<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<T> {
    let n = Normal::new(0.0, std).expect("finite std");
    // Row-major draw order keeps the stream independent of storage order.
    let mut vals = vec![0.0; rows * cols];
    for v in vals.iter_mut() {
        *v = n.sample(rng);
    }
    DMatrix::from_fn(rows, cols, |r, c| T::lit(vals[r * cols + c]))
}

fn gaussian_vec<T: Scalar, R: Rng>(rng: &mut R, n: usize, mean: f64, std: f64) -> DVector<T> {
    let dist = Normal::new(mean, std).expect("finite std");
    DVector::from_fn(n, |_, _| T::lit(dist.sample(rng)))
}

fn log_uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DVector<T> {
    let (a, b) = (lo.ln(), hi.ln());
    DVector::from_fn(n, |_, _| T::lit(rng.random_range(a..=b).exp()))
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Per-token LayerNorm over the feature axis.
pub fn layer_norm<T: Scalar>(x: &DMatrix<T>, gain: &DVector<T>, bias: &DVector<T>) -> DMatrix<T> {
    let d = x.nrows();
    let mut out = x.clone();
    let eps = T::lit(LN_EPS);
    let n = T::from_count(d);
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / n;
        let inv = T::one() / (var + eps).sqrt();
        for f in 0..d {
            col[f] = col[f] * inv * gain[f] + bias[f];
        }
    }
    out
}

fn add_bias<T: Scalar>(m: &mut DMatrix<T>, b: &DVector<T>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

fn scale_rows<T: Scalar>(m: &mut DMatrix<T>, s: &DVector<T>) {
    for (r, mut row) in m.row_iter_mut().enumerate() {
        row *= s[r];
    }
}

impl<T: Scalar> ToyBlockParams<T> {
    /// Random block: projections `N(0, 1/d)` (`W_out` uses `1/d_ff`), LayerScale
    /// log-uniform in `[1e-2, 1]`, LayerNorm gains near one.
    pub fn random<R: Rng>(rng: &mut R, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::validation(format!(
                "d = {d} is not divisible by {heads} heads"
            )));
        }
        if d_ff < d {
            return Err(Error::validation(format!(
                "d_ff = {d_ff} must be at least d = {d}"
            )));
        }
        let sd = (1.0 / d as f64).sqrt();
        let sff = (1.0 / d_ff as f64).sqrt();
        Ok(Self {
            heads,
            wq: gaussian(rng, d, d, sd),
            wk: gaussian(rng, d, d, sd),
            wv: gaussian(rng, d, d, sd),
            wo: gaussian(rng, d, d, sd),
            bo: gaussian_vec(rng, d, 0.0, 0.02),
            w_in: gaussian(rng, d_ff, d, sd),
            b_in: gaussian_vec(rng, d_ff, 0.0, 0.02),
            w_out: gaussian(rng, d, d_ff, sff),
            b_out: gaussian_vec(rng, d, 0.0, 0.02),
            d1: log_uniform(rng, d, 1e-2, 1.0),
            d2: log_uniform(rng, d, 1e-2, 1.0),
            ln1_gain: gaussian_vec(rng, d, 1.0, 0.1),
            ln1_bias: gaussian_vec(rng, d, 0.0, 0.1),
            ln2_gain: gaussian_vec(rng, d, 1.0, 0.1),
            ln2_bias: gaussian_vec(rng, d, 0.0, 0.1),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_in.nrows()
    }

    /// Unscaled attention branch `MHA(LN1 X)` over images of `t` tokens.
    pub fn attention(&self, x: &DMatrix<T>, t: usize) -> DMatrix<T> {
        let d = self.dim();
        let dh = d / self.heads;
        let xn = layer_norm(x, &self.ln1_gain, &self.ln1_bias);
        let q = &self.wq * &xn;
        let k = &self.wk * &xn;
        let v = &self.wv * &xn;
        let scale = T::one() / T::from_count(dh).sqrt();
        let mut o = DMatrix::zeros(d, x.ncols());
        for b in 0..x.ncols() / t {
            let c0 = b * t;
            for h in 0..self.heads {
                let qh = q.view((h * dh, c0), (dh, t));
                let kh = k.view((h * dh, c0), (dh, t));
                let vh = v.view((h * dh, c0), (dh, t));
                // Row τ holds the scores of query τ.
                let mut s = qh.transpose() * kh * scale;
                for mut row in s.row_iter_mut() {
                    let m = row.max();
                    row.apply(|e| *e = (*e - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                o.view_mut((h * dh, c0), (dh, t))
                    .copy_from(&(vh * s.transpose()));
            }
        }
        let mut out = &self.wo * o;
        add_bias(&mut out, &self.bo);
        out
    }

    /// Unscaled MLP branch `W_out GELU(W_in y + b_in) + b_out`.
    pub fn mlp(&self, y: &DMatrix<T>) -> DMatrix<T> {
        let mut h = &self.w_in * y;
        add_bias(&mut h, &self.b_in);
        h.apply(|v| *v = T::lit(gelu(v.as_f64())));
        let mut out = &self.w_out * h;
        add_bias(&mut out, &self.b_out);
        out
    }

    pub fn forward(&self, x: &DMatrix<T>, t: usize) -> BlockOutput<T> {
        let mut attn = self.attention(x, t);
        scale_rows(&mut attn, &self.d1);
        let anchor = x + attn;
        let mut mlp = self.mlp(&layer_norm(&anchor, &self.ln2_gain, &self.ln2_bias));
        scale_rows(&mut mlp, &self.d2);
        let out = &anchor + &mlp;
        BlockOutput { anchor, mlp, out }
    }
}

/// Absorbs both LayerScale diagonals into the preceding output projections
/// and sets them to one.
pub fn fold_layerscale<T: Scalar>(params: &ToyBlockParams<T>) -> ToyBlockParams<T> {
    let mut p = params.clone();
    scale_rows(&mut p.wo, &params.d1);
    p.bo.component_mul_assign(&params.d1);
    scale_rows(&mut p.w_out, &params.d2);
    p.b_out.component_mul_assign(&params.d2);
    p.d1.fill(T::one());
    p.d2.fill(T::one());
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_stats() {
        let x = DMatrix::<f64>::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 6.0]);
        let y = layer_norm(&x, &DVector::from_element(4, 1.0), &DVector::zeros(4));
        assert!(y.sum().abs() < 1e-12);
        assert!((y.norm_squared() / 4.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blk = ToyBlockParams::<f64>::random(&mut rng, 8, 2, 16).unwrap();
        blk.wo = DMatrix::identity(8, 8);
        blk.bo.fill(0.0);
        // Constant values per image make every head output that constant.
        blk.wv = DMatrix::zeros(8, 8);
        let x = DMatrix::from_fn(8, 6, |r, c| (r + c) as f64);
        let o = blk.attention(&x, 3);
        assert!(o.amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(ToyBlockParams::<f64>::random(&mut rng, 10, 4, 16).is_err());
        assert!(ToyBlockParams::<f64>::random(&mut rng, 8, 4, 4).is_err());
    }
}
