//! Seeded generators: a small pre-norm ViT with LayerScale, and exact linear
//! dynamical systems.
//!
//! Token layout inside the model is `[CLS, registers.., patches..]`. Register
//! tokens take part in attention but are removed from every recorded array,
//! leaving CLS at kept index 0.

mod block;
mod linear;

pub use block::{fold_layerscale, gelu, layer_norm, BlockOutput, ToyBlockParams};
pub use linear::{generate_linear_span, LinearSystem, MAX_SPECTRAL_RADIUS};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::snapshot::{SnapshotSpan, SpanDims};
use crate::{Error, Result, Scalar};

const WEIGHT_STREAM: u64 = 0;
/// RNG stream for calibration inputs.
pub const CALIBRATION_STREAM: u64 = 1;
/// RNG stream for held-out evaluation inputs.
pub const EVALUATION_STREAM: u64 = 2;

/// Everything needed to regenerate a toy model; weights are never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Tokens per image including CLS and registers.
    pub t: usize,
    pub n_register: usize,
    pub depth: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 42,
            d: 32,
            heads: 4,
            d_ff: 128,
            t: 21,
            n_register: 4,
            depth: 12,
        }
    }
}

impl ToySpec {
    pub fn t_kept(&self) -> usize {
        self.t - self.n_register
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::validation("toy model needs at least one block"));
        }
        if self.t <= self.n_register + 1 {
            return Err(Error::validation(format!(
                "t = {} leaves no patch tokens with {} registers",
                self.t, self.n_register
            )));
        }
        Ok(())
    }
}

/// A deterministic stack of [`ToyBlockParams`].
#[derive(Debug, Clone)]
pub struct ToyModel<T: Scalar> {
    spec: ToySpec,
    blocks: Vec<ToyBlockParams<T>>,
}

/// Full-token activations of one forward pass.
///
/// `states[ℓ]` is `X_ℓ` (`X_0` the input); `anchors[ℓ−1]` and `mlps[ℓ−1]` are
/// the taps of block `ℓ`.
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar> {
    pub states: Vec<DMatrix<T>>,
    pub anchors: Vec<DMatrix<T>>,
    pub mlps: Vec<DMatrix<T>>,
    t: usize,
    n_register: usize,
    images: usize,
}

fn strip_registers<T: Scalar>(x: &DMatrix<T>, t: usize, n_register: usize) -> DMatrix<T> {
    let images = x.ncols() / t;
    let t_kept = t - n_register;
    DMatrix::from_fn(x.nrows(), t_kept * images, |r, c| {
        let (b, tau) = (c / t_kept, c % t_kept);
        let src = if tau == 0 { 0 } else { tau + n_register };
        x[(r, b * t + src)]
    })
}

fn insert_registers<T: Scalar>(
    kept: &DMatrix<T>,
    reference: &DMatrix<T>,
    t: usize,
    n_register: usize,
) -> DMatrix<T> {
    let t_kept = t - n_register;
    let mut full = reference.clone();
    for c in 0..kept.ncols() {
        let (b, tau) = (c / t_kept, c % t_kept);
        let dst = if tau == 0 { 0 } else { tau + n_register };
        full.set_column(b * t + dst, &kept.column(c));
    }
    full
}

fn check_finite<T: Scalar>(m: &DMatrix<T>, block: usize, what: &str) -> Result<()> {
    if let Some(idx) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::Generation {
            block,
            reason: format!("non-finite {what} at flat index {idx}"),
        });
    }
    Ok(())
}

impl<T: Scalar> Trace<T> {
    pub fn depth(&self) -> usize {
        self.states.len() - 1
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// `X_ℓ` without register tokens.
    pub fn kept_state(&self, layer: usize) -> DMatrix<T> {
        strip_registers(&self.states[layer], self.t, self.n_register)
    }

    /// Span `X_i..X_{i+p}` with the taps of block `i` (none at `i = 0`).
    pub fn span(&self, i: usize, p: usize) -> Result<SnapshotSpan<T>> {
        let depth = self.depth();
        let dims = SpanDims {
            d: self.states[0].nrows(),
            t: self.t,
            images: self.images,
            p,
            i,
            depth,
            n_register: self.n_register,
            cls_index: 0,
        };
        dims.validate()?;
        let states = (i..=i + p).map(|l| self.kept_state(l)).collect();
        let (anchor, mlp) = if i == 0 {
            (None, None)
        } else {
            (
                Some(strip_registers(
                    &self.anchors[i - 1],
                    self.t,
                    self.n_register,
                )),
                Some(strip_registers(&self.mlps[i - 1], self.t, self.n_register)),
            )
        };
        SnapshotSpan::new(dims, states, anchor, mlp)
    }
}

impl<T: Scalar> ToyModel<T> {
    /// Draws all block parameters from `spec.seed`.
    pub fn generate(spec: ToySpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(WEIGHT_STREAM);
        let blocks = (0..spec.depth)
            .map(|_| ToyBlockParams::random(&mut rng, spec.d, spec.heads, spec.d_ff))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, blocks })
    }

    pub fn from_blocks(spec: ToySpec, blocks: Vec<ToyBlockParams<T>>) -> Result<Self> {
        spec.validate()?;
        if blocks.len() != spec.depth {
            return Err(Error::validation(format!(
                "spec has depth {} but {} blocks were given",
                spec.depth,
                blocks.len()
            )));
        }
        if let Some((l, _)) = blocks.iter().enumerate().find(|(_, b)| b.dim() != spec.d) {
            return Err(Error::validation(format!(
                "block {} has dimension {} != {}",
                l + 1,
                blocks[l].dim(),
                spec.d
            )));
        }
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Parameters of block `ℓ`, 1-based.
    pub fn block(&self, l: usize) -> &ToyBlockParams<T> {
        &self.blocks[l - 1]
    }

    /// Same network with every block's LayerScale folded away.
    pub fn folded(&self) -> Self {
        Self {
            spec: self.spec,
            blocks: self.blocks.iter().map(fold_layerscale).collect(),
        }
    }

    /// Standard-normal inputs `d × (t·B)` from the given RNG stream of the
    /// model seed.
    pub fn sample_inputs(&self, images: usize, stream: u64) -> DMatrix<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream);
        let cols = self.spec.t * images;
        let vals: Vec<f64> = (0..self.spec.d * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        DMatrix::from_fn(self.spec.d, cols, |r, c| T::lit(vals[c * self.spec.d + r]))
    }

    fn check_input(&self, x: &DMatrix<T>) -> Result<()> {
        if x.nrows() != self.spec.d || x.ncols() == 0 || !x.ncols().is_multiple_of(self.spec.t) {
            return Err(Error::validation(format!(
                "input {:?} is not d = {} by a positive multiple of t = {}",
                x.shape(),
                self.spec.d,
                self.spec.t
            )));
        }
        Ok(())
    }

    /// Runs every block, keeping all states and taps.
    pub fn trace(&self, inputs: &DMatrix<T>) -> Result<Trace<T>> {
        self.check_input(inputs)?;
        check_finite(inputs, 0, "input")?;
        let t = self.spec.t;
        let mut states = vec![inputs.clone()];
        let mut anchors = Vec::with_capacity(self.depth());
        let mut mlps = Vec::with_capacity(self.depth());
        for (l, blk) in self.blocks.iter().enumerate() {
            let out = blk.forward(&states[l], t);
            check_finite(&out.out, l + 1, "hidden state")?;
            anchors.push(out.anchor);
            mlps.push(out.mlp);
            states.push(out.out);
        }
        Ok(Trace {
            states,
            anchors,
            mlps,
            t,
            n_register: self.spec.n_register,
            images: inputs.ncols() / t,
        })
    }

    /// Caches the span `X_i..X_{i+p}` (registers stripped) and the taps of
    /// block `i`.
    pub fn forward_with_taps(
        &self,
        inputs: &DMatrix<T>,
        i: usize,
        p: usize,
    ) -> Result<SnapshotSpan<T>> {
        if i + p > self.depth() {
            return Err(Error::validation(format!(
                "cut start {i} + p {p} exceeds depth {}",
                self.depth()
            )));
        }
        self.trace(inputs)?.span(i, p)
    }

    /// Runs blocks `i+p+1..=L` on a substituted `X_{i+p}` (kept tokens only)
    /// and returns `X_L` without registers. Register tokens are taken from
    /// the ground-truth trace.
    pub fn run_remaining_blocks(
        &self,
        reference: &Trace<T>,
        substituted: &DMatrix<T>,
        i: usize,
        p: usize,
    ) -> Result<DMatrix<T>> {
        let start = i + p;
        if start > self.depth() {
            return Err(Error::validation(format!(
                "cut start {i} + p {p} exceeds depth {}",
                self.depth()
            )));
        }
        let truth = &reference.states[start];
        let kept_cols = truth.ncols() / self.spec.t * self.spec.t_kept();
        if substituted.shape() != (self.spec.d, kept_cols) {
            return Err(Error::validation(format!(
                "substituted state {:?} does not match expected {:?}",
                substituted.shape(),
                (self.spec.d, kept_cols)
            )));
        }
        let mut x = insert_registers(substituted, truth, self.spec.t, self.spec.n_register);
        for l in start..self.depth() {
            x = self.blocks[l].forward(&x, self.spec.t).out;
            check_finite(&x, l + 1, "downstream state")?;
        }
        Ok(strip_registers(&x, self.spec.t, self.spec.n_register))
    }
}
