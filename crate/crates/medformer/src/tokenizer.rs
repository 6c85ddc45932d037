//! Patch tokenization for 2-D images and 3-D volumes, plus fixed sinusoidal
//! position embeddings over the patch grid.
//!
//! Inputs are `[C, H, W]` or `[C, D, H, W]` tensors. Each patch becomes one
//! token laid out channel-major (all of channel 0's patch voxels, then
//! channel 1's, …) with voxels in row-major order inside the patch. Token
//! order over the grid is row-major for 2-D and depth-major (depth, then
//! row, then column) for 3-D. Images whose sides are not divisible by the
//! patch size are zero-padded; [`unpatchify2d`]/[`unpatchify3d`] drop the
//! padding again, so the pair round-trips exactly.

use crate::tensor::{Scalar, Tensor, TensorError};

/// Geometry of a patchified sample: everything needed to invert the
/// tokenization and to place position embeddings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    /// Channels of the original sample.
    pub channels: usize,
    /// Cubic patch side length.
    pub patch: usize,
    /// Original spatial extents, slowest axis first (`[H, W]` or `[D, H, W]`).
    pub spatial: Vec<usize>,
    /// Patches per axis after ceil division.
    pub grid: Vec<usize>,
}

impl PatchGrid {
    pub fn axes(&self) -> usize {
        self.grid.len()
    }

    /// Number of tokens (product of the grid extents).
    pub fn token_count(&self) -> usize {
        self.grid.iter().product()
    }

    /// Flattened element count per token: `C · patchᵃˣᵉˢ`.
    pub fn token_width(&self) -> usize {
        self.channels * self.patch.pow(self.axes() as u32)
    }

    /// Grid coordinates of a token index, slowest axis first.
    fn coords(&self, token: usize) -> Vec<usize> {
        let mut rem = token;
        let mut out = vec![0; self.grid.len()];
        for (i, &g) in self.grid.iter().enumerate().rev() {
            out[i] = rem % g;
            rem /= g;
        }
        out
    }
}

fn validate_patch(op: &'static str, patch: usize) -> Result<(), TensorError> {
    if patch == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "patch size must be positive".into(),
        });
    }
    Ok(())
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Split a `[C, H, W]` image into `p×p` patch tokens in row-major grid
/// order. Returns the `[n, C·p²]` token matrix and the grid geometry.
/// Emit gathered patch tokens as a graph op so gradients scatter back onto
/// the raw sample; zero-padded positions contribute nothing.
fn gather_tokens<T: Scalar>(
    x: &Tensor<T>,
    out: Vec<T>,
    src: Vec<Option<usize>>,
    grid: &PatchGrid,
    op: &'static str,
) -> Result<Tensor<T>, TensorError> {
    Tensor::from_op(
        out,
        vec![grid.token_count(), grid.token_width()],
        op,
        vec![x.clone()],
        Box::new(move |g, bufs| {
            for (o, s) in src.iter().enumerate() {
                if let Some(i) = *s {
                    bufs[0][i] = bufs[0][i] + g[o];
                }
            }
        }),
    )
}

pub fn patchify2d<T: Scalar>(
    x: &Tensor<T>,
    patch: usize,
) -> Result<(Tensor<T>, PatchGrid), TensorError> {
    validate_patch("patchify2d", patch)?;
    let s = x.shape();
    if s.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "patchify2d",
            shape: s.to_vec(),
            msg: "expected [C, H, W]".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let grid = PatchGrid {
        channels: c,
        patch,
        spatial: vec![h, w],
        grid: vec![ceil_div(h, patch), ceil_div(w, patch)],
    };
    let data = x.data();
    let mut out = Vec::with_capacity(grid.token_count() * grid.token_width());
    let mut src = Vec::with_capacity(out.capacity());
    for gr in 0..grid.grid[0] {
        for gc in 0..grid.grid[1] {
            for ch in 0..c {
                for pr in 0..patch {
                    for pc in 0..patch {
                        let (r, col) = (gr * patch + pr, gc * patch + pc);
                        if r < h && col < w {
                            out.push(data[ch * h * w + r * w + col]);
                            src.push(Some(ch * h * w + r * w + col));
                        } else {
                            out.push(T::zero());
                            src.push(None);
                        }
                    }
                }
            }
        }
    }
    drop(data);
    let tokens = gather_tokens(x, out, src, &grid, "patchify2d")?;
    Ok((tokens, grid))
}

/// Split a `[C, D, H, W]` volume into `p×p×p` patch tokens in depth-major
/// grid order. Returns the `[n, C·p³]` token matrix and the grid geometry.
pub fn patchify3d<T: Scalar>(
    x: &Tensor<T>,
    patch: usize,
) -> Result<(Tensor<T>, PatchGrid), TensorError> {
    validate_patch("patchify3d", patch)?;
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "patchify3d",
            shape: s.to_vec(),
            msg: "expected [C, D, H, W]".into(),
        });
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let grid = PatchGrid {
        channels: c,
        patch,
        spatial: vec![d, h, w],
        grid: vec![
            ceil_div(d, patch),
            ceil_div(h, patch),
            ceil_div(w, patch),
        ],
    };
    let data = x.data();
    let mut out = Vec::with_capacity(grid.token_count() * grid.token_width());
    let mut src = Vec::with_capacity(out.capacity());
    for gd in 0..grid.grid[0] {
        for gr in 0..grid.grid[1] {
            for gc in 0..grid.grid[2] {
                for ch in 0..c {
                    for pd in 0..patch {
                        for pr in 0..patch {
                            for pc in 0..patch {
                                let (dep, r, col) =
                                    (gd * patch + pd, gr * patch + pr, gc * patch + pc);
                                if dep < d && r < h && col < w {
                                    out.push(data[ch * d * h * w + dep * h * w + r * w + col]);
                                    src.push(Some(ch * d * h * w + dep * h * w + r * w + col));
                                } else {
                                    out.push(T::zero());
                                    src.push(None);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(data);
    let tokens = gather_tokens(x, out, src, &grid, "patchify3d")?;
    Ok((tokens, grid))
}

fn check_tokens<T: Scalar>(
    op: &'static str,
    tokens: &Tensor<T>,
    grid: &PatchGrid,
    axes: usize,
) -> Result<(), TensorError> {
    if grid.axes() != axes {
        return Err(TensorError::Invalid {
            op,
            msg: format!("grid has {} axes, expected {axes}", grid.axes()),
        });
    }
    if tokens.shape() != [grid.token_count(), grid.token_width()] {
        return Err(TensorError::InvalidShape {
            op,
            shape: tokens.shape().to_vec(),
            msg: format!(
                "grid wants [{}, {}]",
                grid.token_count(),
                grid.token_width()
            ),
        });
    }
    Ok(())
}

/// Reassemble a `[C, H, W]` image from its tokens, dropping any zero
/// padding introduced by [`patchify2d`].
pub fn unpatchify2d<T: Scalar>(
    tokens: &Tensor<T>,
    grid: &PatchGrid,
) -> Result<Tensor<T>, TensorError> {
    check_tokens("unpatchify2d", tokens, grid, 2)?;
    let (c, p) = (grid.channels, grid.patch);
    let (h, w) = (grid.spatial[0], grid.spatial[1]);
    let mut out = vec![T::zero(); c * h * w];
    let data = tokens.data();
    for t in 0..grid.token_count() {
        let co = grid.coords(t);
        let mut i = t * grid.token_width();
        for ch in 0..c {
            for pr in 0..p {
                for pc in 0..p {
                    let (r, col) = (co[0] * p + pr, co[1] * p + pc);
                    if r < h && col < w {
                        out[ch * h * w + r * w + col] = data[i];
                    }
                    i += 1;
                }
            }
        }
    }
    drop(data);
    Tensor::from_vec(out, &[c, h, w])
}

/// Reassemble a `[C, D, H, W]` volume from its tokens, dropping padding.
pub fn unpatchify3d<T: Scalar>(
    tokens: &Tensor<T>,
    grid: &PatchGrid,
) -> Result<Tensor<T>, TensorError> {
    check_tokens("unpatchify3d", tokens, grid, 3)?;
    let (c, p) = (grid.channels, grid.patch);
    let (d, h, w) = (grid.spatial[0], grid.spatial[1], grid.spatial[2]);
    let mut out = vec![T::zero(); c * d * h * w];
    let data = tokens.data();
    for t in 0..grid.token_count() {
        let co = grid.coords(t);
        let mut i = t * grid.token_width();
        for ch in 0..c {
            for pd in 0..p {
                for pr in 0..p {
                    for pc in 0..p {
                        let (dep, r, col) = (co[0] * p + pd, co[1] * p + pr, co[2] * p + pc);
                        if dep < d && r < h && col < w {
                            out[ch * d * h * w + dep * h * w + r * w + col] = data[i];
                        }
                        i += 1;
                    }
                }
            }
        }
    }
    drop(data);
    Tensor::from_vec(out, &[c, d, h, w])
}

/// Interleaved sin/cos encoding of one scalar position into `width` slots
/// (`width` even): slot `2j` is `sin(pos·ω_j)`, slot `2j+1` is
/// `cos(pos·ω_j)`, with `ω_j = 10000^(−2j/width)`.
fn encode_axis(pos: usize, width: usize, out: &mut Vec<f64>) {
    for j in 0..width / 2 {
        let omega = 1.0 / 10000f64.powf(2.0 * j as f64 / width as f64);
        let arg = pos as f64 * omega;
        out.push(arg.sin());
        out.push(arg.cos());
    }
}

/// Fixed sinusoidal position embedding added to a `[n, d]` token matrix.
///
/// `d` is split into sin/cos pairs distributed as evenly as possible across
/// the grid axes (leading axes absorb the remainder), each axis encoding its
/// grid coordinate independently. Requires an even `d` with at least one
/// pair per axis. Differentiable in `tokens`; the embedding is constant.
pub fn pos_embed<T: Scalar>(
    tokens: &Tensor<T>,
    grid: &PatchGrid,
) -> Result<Tensor<T>, TensorError> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != grid.token_count() {
        return Err(TensorError::InvalidShape {
            op: "pos_embed",
            shape: s.to_vec(),
            msg: format!("expected [{}, d] token matrix", grid.token_count()),
        });
    }
    let d = s[1];
    let axes = grid.axes();
    if d % 2 != 0 || d < 2 * axes {
        return Err(TensorError::Invalid {
            op: "pos_embed",
            msg: format!("embedding width {d} cannot host sin/cos pairs for {axes} axes"),
        });
    }
    // Distribute d/2 pairs across the axes; leading axes get the remainder.
    let pairs = d / 2;
    let widths: Vec<usize> = (0..axes)
        .map(|i| 2 * (pairs / axes + usize::from(i < pairs % axes)))
        .collect();
    let mut pe = Vec::with_capacity(grid.token_count() * d);
    for t in 0..grid.token_count() {
        let co = grid.coords(t);
        for (axis, &width) in widths.iter().enumerate() {
            encode_axis(co[axis], width, &mut pe);
        }
    }
    let pe = Tensor::from_vec(pe.into_iter().map(T::cast).collect(), &[s[0], d])?;
    tokens.add(&pe)
}
