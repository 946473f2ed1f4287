//! Space-time patch flattening of latent segments.

use crate::error::{invalid_shape, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Extents needed to move between `(l, h, w, c)` and `(tokens, p_l·p_s²·c)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_t: usize,
    pub patch_s: usize,
}

impl PatchGrid {
    pub fn new(
        [frames, height, width, channels]: [usize; 4],
        patch_t: usize,
        patch_s: usize,
    ) -> Result<Self> {
        if patch_t == 0 || patch_s == 0 {
            return Err(invalid_shape("patch sizes must be positive"));
        }
        if frames % patch_t != 0 || height % patch_s != 0 || width % patch_s != 0 {
            return Err(invalid_shape(format!(
                "latent ({frames},{height},{width},{channels}) is not divisible by patch {patch_t}x{patch_s}x{patch_s}"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            patch_t,
            patch_s,
        })
    }

    pub fn temporal_tokens(&self) -> usize {
        self.frames / self.patch_t
    }

    pub fn spatial_tokens(&self) -> usize {
        (self.height / self.patch_s) * (self.width / self.patch_s)
    }

    pub fn num_tokens(&self) -> usize {
        self.temporal_tokens() * self.spatial_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_s * self.patch_s * self.channels
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    fn split_shape(&self) -> [usize; 7] {
        [
            self.temporal_tokens(),
            self.patch_t,
            self.height / self.patch_s,
            self.patch_s,
            self.width / self.patch_s,
            self.patch_s,
            self.channels,
        ]
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != self.latent_shape() {
            return Err(invalid_shape(format!(
                "expected latent {:?}, got {shape:?}",
                self.latent_shape()
            )));
        }
        Ok(())
    }

    /// Tokens are ordered time-major, then row, then column.
    pub fn patchify(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z.shape())?;
        z.reshape(&self.split_shape())?
            .permute(&[0, 2, 4, 1, 3, 5, 6])?
            .reshape(&[self.num_tokens(), self.patch_dim()])
    }

    pub fn unpatchify(&self, tokens: &Tensor) -> Result<Tensor> {
        let [nt, pt, hs, ps, ws, ps2, c] = self.split_shape();
        tokens
            .reshape(&[nt, hs, ws, pt, ps, ps2, c])?
            .permute(&[0, 3, 1, 4, 2, 5, 6])?
            .reshape(&self.latent_shape())
    }

    pub fn patchify_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check(g.shape(z))?;
        let split = g.reshape(z, &self.split_shape())?;
        let p = g.permute(split, &[0, 2, 4, 1, 3, 5, 6])?;
        g.reshape(p, &[self.num_tokens(), self.patch_dim()])
    }

    pub fn unpatchify_var(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let [nt, pt, hs, ps, ws, ps2, c] = self.split_shape();
        let split = g.reshape(tokens, &[nt, hs, ws, pt, ps, ps2, c])?;
        let p = g.permute(split, &[0, 3, 1, 4, 2, 5, 6])?;
        g.reshape(p, &self.latent_shape())
    }
}
