//! Parameter containers and forward passes.
//!
//! Shapes follow the row-vector convention: a novel-subject signal is a
//! `1 x n` row and the transfer is `F_N · A · B` with `A: n x h`, `B: h x k`.
//! Batched inputs are `batch x dim` and go through the same calls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Novel-subject voxel count.
    pub n: usize,
    /// Known-subject voxel count.
    pub k: usize,
    /// Hidden (rank) size of the transfer matrix.
    pub h: usize,
    /// Stimulus-embedding size.
    pub a: usize,
}

impl Dims {
    pub fn new(n: usize, k: usize, h: usize, a: usize) -> Self {
        Self { n, k, h, a }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.h == 0 || self.a == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive, got n={} k={} h={} a={}",
                self.n, self.k, self.h, self.a
            )));
        }
        Ok(())
    }

    pub fn shape_of(&self, block: Block) -> (usize, usize) {
        match block {
            Block::BtmA => (self.n, self.h),
            Block::BtmB => (self.h, self.k),
            Block::MapperW => (self.a, 2 * self.h),
            Block::MapperB => (1, 2 * self.h),
            Block::EmbedW => (self.h, self.h),
            Block::EmbedB => (1, self.h),
            Block::Decoder => (self.k, self.a),
        }
    }
}

/// Named parameter blocks, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    BtmA,
    BtmB,
    MapperW,
    MapperB,
    EmbedW,
    EmbedB,
    /// Frozen proxy decoder; never updated by the optimizer.
    Decoder,
}

impl Block {
    pub const TRAINABLE: [Block; 6] = [
        Block::BtmA,
        Block::BtmB,
        Block::MapperW,
        Block::MapperB,
        Block::EmbedW,
        Block::EmbedB,
    ];

    pub const ALL: [Block; 7] = [
        Block::BtmA,
        Block::BtmB,
        Block::MapperW,
        Block::MapperB,
        Block::EmbedW,
        Block::EmbedB,
        Block::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::BtmA => "btm_a",
            Block::BtmB => "btm_b",
            Block::MapperW => "mapper_w",
            Block::MapperB => "mapper_b",
            Block::EmbedW => "embed_w",
            Block::EmbedB => "embed_b",
            Block::Decoder => "decoder_w",
        }
    }

    pub fn from_name(name: &str) -> Option<Block> {
        Block::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Block::BtmA | Block::BtmB => ParamGroup::Btm,
            Block::MapperW | Block::MapperB => ParamGroup::Mapper,
            Block::EmbedW | Block::EmbedB => ParamGroup::Embedder,
            Block::Decoder => ParamGroup::Frozen,
        }
    }
}

/// Learning-rate groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Btm,
    Mapper,
    Embedder,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    pub dims: Dims,
    /// `A`, `n x h`, bias-free.
    pub btm_a: Matrix,
    /// `B`, `h x k`, bias-free.
    pub btm_b: Matrix,
    /// Conditioning map `a x 2h`; the first `h` outputs are scales, the rest shifts.
    pub mapper_w: Matrix,
    pub mapper_b: Matrix,
    /// Functional embedder `h x h`.
    pub embed_w: Matrix,
    pub embed_b: Matrix,
    /// Frozen proxy decoder `k x a`.
    pub decoder_w: Matrix,
}

impl AlignmentModel {
    /// Fan-in scaled Gaussian initialization, zero biases.
    pub fn init(dims: Dims, rng: &mut RngState) -> Result<Self> {
        dims.validate()?;
        let fan = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let btm_a = gaussian(rng, dims.n, dims.h, 0.0, fan(dims.n));
        let btm_b = gaussian(rng, dims.h, dims.k, 0.0, fan(dims.h));
        let mapper_w = gaussian(rng, dims.a, 2 * dims.h, 0.0, fan(dims.a));
        let embed_w = gaussian(rng, dims.h, dims.h, 0.0, fan(dims.h));
        let decoder_w = gaussian(rng, dims.k, dims.a, 0.0, fan(dims.k));
        Ok(Self {
            dims,
            btm_a,
            btm_b,
            mapper_w,
            mapper_b: Matrix::zeros(1, 2 * dims.h),
            embed_w,
            embed_b: Matrix::zeros(1, dims.h),
            decoder_w,
        })
    }

    pub fn block(&self, block: Block) -> &Matrix {
        match block {
            Block::BtmA => &self.btm_a,
            Block::BtmB => &self.btm_b,
            Block::MapperW => &self.mapper_w,
            Block::MapperB => &self.mapper_b,
            Block::EmbedW => &self.embed_w,
            Block::EmbedB => &self.embed_b,
            Block::Decoder => &self.decoder_w,
        }
    }

    pub fn block_mut(&mut self, block: Block) -> &mut Matrix {
        match block {
            Block::BtmA => &mut self.btm_a,
            Block::BtmB => &mut self.btm_b,
            Block::MapperW => &mut self.mapper_w,
            Block::MapperB => &mut self.mapper_b,
            Block::EmbedW => &mut self.embed_w,
            Block::EmbedB => &mut self.embed_b,
            Block::Decoder => &mut self.decoder_w,
        }
    }

    /// Replaces a block, checking its shape against `dims`.
    pub fn set_block(&mut self, block: Block, value: Matrix) -> Result<()> {
        let expected = self.dims.shape_of(block);
        if value.shape() != expected {
            return Err(Error::Config(format!(
                "block {} must be {:?}, got {:?}",
                block.name(),
                expected,
                value.shape()
            )));
        }
        *self.block_mut(block) = value;
        Ok(())
    }

    pub fn check_shapes(&self) -> Result<()> {
        for block in Block::ALL {
            let expected = self.dims.shape_of(block);
            if self.block(block).shape() != expected {
                return Err(Error::Config(format!(
                    "block {} is {:?}, dims require {:?}",
                    block.name(),
                    self.block(block).shape(),
                    expected
                )));
            }
        }
        Ok(())
    }

    /// `z_N = F_N · A`.
    pub fn encode_latent(&self, f_novel: &Matrix) -> Result<Matrix> {
        Ok(f_novel.matmul(&self.btm_a)?)
    }

    /// `z · B`.
    pub fn decode_latent(&self, z: &Matrix) -> Result<Matrix> {
        Ok(z.matmul(&self.btm_b)?)
    }

    /// The inference path: `F_N · A · B`. Touches only the two BTM factors.
    pub fn btm_apply(&self, f_novel: &Matrix) -> Result<Matrix> {
        self.decode_latent(&self.encode_latent(f_novel)?)
    }

    /// Materializes `M = A · B` (`n x k`).
    pub fn compose_btm(&self) -> Matrix {
        self.btm_a
            .matmul(&self.btm_b)
            .expect("dims keep A and B conformable")
    }

    /// Scale/shift conditioning `z_diff = E_diff · W + b`, split into
    /// `(gamma, beta)` halves of width `h`.
    pub fn film_params(&self, e_diff: &Matrix) -> Result<(Matrix, Matrix)> {
        let z_diff = e_diff.matmul(&self.mapper_w)?.add_row_broadcast(&self.mapper_b)?;
        let h = self.dims.h;
        Ok((z_diff.columns(0, h), z_diff.columns(h, 2 * h)))
    }

    /// `z_K = (1 + gamma) ⊙ z_N + beta`.
    pub fn film_modulate(&self, z_novel: &Matrix, e_diff: &Matrix) -> Result<Matrix> {
        let (gamma, beta) = self.film_params(e_diff)?;
        let scaled = z_novel.hadamard(&gamma.map(|g| 1.0 + g))?;
        Ok(scaled.add(&beta)?)
    }

    /// `z · W_f + b_f`.
    pub fn functional_embed(&self, z: &Matrix) -> Result<Matrix> {
        Ok(z.matmul(&self.embed_w)?.add_row_broadcast(&self.embed_b)?)
    }

    /// Known-subject signal to stimulus-embedding space through the frozen decoder.
    pub fn proxy_decode(&self, f_known: &Matrix) -> Result<Matrix> {
        Ok(f_known.matmul(&self.decoder_w)?)
    }

    /// Installs a decoder fitted on the known subject (see
    /// [`fit_proxy_decoder`]). The block stays frozen during training.
    pub fn set_decoder(&mut self, decoder: Matrix) -> Result<()> {
        self.set_block(Block::Decoder, decoder)
    }
}

/// Element-wise `E_N - E_K`.
pub fn stimulus_difference(e_novel: &Matrix, e_known: &Matrix) -> Result<Matrix> {
    Ok(e_novel.sub(e_known)?)
}

/// Ridge regression from known-subject signals to the stimulus embeddings
/// they were recorded under: `W = (FᵀF + λI)⁻¹ Fᵀ E`.
///
/// This plays the role of a decoder pretrained on the known subject.
pub fn fit_proxy_decoder(f_known: &Matrix, e_known: &Matrix, lambda: f64) -> Result<Matrix> {
    if f_known.rows() != e_known.rows() {
        return Err(Error::Config(format!(
            "decoder fit needs matching rows, got {} and {}",
            f_known.rows(),
            e_known.rows()
        )));
    }
    let pinv = crate::numerics::ridge_pinv(f_known, lambda)?;
    Ok(pinv.matmul(e_known)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub btm: u64,
    pub mapper: u64,
    pub embedder: u64,
    /// Trainable total; the frozen decoder is excluded.
    pub total: u64,
}

pub fn param_count(dims: &Dims) -> ParamCount {
    let (n, k, h, a) = (dims.n as u64, dims.k as u64, dims.h as u64, dims.a as u64);
    let btm = n * h + h * k;
    let mapper = a * 2 * h + 2 * h;
    let embedder = h * h + h;
    ParamCount {
        btm,
        mapper,
        embedder,
        total: btm + mapper + embedder,
    }
}
