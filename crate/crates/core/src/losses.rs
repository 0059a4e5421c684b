//! Multi-level alignment loss, its analytic gradient, and a central
//! finite-difference checker for that gradient.
//!
//! Forward pipeline for a batch of matched pairs:
//!
//! ```text
//! z_N   = F_N · A
//! z_K   = (1 + γ) ⊙ z_N + β,     [γ | β] = (E_N − E_K) · W_diff + b_diff
//! F̂_K  = z_K · B                  -> l_rec, l_kl against F_K
//! F̃_K  = z_N · B                  -> l_dec through the frozen decoder, against E_N
//! l_latent compares cross dissimilarities of embed(z_N), embed(z_K) with those of E_N, E_K
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AlignmentModel, Block};
use crate::numerics::{log_softmax, norm, softmax, Matrix, NumericsError, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub rec: f64,
    pub kl: f64,
    pub latent: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            rec: 1.0,
            kl: 0.001,
            latent: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_latent: f64,
    pub l_dec: f64,
    pub l_total: f64,
    pub coefficients: LossCoefficients,
}

impl LossBreakdown {
    fn combine(l_rec: f64, l_kl: f64, l_latent: f64, l_dec: f64, c: LossCoefficients) -> Self {
        Self {
            l_rec,
            l_kl,
            l_latent,
            l_dec,
            l_total: l_dec + c.rec * l_rec + c.kl * l_kl + c.latent * l_latent,
            coefficients: c,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_kl, self.l_latent, self.l_dec, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Matched novel/known samples. Row `i` of every matrix belongs to pair `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub f_novel: Matrix,
    pub f_known: Matrix,
    pub e_novel: Matrix,
    pub e_known: Matrix,
    /// Row indices into the novel and known source sessions.
    pub novel_index: Vec<usize>,
    pub known_index: Vec<usize>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.f_novel.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, model: &AlignmentModel) -> Result<()> {
        let b = self.len();
        if b < 2 {
            return Err(Error::Config(format!("batch needs at least 2 pairs, got {b}")));
        }
        let d = model.dims;
        let expect = [
            ("f_novel", self.f_novel.shape(), (b, d.n)),
            ("f_known", self.f_known.shape(), (b, d.k)),
            ("e_novel", self.e_novel.shape(), (b, d.a)),
            ("e_known", self.e_known.shape(), (b, d.a)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Config(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }
}

fn check_same_shape(op: &'static str, x: &Matrix, y: &Matrix) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(NumericsError::DimensionMismatch {
            op,
            left: x.shape(),
            right: y.shape(),
        }
        .into());
    }
    Ok(())
}

/// Batch mean of per-sample squared Euclidean distances.
pub fn loss_rec(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_same_shape("loss_rec", pred, target)?;
    let diff = pred.sub(target)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / pred.rows() as f64)
}

/// Batch mean of `KL(softmax(pred_i) || softmax(target_i))`.
pub fn loss_kl(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_same_shape("loss_kl", pred, target)?;
    let mut total = 0.0;
    for r in 0..pred.rows() {
        total += kl_row(pred.row(r), target.row(r));
    }
    Ok(total / pred.rows() as f64)
}

fn kl_row(x: &[f64], y: &[f64]) -> f64 {
    let lp = log_softmax(x);
    let lq = log_softmax(y);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Cross dissimilarity matrix, entry `(i, j) = 1 - cos(U_i, V_j)`.
pub fn dissimilarity_matrix(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    if u.cols() != v.cols() {
        return Err(NumericsError::DimensionMismatch {
            op: "dissimilarity_matrix",
            left: u.shape(),
            right: v.shape(),
        }
        .into());
    }
    let un = normalize_rows(u)?.0;
    let vn = normalize_rows(v)?.0;
    Ok(un.matmul_t(&vn)?.map(|c| 1.0 - c))
}

/// Unit-normalized rows and the original norms.
fn normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let nrm = norm(x.row(r));
        if nrm == 0.0 {
            return Err(NumericsError::ZeroNorm.into());
        }
        for v in out.row_mut(r) {
            *v /= nrm;
        }
        norms.push(nrm);
    }
    Ok((out, norms))
}

fn mean_sq_diff(x: &Matrix, y: &Matrix) -> f64 {
    x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64
}

/// Mean squared difference between the embedding-side and stimulus-side
/// dissimilarity matrices.
pub fn loss_latent(
    model: &AlignmentModel,
    z_novel: &Matrix,
    z_known: &Matrix,
    e_novel: &Matrix,
    e_known: &Matrix,
) -> Result<f64> {
    if z_novel.rows() < 2 {
        return Err(Error::Config("latent loss needs at least 2 pairs".into()));
    }
    let d_f = dissimilarity_matrix(
        &model.functional_embed(z_novel)?,
        &model.functional_embed(z_known)?,
    )?;
    let d_s = dissimilarity_matrix(e_novel, e_known)?;
    check_same_shape("loss_latent", &d_f, &d_s)?;
    Ok(mean_sq_diff(&d_f, &d_s))
}

/// Per-element MSE between decoded signals and the target stimulus embeddings.
pub fn loss_dec_proxy(model: &AlignmentModel, f_known: &Matrix, e_target: &Matrix) -> Result<f64> {
    let decoded = model.proxy_decode(f_known)?;
    check_same_shape("loss_dec_proxy", &decoded, e_target)?;
    Ok(mean_sq_diff(&decoded, e_target))
}

/// Intermediate activations shared by the loss and its gradient.
struct Forward {
    e_diff: Matrix,
    z_novel: Matrix,
    gamma: Matrix,
    z_known: Matrix,
    pred_known: Matrix,
    decoded: Matrix,
}

fn run_forward(model: &AlignmentModel, batch: &PairedBatch) -> Result<Forward> {
    batch.validate(model)?;
    let e_diff = crate::model::stimulus_difference(&batch.e_novel, &batch.e_known)?;
    let z_novel = model.encode_latent(&batch.f_novel)?;
    let (gamma, beta) = model.film_params(&e_diff)?;
    let z_known = z_novel.hadamard(&gamma.map(|g| 1.0 + g))?.add(&beta)?;
    let pred_known = model.decode_latent(&z_known)?;
    let transferred = model.decode_latent(&z_novel)?;
    let decoded = model.proxy_decode(&transferred)?;
    Ok(Forward {
        e_diff,
        z_novel,
        gamma,
        z_known,
        pred_known,
        decoded,
    })
}

pub fn forward_loss(
    model: &AlignmentModel,
    batch: &PairedBatch,
    coeffs: LossCoefficients,
) -> Result<LossBreakdown> {
    let fw = run_forward(model, batch)?;
    breakdown(model, batch, &fw, coeffs)
}

fn breakdown(
    model: &AlignmentModel,
    batch: &PairedBatch,
    fw: &Forward,
    coeffs: LossCoefficients,
) -> Result<LossBreakdown> {
    let l_rec = loss_rec(&fw.pred_known, &batch.f_known)?;
    let l_kl = loss_kl(&fw.pred_known, &batch.f_known)?;
    let l_latent = loss_latent(model, &fw.z_novel, &fw.z_known, &batch.e_novel, &batch.e_known)?;
    let l_dec = mean_sq_diff(&fw.decoded, &batch.e_novel);
    Ok(LossBreakdown::combine(l_rec, l_kl, l_latent, l_dec, coeffs))
}

/// Gradient of the total loss, one block per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub btm_a: Matrix,
    pub btm_b: Matrix,
    pub mapper_w: Matrix,
    pub mapper_b: Matrix,
    pub embed_w: Matrix,
    pub embed_b: Matrix,
    /// Always zero: the proxy decoder is frozen.
    pub decoder_w: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &AlignmentModel) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            btm_a: z(&model.btm_a),
            btm_b: z(&model.btm_b),
            mapper_w: z(&model.mapper_w),
            mapper_b: z(&model.mapper_b),
            embed_w: z(&model.embed_w),
            embed_b: z(&model.embed_b),
            decoder_w: z(&model.decoder_w),
        }
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

    pub fn is_finite(&self) -> bool {
        Block::ALL.iter().all(|&b| self.block(b).is_finite())
    }
}

/// d KL(softmax(x) || softmax(y)) / dx = p ⊙ (log p − log q − KL).
fn kl_row_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    let lp = log_softmax(x);
    let lq = log_softmax(y);
    let p = softmax(x);
    let s: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
    let kl: f64 = p.iter().zip(&s).map(|(pi, si)| pi * si).sum();
    p.iter().zip(&s).map(|(pi, si)| pi * (si - kl)).collect()
}

/// Backprop through row normalization: `dx = (dx̂ − x̂ (x̂·dx̂)) / ‖x‖`.
fn normalize_rows_backward(unit: &Matrix, norms: &[f64], d_unit: &Matrix) -> Matrix {
    let mut out = d_unit.clone();
    for r in 0..unit.rows() {
        let proj: f64 = unit.row(r).iter().zip(d_unit.row(r)).map(|(a, b)| a * b).sum();
        let u = unit.row(r).to_vec();
        for (o, ui) in out.row_mut(r).iter_mut().zip(u) {
            *o = (*o - ui * proj) / norms[r];
        }
    }
    out
}

/// Loss and exact analytic gradient.
///
/// Terms with a zero coefficient contribute nothing to the gradient, so
/// parameters that only reach a masked term get an exactly-zero block.
pub fn backward(
    model: &AlignmentModel,
    batch: &PairedBatch,
    coeffs: LossCoefficients,
) -> Result<(LossBreakdown, Gradients)> {
    let fw = run_forward(model, batch)?;
    let losses = breakdown(model, batch, &fw, coeffs)?;
    let bsz = batch.len() as f64;
    let h = model.dims.h;

    // Signal-space gradients of the mapper-path prediction.
    let mut d_pred = Matrix::zeros(fw.pred_known.rows(), fw.pred_known.cols());
    if coeffs.rec != 0.0 {
        let scale = 2.0 * coeffs.rec / bsz;
        d_pred.add_assign(&fw.pred_known.sub(&batch.f_known)?.scale(scale))?;
    }
    if coeffs.kl != 0.0 {
        for r in 0..d_pred.rows() {
            let g = kl_row_grad(fw.pred_known.row(r), batch.f_known.row(r));
            for (o, gi) in d_pred.row_mut(r).iter_mut().zip(g) {
                *o += coeffs.kl * gi / bsz;
            }
        }
    }

    // Decoder term on the transferred signal.
    let dec_scale = 2.0 / fw.decoded.len() as f64;
    let d_decoded = fw.decoded.sub(&batch.e_novel)?.scale(dec_scale);
    let d_transferred = d_decoded.matmul_t(&model.decoder_w)?;

    let mut grads = Gradients::zeros_like(model);
    grads.btm_b = fw.z_known.t_matmul(&d_pred)?;
    grads.btm_b.add_assign(&fw.z_novel.t_matmul(&d_transferred)?)?;

    let mut d_z_known = d_pred.matmul_t(&model.btm_b)?;
    let mut d_z_novel = d_transferred.matmul_t(&model.btm_b)?;

    if coeffs.latent != 0.0 {
        let u = model.functional_embed(&fw.z_novel)?;
        let v = model.functional_embed(&fw.z_known)?;
        let (u_hat, u_norm) = normalize_rows(&u)?;
        let (v_hat, v_norm) = normalize_rows(&v)?;
        let d_f = u_hat.matmul_t(&v_hat)?.map(|c| 1.0 - c);
        let d_s = dissimilarity_matrix(&batch.e_novel, &batch.e_known)?;
        // dL/dcos = −dL/dD
        let g = d_f.sub(&d_s)?.scale(-2.0 * coeffs.latent / d_f.len() as f64);
        let d_u_hat = g.matmul(&v_hat)?;
        let d_v_hat = g.t_matmul(&u_hat)?;
        let d_u = normalize_rows_backward(&u_hat, &u_norm, &d_u_hat);
        let d_v = normalize_rows_backward(&v_hat, &v_norm, &d_v_hat);
        grads.embed_w = fw.z_novel.t_matmul(&d_u)?;
        grads.embed_w.add_assign(&fw.z_known.t_matmul(&d_v)?)?;
        grads.embed_b = d_u.column_sums();
        grads.embed_b.add_assign(&d_v.column_sums())?;
        d_z_novel.add_assign(&d_u.matmul_t(&model.embed_w)?)?;
        d_z_known.add_assign(&d_v.matmul_t(&model.embed_w)?)?;
    }

    // Through the modulation z_K = (1 + γ) ⊙ z_N + β.
    let d_gamma = d_z_known.hadamard(&fw.z_novel)?;
    let d_beta = d_z_known.clone();
    d_z_novel.add_assign(&d_z_known.hadamard(&fw.gamma.map(|g| 1.0 + g))?)?;
    let d_zdiff = d_gamma.hconcat(&d_beta)?;
    debug_assert_eq!(d_zdiff.cols(), 2 * h);
    grads.mapper_w = fw.e_diff.t_matmul(&d_zdiff)?;
    grads.mapper_b = d_zdiff.column_sums();

    grads.btm_a = batch.f_novel.t_matmul(&d_z_novel)?;
    Ok((losses, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub worst: f64,
    /// Worst relative error per trainable block, in checkpoint order.
    pub per_block: Vec<(String, f64)>,
    pub coordinates_checked: usize,
}

pub const MIN_EPS: f64 = 1e-7;
pub const MAX_EPS: f64 = 1e-3;
/// Coordinates sampled per block; smaller blocks are checked exhaustively.
pub const COORDS_PER_BLOCK: usize = 200;

/// Compares [`backward`] against central differences of [`forward_loss`].
///
/// Relative error per coordinate is
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check(
    model: &AlignmentModel,
    batch: &PairedBatch,
    coeffs: LossCoefficients,
    eps: f64,
    rng: &mut RngState,
) -> Result<GradCheckReport> {
    if !(MIN_EPS..=MAX_EPS).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference eps must lie in [{MIN_EPS:e}, {MAX_EPS:e}], got {eps:e}"
        )));
    }
    let (_, analytic) = backward(model, batch, coeffs)?;
    let mut probe = model.clone();
    let mut per_block = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for block in Block::TRAINABLE {
        let len = model.block(block).len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > COORDS_PER_BLOCK {
            rng.shuffle(&mut coords);
            coords.truncate(COORDS_PER_BLOCK);
            coords.sort_unstable();
        }
        let mut block_worst = 0.0f64;
        for idx in coords {
            let original = model.block(block).data()[idx];
            probe.block_mut(block).data_mut()[idx] = original + eps;
            let plus = forward_loss(&probe, batch, coeffs)?.l_total;
            probe.block_mut(block).data_mut()[idx] = original - eps;
            let minus = forward_loss(&probe, batch, coeffs)?.l_total;
            probe.block_mut(block).data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.block(block).data()[idx];
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-12);
            block_worst = block_worst.max(rel);
            checked += 1;
        }
        worst = worst.max(block_worst);
        per_block.push((block.name().to_string(), block_worst));
    }
    Ok(GradCheckReport {
        worst,
        per_block,
        coordinates_checked: checked,
    })
}

/// Random model and batch for gradient checking at the given sizes.
pub fn gradcheck_instance(
    dims: crate::model::Dims,
    batch_size: usize,
    seed: u64,
) -> Result<(AlignmentModel, PairedBatch)> {
    let root = RngState::new(seed, 0);
    let mut model = AlignmentModel::init(dims, &mut root.derive(1))?;
    // non-zero biases so their gradients are exercised away from the origin
    model.mapper_b = root.derive(2).gaussian(1, 2 * dims.h, 0.0, 0.2);
    model.embed_b = root.derive(3).gaussian(1, dims.h, 0.0, 0.2);
    let batch = PairedBatch {
        f_novel: root.derive(4).gaussian(batch_size, dims.n, 0.0, 1.0),
        f_known: root.derive(5).gaussian(batch_size, dims.k, 0.0, 1.0),
        e_novel: root.derive(6).gaussian(batch_size, dims.a, 0.0, 0.5),
        e_known: root.derive(7).gaussian(batch_size, dims.a, 0.0, 0.5),
        novel_index: (0..batch_size).collect(),
        known_index: (0..batch_size).collect(),
    };
    Ok((model, batch))
}
