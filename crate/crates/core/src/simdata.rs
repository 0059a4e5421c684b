//! Synthetic multi-subject recordings with a known ground-truth transfer.
//!
//! Every subject observes a shared `d`-dimensional stimulus latent through
//! its own mixing map: `F = (E · C) · G_s + noise`, with `E` a unit-norm
//! stimulus embedding, `C: a x d` and `G_s: d x voxels`. The first
//! `⌊ρ · voxels⌋` columns of every `G_s` are copied from one shared block
//! (conserved voxels); the remaining columns are drawn per subject with a
//! log-normal per-voxel gain (variable voxels).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, norm, ridge_pinv, Matrix, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub id: String,
    pub voxels: usize,
    /// Training samples recorded on subject-specific stimuli.
    pub train_samples: usize,
}

fn default_gain_spread() -> f64 {
    0.75
}

/// Generative description of a synthetic world, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub noise_std: f64,
    #[serde(default)]
    pub conserved_fraction: f64,
    /// Log-std of the per-voxel gain on variable voxels; `0` disables it.
    #[serde(default = "default_gain_spread")]
    pub variable_gain_spread: f64,
    /// Stimuli shown to every subject and reserved for evaluation.
    pub eval_stimuli: usize,
    pub subjects: Vec<SubjectSpec>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 24,
            embed_dim: 32,
            noise_std: 0.05,
            conserved_fraction: 0.3,
            variable_gain_spread: default_gain_spread(),
            eval_stimuli: 300,
            subjects: vec![
                SubjectSpec { id: "s1".into(), voxels: 300, train_samples: 800 },
                SubjectSpec { id: "s2".into(), voxels: 240, train_samples: 800 },
                SubjectSpec { id: "s3".into(), voxels: 360, train_samples: 800 },
            ],
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.subjects.is_empty() {
            return fail("world needs at least one subject".into());
        }
        if self.latent_dim == 0 || self.embed_dim == 0 {
            return fail("latent_dim and embed_dim must be positive".into());
        }
        let min_vox = self.subjects.iter().map(|s| s.voxels).min().unwrap_or(0);
        if self.latent_dim > min_vox {
            return fail(format!(
                "latent_dim {} exceeds smallest voxel count {min_vox}",
                self.latent_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.conserved_fraction) {
            return fail(format!("conserved_fraction {} outside [0, 1]", self.conserved_fraction));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.variable_gain_spread >= 0.0) || !self.variable_gain_spread.is_finite() {
            return fail("variable_gain_spread must be finite and >= 0".into());
        }
        let mut ids: Vec<&str> = self.subjects.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return fail("duplicate subject id".into());
        }
        for s in &self.subjects {
            if s.id.is_empty() || !s.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return fail(format!("subject id `{}` must be non-empty [A-Za-z0-9_-]", s.id));
            }
        }
        Ok(())
    }

    pub fn conserved_voxels(&self, voxels: usize) -> usize {
        (self.conserved_fraction * voxels as f64).floor() as usize
    }

    pub fn bank_size(&self) -> usize {
        self.eval_stimuli + self.subjects.iter().map(|s| s.train_samples).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectWorld {
    pub id: String,
    /// `d x voxels`.
    pub mixing: Matrix,
    pub conserved: usize,
    /// Bank indices of this subject's private training stimuli.
    pub train_stimuli: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `bank x a`, unit-norm rows, `f32`-representable.
    pub bank: Matrix,
    /// `a x d`.
    pub stim_to_latent: Matrix,
    pub subjects: Vec<SubjectWorld>,
    /// Bank indices shared by all subjects, in evaluation order.
    pub eval_stimuli: Vec<usize>,
}

const STREAM_BANK: u64 = 1;
const STREAM_LATENT: u64 = 2;
const STREAM_CONSERVED: u64 = 3;
const STREAM_SUBJECT: u64 = 1_000;
const STREAM_SESSION: u64 = 2_000_000;
const RANK_ATTEMPTS: usize = 10;

/// Rows scaled to unit norm, rounded through `f32` (so they survive the
/// dataset format bit-exactly). The rounding perturbs norms by ~1e-8.
fn unit_rows_f32(m: &mut Matrix) {
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        for v in m.row_mut(r) {
            *v = (*v / n) as f32 as f64;
        }
    }
}

/// Whether `gᵀ` (voxels x d) has a clean left inverse.
fn full_rank(mixing: &Matrix) -> bool {
    let g = mixing.transpose();
    match ridge_pinv(&g, 0.0) {
        Ok(p) => p
            .matmul(&g)
            .ok()
            .and_then(|r| r.max_abs_diff(&Matrix::identity(mixing.rows())).ok())
            .is_some_and(|e| e < 1e-6),
        Err(_) => false,
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let root = RngState::new(spec.seed, 0);
    let (d, a) = (spec.latent_dim, spec.embed_dim);

    let mut bank = root.derive(STREAM_BANK).gaussian(spec.bank_size(), a, 0.0, 1.0);
    unit_rows_f32(&mut bank);
    let stim_to_latent = root.derive(STREAM_LATENT).gaussian(a, d, 0.0, 1.0);

    let col_std = 1.0 / (d as f64).sqrt();
    let max_vox = spec.subjects.iter().map(|s| s.voxels).max().unwrap_or(0);
    let shared = root
        .derive(STREAM_CONSERVED)
        .gaussian(d, spec.conserved_voxels(max_vox), 0.0, col_std);

    let eval_stimuli: Vec<usize> = (0..spec.eval_stimuli).collect();
    let mut next = spec.eval_stimuli;
    let mut subjects = Vec::with_capacity(spec.subjects.len());
    for (si, s) in spec.subjects.iter().enumerate() {
        let conserved = spec.conserved_voxels(s.voxels);
        let mut mixing = None;
        for attempt in 0..RANK_ATTEMPTS {
            let mut rng = root.derive(STREAM_SUBJECT + (si * RANK_ATTEMPTS + attempt) as u64);
            let mut g = Matrix::zeros(d, s.voxels);
            for r in 0..d {
                for c in 0..conserved {
                    g.set(r, c, shared.get(r, c));
                }
            }
            let tau = spec.variable_gain_spread;
            for c in conserved..s.voxels {
                let gain = (tau * rng.standard_normal() - 0.5 * tau * tau).exp();
                for r in 0..d {
                    g.set(r, c, gain * col_std * rng.standard_normal());
                }
            }
            if full_rank(&g) {
                mixing = Some(g);
                break;
            }
        }
        let mixing = mixing.ok_or_else(|| Error::RankDeficient {
            subject: s.id.clone(),
            attempts: RANK_ATTEMPTS,
        })?;
        let train_stimuli = (next..next + s.train_samples).collect();
        next += s.train_samples;
        subjects.push(SubjectWorld {
            id: s.id.clone(),
            mixing,
            conserved,
            train_stimuli,
        });
    }
    Ok(World {
        spec: spec.clone(),
        bank,
        stim_to_latent,
        subjects,
        eval_stimuli,
    })
}

impl World {
    pub fn subject(&self, id: &str) -> Result<&SubjectWorld> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    fn subject_index(&self, id: &str) -> Result<usize> {
        self.subjects
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    /// Noise stream for a subject: independent of generation order.
    pub fn session_rng(&self, id: &str) -> Result<RngState> {
        let idx = self.subject_index(id)?;
        Ok(RngState::new(self.spec.seed, STREAM_SESSION + idx as u64))
    }
}

/// One subject's recordings: row `i` of `fmri` was recorded under stimulus
/// `stimulus_ids[i]`, whose embedding is row `i` of `embeddings`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSession {
    pub subject: String,
    pub fmri: Matrix,
    pub stimulus_ids: Vec<usize>,
    pub embeddings: Matrix,
}

impl SubjectSession {
    pub fn len(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stimulus_ids.is_empty()
    }

    pub fn voxels(&self) -> usize {
        self.fmri.cols()
    }

    /// Rows `[start, end)` as a new session.
    pub fn slice(&self, start: usize, end: usize) -> SubjectSession {
        let idx: Vec<usize> = (start..end).collect();
        SubjectSession {
            subject: self.subject.clone(),
            fmri: self.fmri.select_rows(&idx),
            stimulus_ids: self.stimulus_ids[start..end].to_vec(),
            embeddings: self.embeddings.select_rows(&idx),
        }
    }
}

/// `F = (E · C) · G_s + N(0, σ²)`, stored at `f32` precision.
pub fn generate_session(
    world: &World,
    subject: &str,
    stimulus_ids: &[usize],
    rng: &mut RngState,
) -> Result<SubjectSession> {
    let sw = world.subject(subject)?;
    let bank = world.bank.rows();
    if let Some(&id) = stimulus_ids.iter().find(|&&id| id >= bank) {
        return Err(Error::UnknownStimulus { id, bank });
    }
    let embeddings = world.bank.select_rows(stimulus_ids);
    let latent = embeddings.matmul(&world.stim_to_latent)?;
    let mut fmri = latent.matmul(&sw.mixing)?;
    let sigma = world.spec.noise_std;
    let noise = rng.gaussian(fmri.rows(), fmri.cols(), 0.0, sigma);
    if sigma > 0.0 {
        fmri.add_assign(&noise)?;
    }
    Ok(SubjectSession {
        subject: subject.to_string(),
        fmri: fmri.round_to_f32(),
        stimulus_ids: stimulus_ids.to_vec(),
        embeddings,
    })
}

/// For every novel sample, the known sample with the most similar stimulus
/// embedding (cosine; ties go to the lowest index). Pairing is with
/// replacement.
pub fn pair_by_similarity(novel: &SubjectSession, known: &SubjectSession) -> Result<Vec<usize>> {
    if novel.is_empty() || known.is_empty() {
        return Err(Error::Config("pairing needs non-empty sessions".into()));
    }
    let mut unit_known = known.embeddings.clone();
    for r in 0..unit_known.rows() {
        let n = norm(unit_known.row(r));
        if n == 0.0 {
            return Err(crate::numerics::NumericsError::ZeroNorm.into());
        }
        for v in unit_known.row_mut(r) {
            *v /= n;
        }
    }
    let mut pairs = Vec::with_capacity(novel.len());
    for i in 0..novel.len() {
        let q = novel.embeddings.row(i);
        let qn = norm(q);
        if qn == 0.0 {
            return Err(crate::numerics::NumericsError::ZeroNorm.into());
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..unit_known.rows() {
            let sim = crate::numerics::dot(q, unit_known.row(j)) / qn;
            if sim > best.1 {
                best = (j, sim);
            }
        }
        pairs.push(best.0);
    }
    Ok(pairs)
}

/// Brute-force reference used by the pairing tests and checks.
pub fn pair_by_similarity_exhaustive(novel: &SubjectSession, known: &SubjectSession) -> Result<Vec<usize>> {
    (0..novel.len())
        .map(|i| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..known.len() {
                let s = cosine_similarity(novel.embeddings.row(i), known.embeddings.row(j))?;
                if s > best_sim {
                    best_sim = s;
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Ground-truth `n x k` transfer `G_Nᵀ (G_N G_Nᵀ + λI)⁻¹ G_K`, i.e. the map
/// with `F_N · M* = F_K` on noiseless shared stimuli.
pub fn oracle_transfer(world: &World, novel: &str, known: &str, lambda: f64) -> Result<Matrix> {
    let g_n = &world.subject(novel)?.mixing;
    let g_k = &world.subject(known)?.mixing;
    let left = ridge_pinv(&g_n.transpose(), lambda)?; // d x n
    Ok(left.t_matmul(g_k)?)
}

/// Subject recordings plus the split point between training and shared
/// evaluation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub session: SubjectSession,
    /// Rows `[0, train_rows)` are training, the rest evaluation.
    pub train_rows: usize,
}

impl SubjectData {
    pub fn train(&self) -> SubjectSession {
        self.session.slice(0, self.train_rows)
    }

    pub fn eval(&self) -> SubjectSession {
        self.session.slice(self.train_rows, self.session.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn subject(&self, id: &str) -> Result<&SubjectData> {
        self.subjects
            .iter()
            .find(|s| s.session.subject == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    /// Regenerates the world this dataset was sampled from.
    pub fn world(&self) -> Result<World> {
        generate_world(&self.spec)
    }
}

/// Samples every subject's training session followed by the shared
/// evaluation stimuli.
pub fn simulate(world: &World) -> Result<Dataset> {
    let mut subjects = Vec::with_capacity(world.subjects.len());
    for sw in &world.subjects {
        let mut ids = sw.train_stimuli.clone();
        ids.extend_from_slice(&world.eval_stimuli);
        let mut rng = world.session_rng(&sw.id)?;
        let session = generate_session(world, &sw.id, &ids, &mut rng)?;
        subjects.push(SubjectData {
            session,
            train_rows: sw.train_stimuli.len(),
        });
    }
    Ok(Dataset {
        spec: world.spec.clone(),
        subjects,
    })
}

pub const DATASET_FORMAT: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectManifest {
    id: String,
    voxels: usize,
    embed_dim: usize,
    samples: usize,
    train_rows: usize,
    stimulus_ids: Vec<usize>,
    fmri_file: String,
    fmri_sha256: String,
    stim_file: String,
    stim_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    seed: u64,
    latent_dim: usize,
    embed_dim: usize,
    world: WorldSpec,
    subjects: Vec<SubjectManifest>,
}

fn f32_le_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn matrix_from_f32_le(path: &Path, bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix> {
    if bytes.len() != rows * cols * 4 {
        return Err(Error::malformed(
            path,
            format!("expected {} bytes for {rows}x{cols} f32, found {}", rows * cols * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::malformed(path, e.to_string()))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json` plus `fmri_<id>.bin` / `stim_<id>.bin` per subject
/// (little-endian `f32`, row-major, no header).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::new();
    for sd in &dataset.subjects {
        let s = &sd.session;
        let fmri = f32_le_bytes(&s.fmri);
        let stim = f32_le_bytes(&s.embeddings);
        let fmri_file = format!("fmri_{}.bin", s.subject);
        let stim_file = format!("stim_{}.bin", s.subject);
        write_file(&dir.join(&fmri_file), &fmri)?;
        write_file(&dir.join(&stim_file), &stim)?;
        subjects.push(SubjectManifest {
            id: s.subject.clone(),
            voxels: s.voxels(),
            embed_dim: s.embeddings.cols(),
            samples: s.len(),
            train_rows: sd.train_rows,
            stimulus_ids: s.stimulus_ids.clone(),
            fmri_sha256: sha256_hex(&fmri),
            stim_sha256: sha256_hex(&stim),
            fmri_file,
            stim_file,
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT,
        seed: dataset.spec.seed,
        latent_dim: dataset.spec.latent_dim,
        embed_dim: dataset.spec.embed_dim,
        world: dataset.spec.clone(),
        subjects,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), &json)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::malformed(&mpath, e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Version {
            found: manifest.format,
            expected: DATASET_FORMAT,
        });
    }
    let mut subjects = Vec::new();
    for sm in &manifest.subjects {
        if sm.stimulus_ids.len() != sm.samples || sm.train_rows > sm.samples {
            return Err(Error::malformed(&mpath, format!("inconsistent counts for subject {}", sm.id)));
        }
        let read = |name: &str, digest: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != digest {
                return Err(Error::Checksum { path: p });
            }
            Ok(bytes)
        };
        let fmri_bytes = read(&sm.fmri_file, &sm.fmri_sha256)?;
        let stim_bytes = read(&sm.stim_file, &sm.stim_sha256)?;
        let fmri = matrix_from_f32_le(&dir.join(&sm.fmri_file), &fmri_bytes, sm.samples, sm.voxels)?;
        let embeddings = matrix_from_f32_le(&dir.join(&sm.stim_file), &stim_bytes, sm.samples, sm.embed_dim)?;
        subjects.push(SubjectData {
            session: SubjectSession {
                subject: sm.id.clone(),
                fmri,
                stimulus_ids: sm.stimulus_ids.clone(),
                embeddings,
            },
            train_rows: sm.train_rows,
        });
    }
    Ok(Dataset {
        spec: manifest.world,
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorldSpec {
        WorldSpec {
            seed: 3,
            latent_dim: 4,
            embed_dim: 6,
            noise_std: 0.0,
            conserved_fraction: 0.25,
            variable_gain_spread: 0.5,
            eval_stimuli: 10,
            subjects: vec![
                SubjectSpec { id: "n".into(), voxels: 20, train_samples: 30 },
                SubjectSpec { id: "k".into(), voxels: 16, train_samples: 40 },
            ],
        }
    }

    #[test]
    fn full_conservation_makes_subjects_identical() {
        let mut spec = small_spec();
        spec.conserved_fraction = 1.0;
        spec.subjects[1].voxels = 20;
        let w = generate_world(&spec).unwrap();
        assert!(w.subjects[0].mixing.bit_eq(&w.subjects[1].mixing));
    }

    #[test]
    fn conserved_prefix_is_bit_identical() {
        let w = generate_world(&small_spec()).unwrap();
        let (g0, g1) = (&w.subjects[0].mixing, &w.subjects[1].mixing);
        let c = w.subjects[1].conserved;
        assert_eq!((w.subjects[0].conserved, c), (5, 4));
        assert!(g0.columns(0, c).bit_eq(&g1.columns(0, c)));
        assert!(!g0.columns(c, c + 1).bit_eq(&g1.columns(c, c + 1)));
    }

    #[test]
    fn no_conservation_shares_nothing() {
        let mut spec = small_spec();
        spec.conserved_fraction = 0.0;
        let w = generate_world(&spec).unwrap();
        assert_eq!(w.subjects[0].conserved, 0);
        assert!(!w.subjects[0].mixing.columns(0, 1).bit_eq(&w.subjects[1].mixing.columns(0, 1)));
    }

    #[test]
    fn mixing_maps_have_left_inverses() {
        let w = generate_world(&small_spec()).unwrap();
        for s in &w.subjects {
            let g = s.mixing.transpose();
            let r = ridge_pinv(&g, 0.0).unwrap().matmul(&g).unwrap();
            assert!(r.max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-6);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.latent_dim = 17;
        assert!(generate_world(&s).is_err());
        let mut s = small_spec();
        s.conserved_fraction = 1.5;
        assert!(generate_world(&s).is_err());
        let mut s = small_spec();
        s.subjects[1].id = "n".into();
        assert!(generate_world(&s).is_err());
    }

    #[test]
    fn bank_rows_are_unit_norm() {
        let w = generate_world(&small_spec()).unwrap();
        assert_eq!(w.bank.rows(), 80);
        for r in 0..w.bank.rows() {
            assert!((norm(w.bank.row(r)) - 1.0).abs() < 1e-6);
        }
    }

    fn identity_world() -> World {
        let spec = WorldSpec {
            latent_dim: 3,
            embed_dim: 3,
            subjects: vec![SubjectSpec { id: "x".into(), voxels: 3, train_samples: 5 }],
            eval_stimuli: 0,
            ..small_spec()
        };
        let mut w = generate_world(&spec).unwrap();
        w.stim_to_latent = Matrix::identity(3);
        w.subjects[0].mixing = Matrix::identity(3);
        w
    }

    #[test]
    fn identity_world_reproduces_embeddings() {
        let w = identity_world();
        let s = generate_session(&w, "x", &[0, 1, 2, 3, 4], &mut RngState::new(0, 0)).unwrap();
        assert!(s.fmri.bit_eq(&s.embeddings));
    }

    #[test]
    fn noiseless_sessions_repeat() {
        let w = generate_world(&small_spec()).unwrap();
        let a = generate_session(&w, "n", &[1, 2, 3], &mut RngState::new(1, 0)).unwrap();
        let b = generate_session(&w, "n", &[1, 2, 3], &mut RngState::new(2, 0)).unwrap();
        assert!(a.fmri.bit_eq(&b.fmri));
    }

    #[test]
    fn noise_level_matches_sigma() {
        let mut spec = small_spec();
        spec.noise_std = 0.2;
        let noisy = generate_world(&spec).unwrap();
        spec.noise_std = 0.0;
        let clean = generate_world(&spec).unwrap();
        let ids: Vec<usize> = (0..80).cycle().take(500).collect();
        let a = generate_session(&noisy, "n", &ids, &mut RngState::new(5, 0)).unwrap();
        let b = generate_session(&clean, "n", &ids, &mut RngState::new(5, 0)).unwrap();
        let resid = a.fmri.sub(&b.fmri).unwrap();
        assert_eq!(resid.len(), 10_000);
        let std = (resid.data().iter().map(|v| v * v).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((std - 0.2).abs() < 0.05 * 0.2, "{std}");
    }

    #[test]
    fn unknown_subject_and_stimulus() {
        let w = generate_world(&small_spec()).unwrap();
        let mut rng = RngState::new(0, 0);
        assert!(matches!(generate_session(&w, "zz", &[0], &mut rng), Err(Error::UnknownSubject(_))));
        assert!(matches!(
            generate_session(&w, "n", &[80], &mut rng),
            Err(Error::UnknownStimulus { id: 80, bank: 80 })
        ));
    }

    fn session_with(embeddings: &[&[f64]]) -> SubjectSession {
        let e = Matrix::from_rows(embeddings);
        SubjectSession {
            subject: "t".into(),
            fmri: Matrix::zeros(e.rows(), 1),
            stimulus_ids: (0..e.rows()).collect(),
            embeddings: e,
        }
    }

    #[test]
    fn pairing_cases() {
        let novel = session_with(&[&[1.0, 0.0]]);
        let known = session_with(&[&[0.0, 1.0], &[0.9, 0.1]]);
        assert_eq!(pair_by_similarity(&novel, &known).unwrap(), vec![1]);
        let known = session_with(&[&[0.0, 1.0], &[2.0, 0.0], &[1.0, 0.0]]);
        // identical direction at 1 and 2: lowest index wins
        assert_eq!(pair_by_similarity(&novel, &known).unwrap(), vec![1]);
        let zero = session_with(&[&[0.0, 0.0]]);
        assert!(pair_by_similarity(&zero, &known).is_err());
        assert!(pair_by_similarity(&novel, &zero).is_err());
    }

    #[test]
    fn pairing_matches_exhaustive_scan() {
        let w = generate_world(&small_spec()).unwrap();
        let mut rng = RngState::new(0, 0);
        let n = generate_session(&w, "n", &w.subjects[0].train_stimuli, &mut rng).unwrap();
        let mut ids = w.subjects[1].train_stimuli.clone();
        ids.push(w.subjects[0].train_stimuli[3]);
        let k = generate_session(&w, "k", &ids, &mut rng).unwrap();
        let fast = pair_by_similarity(&n, &k).unwrap();
        assert_eq!(fast, pair_by_similarity_exhaustive(&n, &k).unwrap());
        assert_eq!(fast[3], ids.len() - 1);
        assert_eq!(fast, pair_by_similarity(&n, &k).unwrap());
    }

    #[test]
    fn oracle_on_identical_subjects_is_functional_identity() {
        let mut spec = small_spec();
        spec.conserved_fraction = 1.0;
        spec.subjects[1].voxels = 20;
        let w = generate_world(&spec).unwrap();
        let m = oracle_transfer(&w, "n", "k", 0.0).unwrap();
        let s = generate_session(&w, "n", &w.eval_stimuli, &mut RngState::new(0, 0)).unwrap();
        let mapped = s.fmri.matmul(&m).unwrap();
        assert!(mapped.max_abs_diff(&s.fmri).unwrap() < 1e-6);
    }

    #[test]
    fn oracle_with_identity_source_is_target_mixing() {
        let spec = WorldSpec {
            latent_dim: 5,
            conserved_fraction: 0.0,
            subjects: vec![
                SubjectSpec { id: "n".into(), voxels: 5, train_samples: 1 },
                SubjectSpec { id: "k".into(), voxels: 8, train_samples: 1 },
            ],
            ..small_spec()
        };
        let mut w = generate_world(&spec).unwrap();
        w.subjects[0].mixing = Matrix::identity(5);
        let m = oracle_transfer(&w, "n", "k", 0.0).unwrap();
        assert!(m.max_abs_diff(&w.subjects[1].mixing).unwrap() < 1e-14);
    }

    #[test]
    fn oracle_residual_on_held_out_shared_stimuli() {
        let w = generate_world(&small_spec()).unwrap();
        let mut rng = RngState::new(0, 0);
        let n = generate_session(&w, "n", &w.eval_stimuli, &mut rng).unwrap();
        let k = generate_session(&w, "k", &w.eval_stimuli, &mut rng).unwrap();
        let m = oracle_transfer(&w, "n", "k", 0.0).unwrap();
        let resid = n.fmri.matmul(&m).unwrap().sub(&k.fmri).unwrap();
        assert!(resid.frobenius_norm() / k.fmri.frobenius_norm() < 1e-6);
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let w = generate_world(&WorldSpec { noise_std: 0.1, ..small_spec() }).unwrap();
        let ds = simulate(&w).unwrap();
        assert_eq!(ds.subjects[0].train().len(), 30);
        assert_eq!(ds.subjects[0].eval().stimulus_ids, w.eval_stimuli);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.subjects.iter().zip(&ds.subjects) {
            assert!(a.session.fmri.bit_eq(&b.session.fmri));
        }
        assert_eq!(back.world().unwrap(), w);

        // truncated binary
        let p = dir.path().join("fmri_n.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));
        fs::write(&p, &bytes).unwrap();

        // manifest voxel count disagreeing with the binary length
        let mpath = dir.path().join(MANIFEST);
        let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        manifest["subjects"][0]["voxels"] = serde_json::json!(21);
        fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Malformed { .. })));
    }
}
