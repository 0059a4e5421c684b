//! Adam with one learning rate per parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Gradients;
use crate::model::{AlignmentModel, Block, ParamGroup};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub btm: f64,
    pub mapper: f64,
    pub embedder: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            btm: lr,
            mapper: lr,
            embedder: lr,
        }
    }

    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Btm => self.btm,
            ParamGroup::Mapper => self.mapper,
            ParamGroup::Embedder => self.embedder,
            ParamGroup::Frozen => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// First and second moments, indexed like [`Block::TRAINABLE`].
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
    pub hyper: AdamHyper,
    pub lr: LearningRates,
}

impl AdamState {
    pub fn new(model: &AlignmentModel, lr: LearningRates, hyper: AdamHyper) -> Self {
        let zeros: Vec<Matrix> = Block::TRAINABLE
            .iter()
            .map(|&b| {
                let (r, c) = model.block(b).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            hyper,
            lr,
        }
    }

    /// One bias-corrected Adam update of every trainable block. The frozen
    /// decoder is never touched.
    pub fn step(&mut self, model: &mut AlignmentModel, grads: &Gradients) -> Result<()> {
        for (i, &block) in Block::TRAINABLE.iter().enumerate() {
            let shape = model.block(block).shape();
            if grads.block(block).shape() != shape
                || self.m[i].shape() != shape
                || self.v[i].shape() != shape
            {
                return Err(Error::Config(format!(
                    "optimizer shape mismatch on {}: param {:?}, grad {:?}, moments {:?}",
                    block.name(),
                    shape,
                    grads.block(block).shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, &block) in Block::TRAINABLE.iter().enumerate() {
            let lr = self.lr.for_group(block.group());
            let g = grads.block(block).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = model.block_mut(block).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(model: &mut AlignmentModel, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(model, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;
    use crate::numerics::RngState;

    fn scalar_model() -> AlignmentModel {
        AlignmentModel::init(Dims::new(1, 1, 1, 1), &mut RngState::new(0, 0)).unwrap()
    }

    #[test]
    fn first_step_closed_form() {
        let mut model = scalar_model();
        let before = model.btm_a.get(0, 0);
        let mut grads = Gradients::zeros_like(&model);
        grads.btm_a.set(0, 0, 0.5);
        let mut st = AdamState::new(&model, LearningRates::uniform(0.1), AdamHyper::default());
        adam_step(&mut model, &grads, &mut st).unwrap();
        let delta = before - model.btm_a.get(0, 0);
        assert!((delta - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_model_but_counts_step() {
        let mut model = scalar_model();
        let before = model.clone();
        let grads = Gradients::zeros_like(&model);
        let mut st = AdamState::new(&model, LearningRates::uniform(0.1), AdamHyper::default());
        adam_step(&mut model, &grads, &mut st).unwrap();
        assert_eq!(model, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut model = scalar_model();
        model.btm_a.set(0, 0, 1.0);
        let mut st = AdamState::new(&model, LearningRates::uniform(0.1), AdamHyper::default());
        for _ in 0..100 {
            let mut grads = Gradients::zeros_like(&model);
            grads.btm_a.set(0, 0, 2.0 * model.btm_a.get(0, 0));
            adam_step(&mut model, &grads, &mut st).unwrap();
        }
        assert!(model.btm_a.get(0, 0).abs() < 0.05, "{}", model.btm_a.get(0, 0));
    }

    #[test]
    fn step_one_moves_every_coordinate_by_lr() {
        let mut model = AlignmentModel::init(Dims::new(4, 3, 2, 2), &mut RngState::new(1, 0)).unwrap();
        let before = model.clone();
        let mut grads = Gradients::zeros_like(&model);
        let mut rng = RngState::new(2, 0);
        for b in Block::TRAINABLE {
            for v in grads.block_mut(b).data_mut() {
                let mag = 10f64.powf(-3.0 + 6.0 * rng.uniform());
                *v = if rng.uniform() < 0.5 { -mag } else { mag };
            }
        }
        let lr = 0.01;
        let mut st = AdamState::new(&model, LearningRates::uniform(lr), AdamHyper::default());
        adam_step(&mut model, &grads, &mut st).unwrap();
        for b in Block::TRAINABLE {
            for (x, y) in model.block(b).data().iter().zip(before.block(b).data()) {
                let d = (x - y).abs();
                assert!(d <= lr * (1.0 + 1e-6) && d >= 0.99 * lr, "{d}");
            }
        }
        assert!(model.decoder_w.bit_eq(&before.decoder_w));
    }

    #[test]
    fn group_rates_apply_per_block() {
        let mut model = AlignmentModel::init(Dims::new(2, 2, 1, 1), &mut RngState::new(1, 0)).unwrap();
        let before = model.clone();
        let mut grads = Gradients::zeros_like(&model);
        for b in Block::TRAINABLE {
            for v in grads.block_mut(b).data_mut() {
                *v = 1.0;
            }
        }
        let lr = LearningRates { btm: 0.1, mapper: 0.0, embedder: 0.01 };
        let mut st = AdamState::new(&model, lr, AdamHyper::default());
        st.step(&mut model, &grads).unwrap();
        assert_eq!(model.mapper_w, before.mapper_w);
        let d_btm = before.btm_a.get(0, 0) - model.btm_a.get(0, 0);
        let d_emb = before.embed_w.get(0, 0) - model.embed_w.get(0, 0);
        assert!((d_btm - 0.1).abs() < 1e-6 && (d_emb - 0.01).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut model = scalar_model();
        let other = AlignmentModel::init(Dims::new(2, 1, 1, 1), &mut RngState::new(0, 0)).unwrap();
        let grads = Gradients::zeros_like(&other);
        let mut st = AdamState::new(&model, LearningRates::uniform(0.1), AdamHyper::default());
        assert!(st.step(&mut model, &grads).is_err());
        assert_eq!(st.t, 0);
    }

    #[test]
    fn deterministic() {
        let model = AlignmentModel::init(Dims::new(4, 3, 2, 2), &mut RngState::new(1, 0)).unwrap();
        let mut grads = Gradients::zeros_like(&model);
        grads.btm_b = RngState::new(3, 0).gaussian(2, 3, 0.0, 1.0);
        let run = || {
            let mut m = model.clone();
            let mut st = AdamState::new(&m, LearningRates::uniform(0.01), AdamHyper::default());
            for _ in 0..3 {
                st.step(&mut m, &grads).unwrap();
            }
            (m, st)
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert!(m1.btm_b.bit_eq(&m2.btm_b));
        assert_eq!(s1, s2);
    }
}
