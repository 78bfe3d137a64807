use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::prompt::{BankGrads, ParamGroup, PromptBank};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments, one pair per bank tensor in
/// [`PromptBank::tensors`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
    /// Updates applied so far.
    pub steps: u64,
}

impl Adam {
    pub fn new(bank: &PromptBank) -> Self {
        let zeros: Vec<Mat> = bank.tensors().iter().map(|(_, _, m)| Mat::zeros(m.rows(), m.cols())).collect();
        Self { first: zeros.clone(), second: zeros, steps: 0 }
    }

    /// One Adam update of every trainable group. Frozen tensors and their
    /// moments are left untouched.
    pub fn update(&mut self, bank: &mut PromptBank, grads: &BankGrads, learning_rate: f64) -> Result<()> {
        let grads = grads.tensors();
        if grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch("gradients do not match optimizer state".into()));
        }
        self.steps += 1;
        let t = i32::try_from(self.steps).unwrap_or(i32::MAX);
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let trainable = bank.trainable;
        for (k, (group, param)) in bank.tensors_mut().into_iter().enumerate() {
            let on = match group {
                ParamGroup::Shared => trainable.shared,
                ParamGroup::Attention => trainable.attention,
                ParamGroup::ClassTokens => trainable.class_tokens,
            };
            if !on {
                continue;
            }
            let g = grads[k].as_slice();
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            for (((p, gi), mi), vi) in param.as_mut_slice().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *p -= learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{ClassInit, DescriptionFile, ModelConfig};

    fn bank() -> PromptBank {
        let cfg = ModelConfig {
            token_dim: 4,
            embed_dim: 4,
            key_dim: 4,
            prompt_len: 3,
            shared_prompts: 1,
            class_prompts: 1,
            ..Default::default()
        };
        let files = vec![DescriptionFile { class_name: "cat".into(), descriptions: vec!["a cat".into()] }];
        PromptBank::new(cfg, &files, ClassInit::Descriptions, 0).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut b = bank();
        let before = b.clone();
        let mut grads = BankGrads::zeros_like(&b);
        grads.shared[0] = Mat::filled(2, 4, 3.0);
        let mut adam = Adam::new(&b);
        adam.update(&mut b, &grads, 0.1).unwrap();
        for (x, y) in b.shared[0].as_slice().iter().zip(before.shared[0].as_slice()) {
            assert!((y - x - 0.1).abs() < 1e-8);
        }
        assert_eq!(b.attention, before.attention);
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut b = bank();
        b.trainable.shared = false;
        let before = b.clone();
        let mut grads = BankGrads::zeros_like(&b);
        grads.shared[0] = Mat::filled(2, 4, 1.0);
        grads.class_tokens[0][0] = Mat::filled(2, 4, 1.0);
        let mut adam = Adam::new(&b);
        adam.update(&mut b, &grads, 0.5).unwrap();
        assert_eq!(b.shared, before.shared);
        assert_eq!(b.classes, before.classes);
        assert!(adam.first[0].as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut b = bank();
        let before = b.clone();
        let mut grads = BankGrads::zeros_like(&b);
        grads.query = Mat::filled(4, 4, -2.0);
        Adam::new(&b).update(&mut b, &grads, 0.0).unwrap();
        assert_eq!(b, before);
    }
}
