use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::{attention_backward, attention_forward, AttentionParams};
use super::descriptions::DescriptionFile;
use super::encoder::FrozenEncoder;
use super::tokens::{class_word, tokenize};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::rng;

/// Shapes and seeds of the prompt model. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub embed_dim: usize,
    /// Must equal `token_dim`: attention outputs feed the same encoder.
    pub key_dim: usize,
    /// Tokens per prompt, class token included.
    pub prompt_len: usize,
    pub shared_prompts: usize,
    pub class_prompts: usize,
    /// Seed of the frozen word embedding and the frozen encoder.
    pub embedding_seed: u64,
    pub train_class_tokens: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            embed_dim: 32,
            key_dim: 32,
            prompt_len: 8,
            shared_prompts: 4,
            class_prompts: 4,
            embedding_seed: 2024,
            train_class_tokens: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("token_dim", self.token_dim),
            ("embed_dim", self.embed_dim),
            ("shared_prompts", self.shared_prompts),
            ("class_prompts", self.class_prompts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.prompt_len < 2 {
            return Err(Error::InvalidArgument("prompt_len must be at least 2".into()));
        }
        if self.key_dim != self.token_dim {
            return Err(Error::InvalidArgument(format!(
                "key_dim {} must equal token_dim {}",
                self.key_dim, self.token_dim
            )));
        }
        Ok(())
    }

    pub fn context_len(&self) -> usize {
        self.prompt_len - 1
    }

    pub fn encoder(&self) -> FrozenEncoder {
        FrozenEncoder::seeded(self.token_dim, self.embed_dim, rng::derive_seed(self.embedding_seed, "encoder"))
    }
}

/// Source of the class-specific context tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassInit {
    Descriptions,
    Random,
}

/// Which parameter groups receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub shared: bool,
    pub attention: bool,
    pub class_tokens: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompts {
    pub name: String,
    /// Frozen class-name token, appended last to every prompt of the class.
    pub word: Vec<f64>,
    /// `P_cs` context matrices of shape `(L−1) × d_tok`.
    pub context: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub config: ModelConfig,
    /// `P_ds` context matrices of shape `(L−1) × d_tok`, one set for all classes.
    pub shared: Vec<Mat>,
    pub classes: Vec<ClassPrompts>,
    pub attention: AttentionParams,
    /// When false, class-specific prompts bypass the adapter.
    pub use_attention: bool,
    pub trainable: Trainable,
}

/// Encoded prompt embeddings of one class, unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    /// `P_ds × d`.
    pub ds: Mat,
    /// `P_cs × d`.
    pub cs: Mat,
}

/// Parameter groups of a [`PromptBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Shared,
    Attention,
    ClassTokens,
}

/// Gradients laid out like the bank's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BankGrads {
    pub shared: Vec<Mat>,
    pub query: Mat,
    pub key: Mat,
    pub value: Mat,
    pub class_tokens: Vec<Vec<Mat>>,
}

impl BankGrads {
    pub fn zeros_like(bank: &PromptBank) -> Self {
        let zero = |m: &Mat| Mat::zeros(m.rows(), m.cols());
        Self {
            shared: bank.shared.iter().map(zero).collect(),
            query: zero(&bank.attention.query),
            key: zero(&bank.attention.key),
            value: zero(&bank.attention.value),
            class_tokens: bank.classes.iter().map(|c| c.context.iter().map(zero).collect()).collect(),
        }
    }

    /// Same order as [`PromptBank::tensors`].
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = self.shared.iter().collect();
        out.extend([&self.query, &self.key, &self.value]);
        out.extend(self.class_tokens.iter().flatten());
        out
    }

    pub fn scale(&mut self, factor: f64) {
        let all = self
            .shared
            .iter_mut()
            .chain([&mut self.query, &mut self.key, &mut self.value])
            .chain(self.class_tokens.iter_mut().flatten());
        for m in all {
            for x in m.as_mut_slice() {
                *x *= factor;
            }
        }
    }

    pub fn accumulate(&mut self, other: &BankGrads) {
        let mine = self
            .shared
            .iter_mut()
            .chain([&mut self.query, &mut self.key, &mut self.value])
            .chain(self.class_tokens.iter_mut().flatten());
        for (a, b) in mine.zip(other.tensors()) {
            a.add_scaled(b, 1.0);
        }
    }
}

fn with_class_token(context: &Mat, word: &[f64]) -> Result<Mat> {
    let c = Mat::new(1, word.len(), word.to_vec())?;
    Mat::vstack(&[context, &c])
}

fn context_rows(grad: &Mat, len: usize) -> Mat {
    let cols = grad.cols();
    Mat::new(len, cols, grad.as_slice()[..len * cols].to_vec()).expect("prefix of a finite matrix")
}

fn random_unit_tokens(rows: usize, dim: usize, rng: &mut impl Rng) -> Mat {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    let mut m = Mat::zeros(rows, dim);
    for i in 0..rows {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
            if let Some(u) = crate::numerics::normalized(&v) {
                m.row_mut(i).copy_from_slice(&u);
                break;
            }
        }
    }
    m
}

impl PromptBank {
    /// Builds the bank for `classes` in the given order. `seed` drives the
    /// learnable initializations; the frozen embedding uses `config.embedding_seed`.
    pub fn new(config: ModelConfig, classes: &[DescriptionFile], init: ClassInit, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::InvalidArgument("prompt bank needs at least one class".into()));
        }
        let (d, ctx) = (config.token_dim, config.context_len());

        let mut shared_rng = rng::stream(seed, "shared-context");
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let shared =
            (0..config.shared_prompts).map(|_| Mat::from_fn(ctx, d, |_, _| small.sample(&mut shared_rng))).collect();

        let mut built = Vec::with_capacity(classes.len());
        for file in classes {
            if classes.iter().filter(|c| c.class_name == file.class_name).count() > 1 {
                return Err(Error::InvalidArgument(format!("duplicate class {:?}", file.class_name)));
            }
            if file.descriptions.is_empty() {
                return Err(Error::NoDescriptions(file.class_name.clone()));
            }
            let word = class_word(&file.class_name, d, config.embedding_seed)?;
            let context = match init {
                ClassInit::Descriptions => {
                    if file.descriptions.len() != config.class_prompts {
                        warn!(
                            "class {:?}: {} descriptions for {} class prompts; {}",
                            file.class_name,
                            file.descriptions.len(),
                            config.class_prompts,
                            if file.descriptions.len() < config.class_prompts { "cycling" } else { "truncating" }
                        );
                    }
                    (0..config.class_prompts)
                        .map(|k| {
                            let text = &file.descriptions[k % file.descriptions.len()];
                            tokenize(text, d, ctx, config.embedding_seed)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                ClassInit::Random => {
                    let mut r = rng::stream(seed, &format!("class-tokens/{}", file.class_name));
                    (0..config.class_prompts).map(|_| random_unit_tokens(ctx, d, &mut r)).collect()
                }
            };
            built.push(ClassPrompts { name: file.class_name.clone(), word, context });
        }

        let attention = AttentionParams::init(d, config.key_dim, &mut rng::stream(seed, "attention"));
        let trainable = Trainable { shared: true, attention: true, class_tokens: config.train_class_tokens };
        Ok(Self { config, shared, classes: built, attention, use_attention: true, trainable })
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes.iter().position(|c| c.name == name).ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Full `L × d_tok` domain-shared prompt `k` specialized to `class`.
    pub fn shared_prompt(&self, k: usize, class: usize) -> Result<Mat> {
        with_class_token(&self.shared[k], &self.classes[class].word)
    }

    /// Full `L × d_tok` class-specific prompt `k` of `class`.
    pub fn class_prompt(&self, class: usize, k: usize) -> Result<Mat> {
        let c = &self.classes[class];
        with_class_token(&c.context[k], &c.word)
    }

    pub fn embeddings(&self, class: usize, encoder: &FrozenEncoder) -> Result<ClassEmbeddings> {
        if class >= self.classes.len() {
            return Err(Error::UnknownClass(format!("#{class}")));
        }
        let mut ds = Mat::zeros(self.shared.len(), encoder.embed_dim());
        for k in 0..self.shared.len() {
            ds.row_mut(k).copy_from_slice(&encoder.encode(&self.shared_prompt(k, class)?)?);
        }
        let prompts = self.classes[class].context.len();
        let mut cs = Mat::zeros(prompts, encoder.embed_dim());
        for k in 0..prompts {
            let tokens = self.class_prompt(class, k)?;
            let mixed = if self.use_attention { attention_forward(&tokens, &self.attention)? } else { tokens };
            cs.row_mut(k).copy_from_slice(&encoder.encode(&mixed)?);
        }
        Ok(ClassEmbeddings { ds, cs })
    }

    /// Accumulates into `grads` the gradient of a loss whose partials with
    /// respect to this class's embeddings are `d_ds` and `d_cs`. Either may
    /// be `None` when that path does not enter the loss.
    pub fn backward(
        &self,
        class: usize,
        encoder: &FrozenEncoder,
        d_ds: Option<&Mat>,
        d_cs: Option<&Mat>,
        grads: &mut BankGrads,
    ) -> Result<()> {
        let ctx = self.config.context_len();
        if let Some(g) = d_ds {
            for k in 0..self.shared.len() {
                let dt = encoder.backward(&self.shared_prompt(k, class)?, g.row(k))?;
                grads.shared[k].add_scaled(&context_rows(&dt, ctx), 1.0);
            }
        }
        if let Some(g) = d_cs {
            for k in 0..self.classes[class].context.len() {
                let tokens = self.class_prompt(class, k)?;
                let d_tokens = if self.use_attention {
                    let mixed = attention_forward(&tokens, &self.attention)?;
                    let d_mixed = encoder.backward(&mixed, g.row(k))?;
                    let a = attention_backward(&tokens, &self.attention, &d_mixed)?;
                    grads.query.add_scaled(&a.query, 1.0);
                    grads.key.add_scaled(&a.key, 1.0);
                    grads.value.add_scaled(&a.value, 1.0);
                    a.tokens
                } else {
                    encoder.backward(&tokens, g.row(k))?
                };
                grads.class_tokens[class][k].add_scaled(&context_rows(&d_tokens, ctx), 1.0);
            }
        }
        Ok(())
    }

    /// Every learnable-shaped tensor with its group and a stable name.
    pub fn tensors(&self) -> Vec<(ParamGroup, String, &Mat)> {
        let mut out: Vec<(ParamGroup, String, &Mat)> = Vec::new();
        for (k, m) in self.shared.iter().enumerate() {
            out.push((ParamGroup::Shared, format!("shared.{k}"), m));
        }
        out.push((ParamGroup::Attention, "attention.query".into(), &self.attention.query));
        out.push((ParamGroup::Attention, "attention.key".into(), &self.attention.key));
        out.push((ParamGroup::Attention, "attention.value".into(), &self.attention.value));
        for (i, c) in self.classes.iter().enumerate() {
            for (k, m) in c.context.iter().enumerate() {
                out.push((ParamGroup::ClassTokens, format!("class.{i}.{k}"), m));
            }
        }
        out
    }

    /// Mutable view in the order of [`PromptBank::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Mat)> {
        let mut out: Vec<(ParamGroup, &mut Mat)> = Vec::new();
        out.extend(self.shared.iter_mut().map(|m| (ParamGroup::Shared, m)));
        out.push((ParamGroup::Attention, &mut self.attention.query));
        out.push((ParamGroup::Attention, &mut self.attention.key));
        out.push((ParamGroup::Attention, &mut self.attention.value));
        for c in &mut self.classes {
            out.extend(c.context.iter_mut().map(|m| (ParamGroup::ClassTokens, m)));
        }
        out
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Shared => self.trainable.shared,
            ParamGroup::Attention => self.trainable.attention,
            ParamGroup::ClassTokens => self.trainable.class_tokens,
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.tensors().into_iter().filter(|(g, _, _)| self.is_trainable(*g)).map(|(_, _, m)| m.rows() * m.cols()).sum()
    }
}

/// Encoded `(G_ds, G_cs)` for the named class.
pub fn build_class_embeddings(bank: &PromptBank, class_id: &str, encoder: &FrozenEncoder) -> Result<ClassEmbeddings> {
    bank.embeddings(bank.class_index(class_id)?, encoder)
}
