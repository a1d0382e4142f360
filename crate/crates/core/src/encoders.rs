//! Frozen toy stand-ins for a contrastive image/text encoder pair.
//!
//! The text encoder maps a sequence of `L + 1` token embeddings (`L` context
//! tokens followed by one class token) to a unit vector in `R^d`:
//!
//! ```text
//! h ← t + sinusoidal positions
//! h ← h + ELU(h·A₁ + a₁)·B₁ + b₁        (block 1)
//! h ← h + ELU(h·A₂ + a₂)·B₂ + b₂        (block 2)
//! w = normalize(mean_rows(h) · P)
//! ```
//!
//! Because the position signal is added before the non-linear blocks, the
//! output depends on token order. The image encoder is
//! `normalize(ELU(x·W₁ + c₁)·W₂ + c₂)`.
//!
//! Weights are drawn once from a seeded stream and never change. Inside a
//! [`Graph`] they enter as constants, so gradients only reach whatever the
//! caller registers with [`Graph::param`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor_file::{fnv1a, FormatError, TensorFile};

pub const PAD_TOKEN: &str = "<pad>";
const WORDS: [&str; 5] = ["a", "an", "photo", "image", "of"];
const WEIGHT_FILE_KIND: &str = "encoder";
const WEIGHT_FILE_VERSION: u32 = 1;

/// Default token-embedding scale.
pub const TOKEN_SCALE: f64 = 1.0;

/// Default prompt template.
pub const PHOTO_TEMPLATE: &str = "a photo of a {class}";
/// Alternate template.
pub const IMAGE_TEMPLATE: &str = "an image of a {class}";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    /// Vocabulary size `V`.
    pub vocab_size: usize,
    /// Token embedding width `e`.
    pub token_dim: usize,
    /// Number of context tokens `L`.
    pub context_len: usize,
    /// Shared embedding width `d`.
    pub embed_dim: usize,
    pub image_dim: usize,
    pub text_hidden: usize,
    pub image_hidden: usize,
    /// Standard deviation of token embeddings. Position signals and the
    /// text blocks are scaled to match, so the text encoder computes the same
    /// function of `tokens / token_scale` whatever the scale.
    pub token_scale: f64,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            token_dim: 8,
            context_len: 4,
            embed_dim: 32,
            image_dim: 32,
            text_hidden: 32,
            image_hidden: 32,
            token_scale: TOKEN_SCALE,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("token_dim", self.token_dim),
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("image_dim", self.image_dim),
            ("text_hidden", self.text_hidden),
            ("image_hidden", self.image_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Dims(format!("{name} must be at least 1")));
            }
        }
        if !(self.token_scale > 0.0 && self.token_scale.is_finite()) {
            return Err(Error::Dims("token_scale must be positive and finite".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Dims("embed_dim must be at least 2".into()));
        }
        if self.vocab_size <= WORDS.len() + 1 {
            return Err(Error::Dims(format!(
                "vocab_size must exceed {} to leave room for class tokens",
                WORDS.len() + 1
            )));
        }
        Ok(())
    }

    /// Length of an encoder input sequence: context tokens plus class token.
    pub fn seq_len(&self) -> usize {
        self.context_len + 1
    }
}

/// Token strings, ids and the frozen `V × e` embedding table.
///
/// Ids are dense in `[0, V)`: the pad token, a handful of template words,
/// then class tokens `class00`, `class01`, ...
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    table: Tensor,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, table: Tensor) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids, table }
    }

    fn default_tokens(vocab_size: usize) -> Vec<String> {
        let mut tokens = vec![PAD_TOKEN.to_string()];
        tokens.extend(WORDS.iter().map(|w| w.to_string()));
        let first_class = tokens.len();
        tokens.extend((0..vocab_size - first_class).map(|i| format!("class{i:02}")));
        tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Embedding row for one token id, as `1 × e`.
    pub fn embedding(&self, id: usize) -> Tensor {
        Tensor::row(self.table.row_slice(id))
    }

    /// All class-name tokens, in id order.
    pub fn class_names(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| t.starts_with("class"))
            .collect()
    }

    /// Stacks class-token embeddings into a `C × e` matrix.
    pub fn class_embeddings(&self, names: &[String]) -> Result<Tensor> {
        if names.is_empty() {
            return Err(Error::NoClasses);
        }
        let unknown: Vec<String> = names
            .iter()
            .filter(|n| self.id(n).is_none())
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownTokens(unknown));
        }
        let rows: Vec<Vec<f64>> = names
            .iter()
            .map(|n| self.table.row_slice(self.ids[n.as_str()]).to_vec())
            .collect();
        Ok(Tensor::from_rows(&rows))
    }
}

/// Output of [`Backbone::tokenize_prompt_text`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedPrompt {
    /// `L × e` context embeddings (left-padded with the pad token).
    pub context: Tensor,
    /// `1 × e` class-token embedding.
    pub class_token: Tensor,
}

impl TokenizedPrompt {
    /// The full `(L + 1) × e` encoder input.
    pub fn sequence(&self) -> Tensor {
        let mut data = self.context.data().to_vec();
        data.extend_from_slice(self.class_token.data());
        Tensor::new(self.context.rows() + 1, self.context.cols(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct TextBlock {
    a: Tensor,
    a_bias: Tensor,
    b: Tensor,
    b_bias: Tensor,
}

/// Frozen text encoder `g` and image encoder `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    dims: EncoderDims,
    positions: Tensor,
    blocks: Vec<TextBlock>,
    text_proj: Tensor,
    img_w1: Tensor,
    img_b1: Tensor,
    img_w2: Tensor,
    img_b2: Tensor,
}

/// Encoders together with the vocabulary they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub encoders: EncoderPair,
    pub vocab: Vocabulary,
}

/// Builds a frozen encoder pair and vocabulary from a seed.
///
/// Weight distributions, with `s` the token scale: token embeddings
/// `N(0, s²)`; position signal `s ·` sinusoid; block input maps
/// `N(0, 1/(fan_in s²))`, block output maps `N(0, s²/fan_in)`, other linear
/// maps `N(0, 1/fan_in)`; biases `N(0, 0.1²)` (times `s` on the token side).
pub fn init_frozen(seed: u64, dims: EncoderDims) -> Result<(EncoderPair, Vocabulary)> {
    dims.validate()?;
    let mut r = rng::stream(seed, tag::ENCODER, 0);
    let e = dims.token_dim;
    let s = dims.token_scale;
    let table = rng::normal_tensor(&mut r, dims.vocab_size, e, s);
    let scaled = |r: &mut rng::Rng, fan_in: usize, fan_out: usize, k: f64| {
        rng::normal_tensor(r, fan_in, fan_out, k * (1.0 / fan_in as f64).sqrt())
    };
    let lin = |r: &mut rng::Rng, fan_in: usize, fan_out: usize| scaled(r, fan_in, fan_out, 1.0);
    let bias = |r: &mut rng::Rng, n: usize| rng::normal_tensor(r, 1, n, 0.1);
    let blocks = (0..2)
        .map(|_| TextBlock {
            a: scaled(&mut r, e, dims.text_hidden, 1.0 / s),
            a_bias: bias(&mut r, dims.text_hidden),
            b: scaled(&mut r, dims.text_hidden, e, s),
            b_bias: bias(&mut r, e).map(|v| v * s),
        })
        .collect();
    let text_proj = lin(&mut r, e, dims.embed_dim);
    let img_w1 = orthogonal(&mut r, dims.image_dim, dims.image_hidden);
    let img_b1 = bias(&mut r, dims.image_hidden);
    let img_w2 = orthogonal(&mut r, dims.image_hidden, dims.embed_dim);
    let img_b2 = bias(&mut r, dims.embed_dim);
    let encoders = EncoderPair {
        dims,
        positions: sinusoidal_positions(dims.seq_len(), e).map(|v| v * s * POSITION_GAIN),
        blocks,
        text_proj,
        img_w1,
        img_b1,
        img_w2,
        img_b2,
    };
    let vocab = Vocabulary::from_parts(Vocabulary::default_tokens(dims.vocab_size), table);
    Ok((encoders, vocab))
}

/// Position signals are kept small next to the tokens: half their columns are
/// nearly constant across positions and would otherwise swamp the class token
/// in the mean-pooled text embedding.
const POSITION_GAIN: f64 = 0.1;

/// Gaussian matrix with orthonormalized columns (or rows, when wide).
/// Square random Gaussian maps are badly conditioned, which leaves most
/// embedding directions unreachable from a bounded input.
fn orthogonal(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let tall = rows >= cols;
    let (n, m) = if tall { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v = rng::normal_vec(r, n);
        for q in &basis {
            let along: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= along * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut t = Tensor::zeros(rows, cols);
    for (j, q) in basis.iter().enumerate() {
        for (i, &v) in q.iter().enumerate() {
            if tall {
                t.set(i, j, v);
            } else {
                t.set(j, i, v);
            }
        }
    }
    t
}

/// Standard transformer sinusoidal position signal, `len × width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(len, width);
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl EncoderPair {
    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    /// Batched text encoding inside a graph. `seqs` stacks `n` sequences of
    /// `L + 1` rows each; the result is `n × d` with unit rows.
    pub fn encode_text_graph(&self, g: &Graph, seqs: Var) -> Result<Var> {
        let [rows, cols] = g.shape(seqs);
        let seq_len = self.dims.seq_len();
        if cols != self.dims.token_dim || rows == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "text input must stack sequences of {seq_len} x {} tokens, got {rows} x {cols}",
                self.dims.token_dim
            )));
        }
        let n = rows / seq_len;
        let mut pos = Vec::with_capacity(rows * cols);
        for _ in 0..n {
            pos.extend_from_slice(self.positions.data());
        }
        let pos = g.constant(Tensor::new(rows, cols, pos));
        let mut h = g.add(seqs, pos);
        for block in &self.blocks {
            let a = g.constant(block.a.clone());
            let a_bias = g.constant(block.a_bias.clone());
            let b = g.constant(block.b.clone());
            let b_bias = g.constant(block.b_bias.clone());
            let inner = g.elu(g.add_row(g.matmul(h, a), a_bias));
            let update = g.add_row(g.matmul(inner, b), b_bias);
            h = g.add(h, update);
        }
        let pooled = g.mean_groups(h, seq_len);
        let proj = g.constant(self.text_proj.clone());
        Ok(g.l2_normalize_rows(g.matmul(pooled, proj))?)
    }

    /// `g(t)` for a single `(L + 1) × e` sequence.
    pub fn encode_text(&self, t: &Tensor) -> Result<Vec<f64>> {
        if t.shape() != [self.dims.seq_len(), self.dims.token_dim] {
            return Err(Error::Shape(format!(
                "text input must be {} x {}, got {:?}",
                self.dims.seq_len(),
                self.dims.token_dim,
                t.shape()
            )));
        }
        let g = Graph::new();
        let x = g.constant(t.clone());
        let w = self.encode_text_graph(&g, x)?;
        Ok(g.value(w).into_data())
    }

    /// `f(x)` for a raw image feature vector.
    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.image_dim {
            return Err(Error::Shape(format!(
                "image features must have {} entries, got {}",
                self.dims.image_dim,
                x.len()
            )));
        }
        let g = Graph::new();
        let input = g.constant(Tensor::row(x));
        let out = self.encode_image_graph(&g, input)?;
        Ok(g.value(out).into_data())
    }

    /// Image encoding inside a graph; `x` may be a batch of rows.
    pub fn encode_image_graph(&self, g: &Graph, x: Var) -> Result<Var> {
        let w1 = g.constant(self.img_w1.clone());
        let b1 = g.constant(self.img_b1.clone());
        let w2 = g.constant(self.img_w2.clone());
        let b2 = g.constant(self.img_b2.clone());
        let h = g.elu(g.add_row(g.matmul(x, w1), b1));
        let out = g.add_row(g.matmul(h, w2), b2);
        Ok(g.l2_normalize_rows(out)?)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("text.positions".to_string(), &self.positions)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("text.block{i}.a"), &b.a));
            v.push((format!("text.block{i}.a_bias"), &b.a_bias));
            v.push((format!("text.block{i}.b"), &b.b));
            v.push((format!("text.block{i}.b_bias"), &b.b_bias));
        }
        v.push(("text.proj".into(), &self.text_proj));
        v.push(("image.w1".into(), &self.img_w1));
        v.push(("image.b1".into(), &self.img_b1));
        v.push(("image.w2".into(), &self.img_w2));
        v.push(("image.b2".into(), &self.img_b2));
        v
    }

    /// FNV-1a over the raw bits of every weight.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.named_tensors() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

impl Backbone {
    pub fn new(seed: u64, dims: EncoderDims) -> Result<Self> {
        let (encoders, vocab) = init_frozen(seed, dims)?;
        Ok(Self { encoders, vocab })
    }

    pub fn dims(&self) -> &EncoderDims {
        self.encoders.dims()
    }

    /// Checksum over encoder weights and the embedding table.
    pub fn checksum(&self) -> u64 {
        let mut bytes = self.encoders.checksum().to_le_bytes().to_vec();
        for v in self.vocab.table.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        fnv1a(&bytes)
    }

    /// Image embeddings for a batch of feature rows, returned as `n × d`.
    pub fn encode_images(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let rows: Result<Vec<Vec<f64>>> = features
            .iter()
            .map(|x| self.encoders.encode_image(x))
            .collect();
        Ok(Tensor::from_rows(&rows?))
    }

    /// Turns a template such as `"a photo of a {class}"` into context and
    /// class-token embeddings. Words are lower-cased and split on whitespace;
    /// `{class}` must be the last word. Fewer than `L` context words are
    /// left-padded with [`PAD_TOKEN`]; more is an error.
    pub fn tokenize_prompt_text(&self, text: &str, class_name: &str) -> Result<TokenizedPrompt> {
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        let Some(slot) = words.iter().position(|w| w == "{class}") else {
            return Err(Error::Template(format!("`{text}` has no {{class}} placeholder")));
        };
        if slot != words.len() - 1 {
            return Err(Error::Template(format!(
                "`{text}`: {{class}} must be the final word"
            )));
        }
        let context_words = &words[..slot];
        let l = self.dims().context_len;
        if context_words.len() > l {
            return Err(Error::Template(format!(
                "`{text}` has {} context words but the prompt length is {l}",
                context_words.len()
            )));
        }
        let mut unknown: Vec<String> = context_words
            .iter()
            .filter(|w| self.vocab.id(w).is_none())
            .cloned()
            .collect();
        if self.vocab.id(class_name).is_none() {
            unknown.push(class_name.to_string());
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownTokens(unknown));
        }
        let pad = self.vocab.id(PAD_TOKEN).expect("pad token present");
        let mut ids = vec![pad; l - context_words.len()];
        ids.extend(context_words.iter().map(|w| self.vocab.ids[w.as_str()]));
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| self.vocab.table.row_slice(i).to_vec())
            .collect();
        Ok(TokenizedPrompt {
            context: Tensor::from_rows(&rows),
            class_token: self.vocab.embedding(self.vocab.ids[class_name]),
        })
    }

    /// Context rows for a template, independent of the class.
    pub fn template_context(&self, text: &str) -> Result<Tensor> {
        let any_class = self.vocab.class_names()[0].to_string();
        Ok(self.tokenize_prompt_text(text, &any_class)?.context)
    }

    /// Seeded `N(0, std²)` context rows for random initialization.
    pub fn random_context(&self, seed: u64, std: f64) -> Tensor {
        let mut r = rng::stream(seed, tag::LEARNER_INIT, 1);
        rng::normal_tensor(&mut r, self.dims().context_len, self.dims().token_dim, std)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let d = self.dims();
        let mut f = TensorFile::new(WEIGHT_FILE_KIND, WEIGHT_FILE_VERSION)
            .with_meta("vocab_size", d.vocab_size.to_string())
            .with_meta("token_dim", d.token_dim.to_string())
            .with_meta("context_len", d.context_len.to_string())
            .with_meta("embed_dim", d.embed_dim.to_string())
            .with_meta("image_dim", d.image_dim.to_string())
            .with_meta("text_hidden", d.text_hidden.to_string())
            .with_meta("image_hidden", d.image_hidden.to_string())
            .with_meta("token_scale", d.token_scale.to_string())
            .with_meta("tokens", self.vocab.tokens.join(" "));
        f.push("vocab.table", self.vocab.table.clone());
        for (name, t) in self.encoders.named_tensors() {
            f.push(name, t.clone());
        }
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        f.expect(WEIGHT_FILE_KIND, WEIGHT_FILE_VERSION)?;
        let dims = EncoderDims {
            vocab_size: f.meta_parse("vocab_size")?,
            token_dim: f.meta_parse("token_dim")?,
            context_len: f.meta_parse("context_len")?,
            embed_dim: f.meta_parse("embed_dim")?,
            image_dim: f.meta_parse("image_dim")?,
            text_hidden: f.meta_parse("text_hidden")?,
            image_hidden: f.meta_parse("image_hidden")?,
            token_scale: f.meta_parse("token_scale")?,
        };
        dims.validate()?;
        let tokens: Vec<String> = f.meta("tokens")?.split(' ').map(str::to_string).collect();
        if tokens.len() != dims.vocab_size {
            return Err(FormatError::BadField {
                field: "tokens".into(),
                message: format!("{} tokens for vocab_size {}", tokens.len(), dims.vocab_size),
            }
            .into());
        }
        let e = dims.token_dim;
        let table = f.tensor_shaped("vocab.table", dims.vocab_size, e)?;
        let blocks = (0..2)
            .map(|i| -> Result<TextBlock> {
                Ok(TextBlock {
                    a: f.tensor_shaped(&format!("text.block{i}.a"), e, dims.text_hidden)?,
                    a_bias: f.tensor_shaped(&format!("text.block{i}.a_bias"), 1, dims.text_hidden)?,
                    b: f.tensor_shaped(&format!("text.block{i}.b"), dims.text_hidden, e)?,
                    b_bias: f.tensor_shaped(&format!("text.block{i}.b_bias"), 1, e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let encoders = EncoderPair {
            dims,
            positions: f.tensor_shaped("text.positions", dims.seq_len(), e)?,
            blocks,
            text_proj: f.tensor_shaped("text.proj", e, dims.embed_dim)?,
            img_w1: f.tensor_shaped("image.w1", dims.image_dim, dims.image_hidden)?,
            img_b1: f.tensor_shaped("image.b1", 1, dims.image_hidden)?,
            img_w2: f.tensor_shaped("image.w2", dims.image_hidden, dims.embed_dim)?,
            img_b2: f.tensor_shaped("image.b2", 1, dims.embed_dim)?,
        };
        Ok(Self {
            encoders,
            vocab: Vocabulary::from_parts(tokens, table),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: usize = 8; // default token width
    use crate::autodiff::{grad_check, Tensor};
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn backbone() -> Backbone {
        Backbone::new(7, EncoderDims::default()).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        assert_eq!(backbone(), backbone());
        assert_eq!(backbone().checksum(), backbone().checksum());
        let other = Backbone::new(8, EncoderDims::default()).unwrap();
        assert_ne!(backbone().checksum(), other.checksum());
        assert_ne!(backbone().vocab.table(), other.vocab.table());
    }

    #[test]
    fn dims_are_validated() {
        let bad = EncoderDims {
            embed_dim: 1,
            ..EncoderDims::default()
        };
        assert!(matches!(Backbone::new(1, bad), Err(Error::Dims(_))));
        let bad = EncoderDims {
            token_dim: 0,
            ..EncoderDims::default()
        };
        assert!(matches!(Backbone::new(1, bad), Err(Error::Dims(_))));
    }

    #[test]
    fn vocabulary_ids_are_dense() {
        let b = backbone();
        assert_eq!(b.vocab.len(), 64);
        for id in 0..b.vocab.len() {
            assert_eq!(b.vocab.id(b.vocab.token(id)), Some(id));
        }
        assert_eq!(b.vocab.class_names().len(), 64 - 6);
        assert!(b.vocab.table().is_finite());
    }

    #[test]
    fn text_embeddings_are_unit_and_order_sensitive() {
        let b = backbone();
        let p = b.tokenize_prompt_text(PHOTO_TEMPLATE, "class03").unwrap();
        let t = p.sequence();
        let w = b.encoders.encode_text(&t).unwrap();
        assert!((norm(&w) - 1.0).abs() < 1e-6);

        // swap the distinct context tokens "photo" and "of" (positions 1 and 2)
        let mut swapped = t.clone();
        for c in 0..t.cols() {
            swapped.set(1, c, t.get(2, c));
            swapped.set(2, c, t.get(1, c));
        }
        let w2 = b.encoders.encode_text(&swapped).unwrap();
        let diff: f64 = w.iter().zip(&w2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "swap changed output by only {diff}");
    }

    #[test]
    fn text_encoder_rejects_wrong_length() {
        let b = backbone();
        let t = Tensor::zeros(4, E);
        assert!(matches!(b.encoders.encode_text(&t), Err(Error::Shape(_))));
    }

    #[test]
    fn image_embeddings_unit_deterministic_and_distinct() {
        let b = backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for _ in 0..100 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = b.encoders.encode_image(&x).unwrap();
            assert!((norm(&f) - 1.0).abs() < 1e-6);
            assert_eq!(f, b.encoders.encode_image(&x).unwrap());
            seen.push(f);
        }
        for i in 0..seen.len() {
            for j in i + 1..seen.len() {
                let d: f64 = seen[i].iter().zip(&seen[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-9, "collision between {i} and {j}");
            }
        }
        assert!(matches!(b.encoders.encode_image(&[0.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn similarity_gradient_wrt_tokens_matches_finite_differences() {
        let b = backbone();
        let f = b.encoders.encode_image(&[0.3; 32]).unwrap();
        let t = b.tokenize_prompt_text(PHOTO_TEMPLATE, "class01").unwrap().sequence();
        let err = grad_check::<_, Error>(
            |g, t| {
                let w = b.encoders.encode_text_graph(g, t)?;
                let fx = g.constant(Tensor::row(&f));
                Ok(g.sum(g.mul(w, fx)))
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn tokenize_templates() {
        let b = backbone();
        let p = b.tokenize_prompt_text(PHOTO_TEMPLATE, "class00").unwrap();
        assert_eq!(p.context.shape(), [4, E]);
        assert_eq!(p.class_token.shape(), [1, E]);
        assert_eq!(p.sequence().shape(), [5, E]);
        assert_eq!(p.context.row_slice(1), b.vocab.embedding(b.vocab.id("photo").unwrap()).data());
        assert_eq!(p, b.tokenize_prompt_text(PHOTO_TEMPLATE, "class00").unwrap());

        let q = b.tokenize_prompt_text("An image of a {class}", "class00").unwrap();
        assert_eq!(q.context.row_slice(0), b.vocab.embedding(b.vocab.id("an").unwrap()).data());

        let short = b.tokenize_prompt_text("a {class}", "class00").unwrap();
        let pad = b.vocab.embedding(b.vocab.id(PAD_TOKEN).unwrap());
        for r in 0..3 {
            assert_eq!(short.context.row_slice(r), pad.data());
        }
    }

    #[test]
    fn tokenize_errors() {
        let b = backbone();
        match b.tokenize_prompt_text("a blurry photo of {class}", "nope") {
            Err(Error::UnknownTokens(t)) => assert_eq!(t, vec!["blurry".to_string(), "nope".into()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            b.tokenize_prompt_text("a photo of a an {class}", "class00"),
            Err(Error::Template(_))
        ));
        assert!(matches!(
            b.tokenize_prompt_text("a photo", "class00"),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn random_context_is_seeded() {
        let b = backbone();
        assert_eq!(b.random_context(1, 0.02), b.random_context(1, 0.02));
        assert_ne!(b.random_context(1, 0.02), b.random_context(2, 0.02));
        assert_eq!(b.random_context(1, 0.02).shape(), [4, E]);
    }

    #[test]
    fn weight_file_round_trip_reproduces_encodings() {
        let b = backbone();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.vptf");
        b.save(&path).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert_eq!(loaded, b);
        let t = b.tokenize_prompt_text(PHOTO_TEMPLATE, "class05").unwrap().sequence();
        assert_eq!(
            b.encoders.encode_text(&t).unwrap(),
            loaded.encoders.encode_text(&t).unwrap()
        );
    }

    #[test]
    fn malformed_weight_file_names_the_field() {
        let b = backbone();
        let mut f = b.to_tensor_file();
        for (name, t) in f.tensors.iter_mut() {
            if name == "image.w2" {
                *t = Tensor::zeros(3, 3);
            }
        }
        match Backbone::from_tensor_file(&f) {
            Err(Error::Format(FormatError::BadField { field, .. })) => assert_eq!(field, "image.w2"),
            other => panic!("{other:?}"),
        }
        let mut f = b.to_tensor_file();
        f.tensors.retain(|(n, _)| n != "text.proj");
        match Backbone::from_tensor_file(&f) {
            Err(Error::Format(FormatError::MissingField(field))) => assert_eq!(field, "text.proj"),
            other => panic!("{other:?}"),
        }
    }
}
