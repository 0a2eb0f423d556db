//! Referring-expression tokenizer and a single-layer gated recurrent encoder.
//!
//! The encoder embeds each token, runs one GRU pass from a zero state, and
//! returns every hidden state as the word features plus the final state as
//! the sentence feature.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::params::{Bindings, Init, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
const UNK_TOKEN: &str = "<unk>";
const PAD_TOKEN: &str = "<pad>";
/// Ids of the first word stored in a vocabulary file.
pub const FILE_ID_OFFSET: usize = 2;

const BUILTIN_WORDS: &[&str] = &[
    "the", "a", "an", "this", "that", "it", "is", "one", "which", "with", "and", "of", "to", "in",
    "on", "at", "by", "from", "near", "next", "beside", "close", "closest", "far", "left", "right",
    "behind", "front", "above", "below", "between", "middle", "center", "corner", "side", "top",
    "bottom", "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "pink",
    "cyan", "brown", "gray", "box", "cube", "cylinder", "sphere", "ball", "object", "thing", "item",
    "shape", "shaped", "colored", "small", "large", "big", "tall", "short", "round", "square",
    "chair", "table", "floor", "wall", "room", "scene", "find", "segment", "select", "point",
    "points", "placed", "located", "lies", "sits", "stands", "there", "other", "another", "same",
    "first", "second", "only",
];

/// Token ↔ id map. Id 0 is `<unk>`, id 1 is `<pad>`; the rest are dense.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order, skipping repeats.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in [UNK_TOKEN, PAD_TOKEN].into_iter().chain(words) {
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    /// The vocabulary covering the synthetic query templates.
    pub fn builtin() -> Self {
        Self::new(BUILTIN_WORDS.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line, reserved tokens omitted: line `n` (0-based) holds
    /// id `n + FILE_ID_OFFSET`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens[FILE_ID_OFFSET..] {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        let words: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let vocab = Self::new(words.iter().copied());
        if vocab.len() != words.len() + FILE_ID_OFFSET {
            return Err(format_err("vocabulary file repeats a token or lists a reserved one"));
        }
        Ok(vocab)
    }
}

/// Lowercases, splits on whitespace and punctuation, and maps through the
/// vocabulary with `<unk>` fallback.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let ids: Vec<usize> = split_words(text).iter().map(|w| vocab.id(w)).collect();
    if ids.is_empty() {
        return Err(Error::Contract("query text has no words".into()));
    }
    Ok(ids)
}

/// The lowercase words of `text`.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { dim: 64, max_len: 32 }
    }
}

/// Word features `[L×C]` and sentence feature `[1×C]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatures {
    pub words: Var,
    pub sentence: Var,
    pub len: usize,
    /// Original token count when the input was cut to `max_len`.
    pub truncated_from: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    vocab_size: usize,
    embedding: String,
    w_ih: String,
    w_hh: String,
    b_ih: String,
    b_hh: String,
}

impl TextEncoder {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        config: &TextEncoderConfig,
        vocab_size: usize,
        prefix: &str,
    ) -> Result<Self> {
        let c = config.dim;
        if c == 0 || config.max_len == 0 || vocab_size == 0 {
            return Err(Error::Contract("text encoder sizes must be positive".into()));
        }
        let name = |s: &str| format!("{prefix}.{s}");
        let enc = Self {
            config: config.clone(),
            vocab_size,
            embedding: name("embedding"),
            w_ih: name("gru.w_ih"),
            w_hh: name("gru.w_hh"),
            b_ih: name("gru.b_ih"),
            b_hh: name("gru.b_hh"),
        };
        let g = ParamGroup::Text;
        let std = (1.0 / c as f64).sqrt();
        store.insert(&enc.embedding, init.normal(&[vocab_size, c], 1.0), g);
        store.insert(&enc.w_ih, init.normal(&[c, 3 * c], std), g);
        store.insert(&enc.w_hh, init.normal(&[c, 3 * c], std), g);
        store.insert(&enc.b_ih, Tensor::zeros(&[3 * c]), g);
        store.insert(&enc.b_hh, Tensor::zeros(&[3 * c]), g);
        Ok(enc)
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Embeds `tokens` and runs the recurrent pass. Inputs longer than
    /// `max_len` are cut, with a logged warning and `truncated_from` set.
    pub fn encode(&self, tape: &mut Tape, b: &Bindings, tokens: &[usize]) -> Result<TextFeatures> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty token sequence".into()));
        }
        let mut truncated_from = None;
        let tokens = if tokens.len() > self.config.max_len {
            log::warn!(
                "query of {} tokens truncated to {}",
                tokens.len(),
                self.config.max_len
            );
            truncated_from = Some(tokens.len());
            &tokens[..self.config.max_len]
        } else {
            tokens
        };
        let c = self.config.dim;
        let x = tape.gather_rows(b.var(&self.embedding), tokens.to_vec())?;
        let gi = tape.matmul(x, b.var(&self.w_ih))?;
        let gi = tape.add_bias(gi, b.var(&self.b_ih))?;

        let mut h = tape.constant(Tensor::zeros(&[1, c]));
        let mut states = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let gi_t = tape.gather_rows(gi, vec![t])?;
            h = self.cell(tape, b, gi_t, h)?;
            states.push(h);
        }
        let words = tape.concat_rows(&states)?;
        Ok(TextFeatures {
            words,
            sentence: h,
            len: tokens.len(),
            truncated_from,
        })
    }

    /// One recurrent step given the precomputed input projection `[1×3C]`.
    fn cell(&self, tape: &mut Tape, b: &Bindings, gi: Var, h: Var) -> Result<Var> {
        let c = self.config.dim;
        let gh = tape.matmul(h, b.var(&self.w_hh))?;
        let gh = tape.add_bias(gh, b.var(&self.b_hh))?;

        let (gi_r, gh_r) = (tape.slice_cols(gi, 0, c)?, tape.slice_cols(gh, 0, c)?);
        let r = tape.add(gi_r, gh_r)?;
        let r = tape.sigmoid(r);

        let (gi_z, gh_z) = (tape.slice_cols(gi, c, 2 * c)?, tape.slice_cols(gh, c, 2 * c)?);
        let z = tape.add(gi_z, gh_z)?;
        let z = tape.sigmoid(z);

        let (gi_n, gh_n) = (tape.slice_cols(gi, 2 * c, 3 * c)?, tape.slice_cols(gh, 2 * c, 3 * c)?);
        let gated = tape.mul(r, gh_n)?;
        let n = tape.add(gi_n, gated)?;
        let n = tape.tanh(n);

        // h' = (1 - z) * n + z * h
        let neg_z = tape.scale(z, -1.0);
        let keep = tape.add_scalar(neg_z, 1.0);
        let fresh = tape.mul(keep, n)?;
        let carried = tape.mul(z, h)?;
        tape.add(fresh, carried)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{grad_check, rng, uniform};

    fn encoder(dim: usize, max_len: usize, vocab: usize) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(7);
        let cfg = TextEncoderConfig { dim, max_len };
        let enc = TextEncoder::register(&mut store, &mut init, &cfg, vocab, "text").unwrap();
        (store, enc)
    }

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        let v = Vocabulary::builtin();
        let ids = tokenize("The red chair.", &v).unwrap();
        assert_eq!(ids, vec![v.id("the"), v.id("red"), v.id("chair")]);
        assert!(ids.iter().all(|&i| i >= FILE_ID_OFFSET));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::builtin();
        assert_eq!(tokenize("zebra", &v).unwrap(), vec![UNK]);
        assert!(matches!(tokenize("   ", &v), Err(Error::Contract(_))));
        assert!(tokenize("?!", &v).is_err());
    }

    #[test]
    fn tokenize_round_trips_vocab_words() {
        let v = Vocabulary::builtin();
        let words: Vec<&str> = (FILE_ID_OFFSET..v.len()).map(|i| v.token(i).unwrap()).collect();
        let ids = tokenize(&words.join(" "), &v).unwrap();
        let back: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(back, words);
        assert_eq!(tokenize(&back.join(" "), &v).unwrap(), ids);
    }

    #[test]
    fn builtin_vocab_is_desk_sized() {
        let v = Vocabulary::builtin();
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert!((80..=120).contains(&v.len()), "{}", v.len());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::builtin();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("the"));
        assert_eq!(Vocabulary::read(&path).unwrap(), v);
    }

    #[test]
    fn single_token_sentence_equals_word_row() {
        let (store, enc) = encoder(8, 32, 10);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let f = enc.encode(&mut tape, &b, &[4]).unwrap();
        assert_eq!(tape.value(f.words).data(), tape.value(f.sentence).data());
    }

    #[test]
    fn sentence_is_last_word_row() {
        let (store, enc) = encoder(8, 32, 10);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let f = enc.encode(&mut tape, &b, &[4, 2, 9, 3]).unwrap();
        assert_eq!(tape.value(f.words).row(3), tape.value(f.sentence).data());
        assert_eq!(tape.shape(f.words), &[4, 8]);
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let (mut store, enc) = encoder(6, 32, 10);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let f = enc.encode(&mut tape, &b, &[3, 5, 7]).unwrap();
        assert!(tape.value(f.words).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn over_length_input_is_truncated() {
        let (store, enc) = encoder(4, 3, 10);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let f = enc.encode(&mut tape, &b, &[2, 3, 4, 5, 6]).unwrap();
        assert_eq!(f.len, 3);
        assert_eq!(f.truncated_from, Some(5));
        assert!(enc.encode(&mut tape, &b, &[]).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let (store, enc) = encoder(8, 32, 10);
        let run = || {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let f = enc.encode(&mut tape, &b, &[1, 2, 3]).unwrap();
            tape.value(f.words).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_used_embedding_row_receives_gradient() {
        let (store, enc) = encoder(8, 32, 12);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let tokens = [3, 7, 3, 10];
        let f = enc.encode(&mut tape, &b, &tokens).unwrap();
        let w = tape.constant(uniform(&mut rng(1), &[4, 8], -1.0, 1.0));
        let p = tape.mul(f.words, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let g = tape.grad(b.var("text.embedding")).unwrap();
        for t in [3, 7, 10] {
            assert!(g.row(t).iter().any(|&v| v != 0.0), "row {t}");
        }
        assert!(g.row(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_gradient_matches_finite_differences() {
        let (store, enc) = encoder(4, 32, 6);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let mut r = rng(2);
        for _ in 0..5 {
            let mut inputs: Vec<Tensor> = names
                .iter()
                .map(|n| uniform(&mut r, store.get(n).unwrap().value.shape(), -1.0, 1.0))
                .collect();
            inputs.push(uniform(&mut r, &[3, 4], -1.0, 1.0));
            let err = grad_check(&inputs, 1e-5, |t, v| {
                let b = Bindings::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let f = enc.encode(t, &b, &[2, 5, 2])?;
                let p = t.mul(f.words, v[names.len()])?;
                Ok(t.sum(p))
            });
            assert!(err < 1e-4, "{err}");
        }
    }
}
