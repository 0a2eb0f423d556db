//! Point-word cross-modal alignment applied to encoder stage features.
//!
//! Each stage projects the word features to its own width, lets every voxel
//! attend over the words, squashes the attended signal through an MLP and a
//! tanh, and adds it back onto the voxel features. The additive baseline
//! skips the attention and adds the mean projected word instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Affine, Bindings, Init, Mlp, ParamGroup, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Gated cross-attention with residual.
    #[default]
    Pwca,
    /// `V + mean(project(W))`.
    #[serde(rename = "baseline_add")]
    Add,
}

/// Parameters of one encoder stage's fusion block.
#[derive(Clone, Debug)]
pub struct PwcaStage {
    width: usize,
    word_projection: String,
    query: Affine,
    // No bias: a key offset adds the same logit to every key of a row.
    key: String,
    value: Affine,
    gate: Mlp,
}

impl PwcaStage {
    /// `text_dim` is the word feature width C, `width` the stage width C_i.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        text_dim: usize,
        width: usize,
    ) -> Self {
        let word_projection = format!("{name}.word_proj");
        store.insert(
            &word_projection,
            init.glorot(&[text_dim, width], text_dim, width),
            ParamGroup::Base,
        );
        let g = ParamGroup::Base;
        let key = format!("{name}.key.weight");
        store.insert(&key, init.he(&[width, width], width), g);
        Self {
            width,
            word_projection,
            query: Affine::register(store, init, &format!("{name}.query"), width, width, g),
            key,
            value: Affine::register(store, init, &format!("{name}.value"), width, width, g),
            gate: Mlp::register(store, init, &format!("{name}.gate"), (width, width, width), g),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Name of the gate MLP's output layer weight and bias.
    pub fn gate_output(&self) -> (&str, &str) {
        (&self.gate.second.weight, &self.gate.second.bias)
    }

    /// `W · P_i`: word features at this stage's width.
    pub fn project_words(&self, tape: &mut Tape, b: &Bindings, words: Var) -> Result<Var> {
        tape.matmul(words, b.var(&self.word_projection))
    }

    /// Single-head scaled dot-product attention of `q` rows over `kv` rows.
    pub fn cross_attention(&self, tape: &mut Tape, b: &Bindings, q: Var, kv: Var) -> Result<Var> {
        let (qw, kw) = (tape.shape(q).last().copied(), tape.shape(kv).last().copied());
        if qw != Some(self.width) || kw != Some(self.width) {
            return Err(Error::Dimension {
                op: "cross_attention",
                lhs: tape.shape(q).to_vec(),
                rhs: tape.shape(kv).to_vec(),
            });
        }
        let queries = self.query.forward(tape, b, q)?;
        let keys = tape.matmul(kv, b.var(&self.key))?;
        let values = self.value.forward(tape, b, kv)?;
        let keys_t = tape.transpose(keys)?;
        let logits = tape.matmul(queries, keys_t)?;
        let logits = tape.scale(logits, 1.0 / (self.width as f64).sqrt());
        let attn = tape.softmax(logits, 1)?;
        tape.matmul(attn, values)
    }

    /// `tanh(MLP(attend(V, W·P))) + V`.
    pub fn apply(&self, tape: &mut Tape, b: &Bindings, v: Var, words: Var) -> Result<Var> {
        let kv = self.project_words(tape, b, words)?;
        let attended = self.cross_attention(tape, b, v, kv)?;
        let gated = self.gate.forward(tape, b, attended)?;
        let gated = tape.tanh(gated);
        tape.add(gated, v)
    }

    /// `V + mean_rows(W·P)`.
    pub fn baseline(&self, tape: &mut Tape, b: &Bindings, v: Var, words: Var) -> Result<Var> {
        let kv = self.project_words(tape, b, words)?;
        if tape.shape(v).last() != Some(&self.width) {
            return Err(Error::Dimension {
                op: "baseline_fuse",
                lhs: tape.shape(v).to_vec(),
                rhs: tape.shape(kv).to_vec(),
            });
        }
        let mean = tape.mean_rows(kv)?;
        let mean = tape.reshape(mean, &[self.width])?;
        tape.add_bias(v, mean)
    }

    pub fn fuse(&self, mode: FusionMode, tape: &mut Tape, b: &Bindings, v: Var, words: Var) -> Result<Var> {
        match mode {
            FusionMode::Pwca => self.apply(tape, b, v, words),
            FusionMode::Add => self.baseline(tape, b, v, words),
        }
    }
}

/// One fusion block per encoder stage.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    stages: Vec<PwcaStage>,
}

impl Fusion {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        text_dim: usize,
        widths: &[usize],
        mode: FusionMode,
    ) -> Self {
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| PwcaStage::register(store, init, &format!("{prefix}.stage{}", i + 1), text_dim, w))
            .collect();
        Self { mode, stages }
    }

    pub fn stages(&self) -> &[PwcaStage] {
        &self.stages
    }

    pub fn apply(&self, tape: &mut Tape, b: &Bindings, stage: usize, v: Var, words: Var) -> Result<Var> {
        let block = self.stages.get(stage).ok_or(Error::Index {
            op: "fusion_stage",
            index: stage,
            len: self.stages.len(),
        })?;
        block.fuse(self.mode, tape, b, v, words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::testutil::{grad_check, rng, uniform};

    const C: usize = 6;
    const CI: usize = 4;

    fn stage() -> (ParamStore, PwcaStage) {
        let mut store = ParamStore::new();
        let mut init = Init::new(11);
        let s = PwcaStage::register(&mut store, &mut init, "f", C, CI);
        (store, s)
    }

    fn names(store: &ParamStore) -> Vec<String> {
        store.iter().map(|(n, _)| n.to_string()).collect()
    }

    #[test]
    fn single_word_attends_fully() {
        let (store, s) = stage();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let q = tape.constant(uniform(&mut rng(1), &[5, CI], -1.0, 1.0));
        let kv = tape.constant(uniform(&mut rng(2), &[1, CI], -1.0, 1.0));
        let out = s.cross_attention(&mut tape, &b, q, kv).unwrap();
        let v = s.value.forward(&mut tape, &b, kv).unwrap();
        let expect = tape.value(v).row(0).to_vec();
        for r in 0..5 {
            for (a, e) in tape.value(out).row(r).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let (mut store, s) = stage();
        // Zero query weights make every logit zero.
        store.get_mut("f.query.weight").unwrap().value = Tensor::zeros(&[CI, CI]);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let q = tape.constant(uniform(&mut rng(1), &[3, CI], -1.0, 1.0));
        let kv = tape.constant(uniform(&mut rng(2), &[4, CI], -1.0, 1.0));
        let out = s.cross_attention(&mut tape, &b, q, kv).unwrap();
        let v = s.value.forward(&mut tape, &b, kv).unwrap();
        let values = tape.value(v).clone();
        for r in 0..3 {
            for c in 0..CI {
                let mean = (0..4).map(|l| values.at(l, c)).sum::<f64>() / 4.0;
                assert!((tape.value(out).at(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let (store, s) = stage();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let q = tape.constant(Tensor::zeros(&[3, CI + 1]));
        let kv = tape.constant(Tensor::zeros(&[2, CI]));
        assert!(matches!(s.cross_attention(&mut tape, &b, q, kv), Err(Error::Dimension { .. })));
        let words = tape.constant(Tensor::zeros(&[2, C]));
        assert!(matches!(s.baseline(&mut tape, &b, q, words), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_gate_output_is_identity() {
        let (mut store, s) = stage();
        let (w, bias) = s.gate_output();
        store.get_mut(w).unwrap().value = Tensor::zeros(&[CI, CI]);
        store.get_mut(bias).unwrap().value = Tensor::zeros(&[CI]);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let vt = uniform(&mut rng(3), &[7, CI], -2.0, 2.0);
        let v = tape.constant(vt.clone());
        let words = tape.constant(uniform(&mut rng(4), &[3, C], -1.0, 1.0));
        let out = s.apply(&mut tape, &b, v, words).unwrap();
        assert_eq!(tape.value(out), &vt);
    }

    #[test]
    fn fused_branch_is_bounded() {
        let (mut store, s) = stage();
        // Large gate weights push the tanh into saturation.
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x *= 40.0);
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let vt = uniform(&mut rng(5), &[9, CI], -3.0, 3.0);
        let v = tape.constant(vt.clone());
        let words = tape.constant(uniform(&mut rng(6), &[4, C], -1.0, 1.0));
        let out = s.apply(&mut tape, &b, v, words).unwrap();
        for (o, x) in tape.value(out).data().iter().zip(vt.data()) {
            assert!((o - x).abs() <= 1.0);
        }
    }

    #[test]
    fn word_order_does_not_matter() {
        let (store, s) = stage();
        let vt = uniform(&mut rng(7), &[5, CI], -1.0, 1.0);
        let wt = uniform(&mut rng(8), &[4, C], -1.0, 1.0);
        let run = |perm: &[usize]| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let v = tape.constant(vt.clone());
            let w = tape.constant(wt.clone());
            let w = tape.gather_rows(w, perm.to_vec()).unwrap();
            let out = s.apply(&mut tape, &b, v, w).unwrap();
            tape.value(out).clone()
        };
        let a = run(&[0, 1, 2, 3]);
        let p = run(&[2, 0, 3, 1]);
        for (x, y) in a.data().iter().zip(p.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn baseline_zero_words_is_identity_and_constant_shifts() {
        let (mut store, s) = stage();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let vt = uniform(&mut rng(9), &[4, CI], -1.0, 1.0);
        let v = tape.constant(vt.clone());
        let zero = tape.constant(Tensor::zeros(&[3, C]));
        let out = s.baseline(&mut tape, &b, v, zero).unwrap();
        assert_eq!(tape.value(out), &vt);

        // With an identity-like projection, a constant word row c shifts by c.
        let mut proj = Tensor::zeros(&[C, CI]);
        for i in 0..CI {
            proj.data_mut()[i * CI + i] = 1.0;
        }
        store.get_mut("f.word_proj").unwrap().value = proj;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let v = tape.constant(vt.clone());
        let shift = [0.5, -1.0, 2.0, 0.25, 9.0, 9.0];
        let rows: Vec<Vec<f64>> = (0..3).map(|_| shift.to_vec()).collect();
        let w = tape.constant(Tensor::from_rows(&rows).unwrap());
        let out = s.baseline(&mut tape, &b, v, w).unwrap();
        for r in 0..4 {
            for c in 0..CI {
                assert!((tape.value(out).at(r, c) - vt.at(r, c) - shift[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_differs_from_pwca() {
        let (store, s) = stage();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let v = tape.constant(uniform(&mut rng(10), &[6, CI], -1.0, 1.0));
        let w = tape.constant(uniform(&mut rng(11), &[3, C], -1.0, 1.0));
        let x = s.apply(&mut tape, &b, v, w).unwrap();
        let y = s.baseline(&mut tape, &b, v, w).unwrap();
        let gap = tape
            .value(x)
            .data()
            .iter()
            .zip(tape.value(y).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-3, "{gap}");
    }

    fn check_all_inputs(f: impl Fn(&PwcaStage, &mut Tape, &Bindings, Var, Var) -> Result<Var>) {
        let (store, s) = stage();
        let names = names(&store);
        let mut r = rng(12);
        for _ in 0..5 {
            let mut inputs: Vec<Tensor> = names
                .iter()
                .map(|n| uniform(&mut r, store.get(n).unwrap().value.shape(), -0.8, 0.8))
                .collect();
            inputs.push(uniform(&mut r, &[5, CI], -1.0, 1.0));
            inputs.push(uniform(&mut r, &[3, C], -1.0, 1.0));
            inputs.push(uniform(&mut r, &[5, CI], -1.0, 1.0));
            let k = names.len();
            let err = grad_check(&inputs, 1e-5, |t, v| {
                let b = Bindings::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let out = f(&s, t, &b, v[k], v[k + 1])?;
                let p = t.mul(out, v[k + 2])?;
                Ok(t.sum(p))
            });
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        check_all_inputs(|s, t, b, v, w| {
            let kv = s.project_words(t, b, w)?;
            s.cross_attention(t, b, v, kv)
        });
    }

    #[test]
    fn pwca_gradient_matches_finite_differences() {
        check_all_inputs(|s, t, b, v, w| s.apply(t, b, v, w));
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        check_all_inputs(|s, t, b, v, w| s.baseline(t, b, v, w));
    }

    #[test]
    fn words_receive_gradient_through_pwca() {
        let (store, s) = stage();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let v = tape.constant(uniform(&mut rng(13), &[6, CI], -1.0, 1.0));
        let w = tape.leaf(uniform(&mut rng(14), &[3, C], -1.0, 1.0), true);
        let out = s.apply(&mut tape, &b, v, w).unwrap();
        let wt = tape.constant(uniform(&mut rng(15), &[6, CI], -1.0, 1.0));
        let p = tape.mul(out, wt).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        assert!(g.data().iter().map(|x| x.abs()).sum::<f64>() > 1e-8);
    }
}
