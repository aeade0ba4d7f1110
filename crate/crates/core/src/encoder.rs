//! Parallel text/layout transformer with bi-directional attention
//! complementation (BiACM).
//!
//! Both flows compute their own pre-softmax attention scores per head. The
//! text flow attends with `α_T + α_L`; the layout flow attends with
//! `α_L + α_T`, except that during pre-training the text term is detached so
//! no gradient from the layout flow reaches the text flow through the
//! shared scores. Each flow then applies its own mask and softmax and weights
//! its own value vectors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{apply_dropout, Dropout, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_text: usize,
    pub d_layout: usize,
    pub ffn_text: usize,
    pub ffn_layout: usize,
    pub max_len: usize,
    pub mode: Mode,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, 4 heads, 128/48 hidden, 4× FFN, 128 tokens.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_text: 128,
            d_layout: 48,
            ffn_text: 512,
            ffn_layout: 192,
            max_len: 128,
            mode: Mode::Pretrain,
            dropout: 0.1,
        }
    }

    /// Published base geometry: 12 layers, 12 heads, 768/192 hidden, 512 tokens.
    pub fn base() -> Self {
        Self {
            layers: 12,
            heads: 12,
            d_text: 768,
            d_layout: 192,
            ffn_text: 3072,
            ffn_layout: 768,
            max_len: 512,
            mode: Mode::Pretrain,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.max_len < 2 {
            return err("layers and heads must be positive and max_len at least 2".into());
        }
        if self.d_text % self.heads != 0 {
            return err(format!("d_text {} not divisible by {} heads", self.d_text, self.heads));
        }
        if self.d_layout % self.heads != 0 {
            return err(format!("d_layout {} not divisible by {} heads", self.d_layout, self.heads));
        }
        if self.d_layout % 6 != 0 || self.d_layout == 0 {
            return err(format!("d_layout {} must be a positive multiple of 6", self.d_layout));
        }
        if self.ffn_text == 0 || self.ffn_layout == 0 {
            return err("feed-forward widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Projections and sublayers of one flow in one layer.
#[derive(Clone, Copy, Debug)]
pub struct FlowLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_ln: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_ln: LayerNorm,
}

impl FlowLayer {
    fn register(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Linear::register(store, &format!("{name}.attn.query"), d, d, rng),
            key: Linear::register(store, &format!("{name}.attn.key"), d, d, rng),
            value: Linear::register(store, &format!("{name}.attn.value"), d, d, rng),
            output: Linear::register(store, &format!("{name}.attn.output"), d, d, rng),
            attn_ln: LayerNorm::register(store, &format!("{name}.attn.ln"), d),
            ffn_in: Linear::register(store, &format!("{name}.ffn.in"), d, ffn, rng),
            ffn_out: Linear::register(store, &format!("{name}.ffn.out"), ffn, d, rng),
            ffn_ln: LayerNorm::register(store, &format!("{name}.ffn.ln"), d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub text: FlowLayer,
    pub layout: FlowLayer,
}

pub fn register_layers(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Vec<LayerParams> {
    (0..cfg.layers)
        .map(|i| LayerParams {
            text: FlowLayer::register(store, &format!("text.layer{i}"), cfg.d_text, cfg.ffn_text, rng),
            layout: FlowLayer::register(store, &format!("layout.layer{i}"), cfg.d_layout, cfg.ffn_layout, rng),
        })
        .collect()
}

/// Per-head scaled dot-product scores `(x_i W_Q)(x_j W_K)ᵀ / sqrt(d_h)`
/// with `d_h = d / heads`. Returns one `N×N` matrix per head.
pub fn attention_scores(tape: &mut Tape, x: Var, query: &Linear, key: &Linear, heads: usize) -> Result<Vec<Var>> {
    let d = tape.value(x).ncols();
    let dq = tape.params().get(query.weight).dim();
    let dk = tape.params().get(key.weight).dim();
    if dq.0 != d || dk.0 != d || dq.1 != dk.1 || dq.1 % heads != 0 {
        return Err(Error::Shape(format!(
            "input width {d}, query {dq:?}, key {dk:?}, {heads} heads"
        )));
    }
    let q = query.forward(tape, x);
    let k = key.forward(tape, x);
    Ok(scores_from_projections(tape, q, k, heads))
}

fn scores_from_projections(tape: &mut Tape, q: Var, k: Var, heads: usize) -> Vec<Var> {
    let dh = tape.value(q).ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let s = tape.matmul_t(qh, kh);
            tape.scale(s, scale)
        })
        .collect()
}

/// Combines one head's scores of both flows. Values are identical across
/// modes; in pre-training the text scores enter the layout sum detached.
pub fn biacm_combine(tape: &mut Tape, scores_text: Var, scores_layout: Var, mode: Mode) -> Result<(Var, Var)> {
    let (st, sl) = (tape.value(scores_text).dim(), tape.value(scores_layout).dim());
    if st != sl {
        return Err(Error::Shape(format!("text scores {st:?} vs layout scores {sl:?}")));
    }
    let comb_text = tape.add(scores_layout, scores_text);
    let text_for_layout = match mode {
        Mode::Pretrain => tape.detach(scores_text),
        Mode::Finetune => scores_text,
    };
    let comb_layout = tape.add(scores_layout, text_for_layout);
    Ok((comb_text, comb_layout))
}

/// Output of [`encoder_forward`]; attention probabilities are kept per layer
/// and head for inspection.
pub struct EncoderOutput {
    pub text: Var,
    pub layout: Var,
    pub text_attention: Vec<Vec<Var>>,
    pub layout_attention: Vec<Vec<Var>>,
}

fn attend(tape: &mut Tape, probs: &[Var], v: Var, heads: usize) -> Result<Var> {
    let dh = tape.value(v).ncols() / heads;
    let ctx: Vec<Var> = probs
        .iter()
        .enumerate()
        .map(|(h, &p)| {
            let vh = tape.slice_cols(v, h * dh, dh);
            tape.matmul(p, vh)
        })
        .collect();
    tape.concat_cols(&ctx)
}

fn residual_blocks(
    tape: &mut Tape,
    flow: &FlowLayer,
    input: Var,
    context: Var,
    dropout: &mut Option<Dropout<'_>>,
) -> Var {
    let attn = flow.output.forward(tape, context);
    let attn = apply_dropout(tape, attn, dropout);
    let res = tape.add(input, attn);
    let h = flow.attn_ln.forward(tape, res);
    let inner = flow.ffn_in.forward(tape, h);
    let inner = tape.gelu(inner);
    let out = flow.ffn_out.forward(tape, inner);
    let out = apply_dropout(tape, out, dropout);
    let res = tape.add(h, out);
    flow.ffn_ln.forward(tape, res)
}

fn check_finite(tape: &Tape, v: Var, layer: usize, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            what: what.to_string(),
        })
    }
}

/// Runs all layers of both flows. `key_mask[j]` is `false` for pad keys.
pub fn encoder_forward(
    tape: &mut Tape,
    text_embed: Var,
    layout_embed: Var,
    key_mask: &[bool],
    cfg: &EncoderConfig,
    layers: &[LayerParams],
    mut dropout: Option<Dropout<'_>>,
) -> Result<EncoderOutput> {
    let n = tape.value(text_embed).nrows();
    if tape.value(layout_embed).nrows() != n || key_mask.len() != n {
        return Err(Error::Shape(format!(
            "text rows {n}, layout rows {}, mask {}",
            tape.value(layout_embed).nrows(),
            key_mask.len()
        )));
    }
    let heads = cfg.heads;
    let mut ht = text_embed;
    let mut hl = layout_embed;
    let mut text_attention = Vec::with_capacity(layers.len());
    let mut layout_attention = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let st = attention_scores(tape, ht, &layer.text.query, &layer.text.key, heads)?;
        let sl = attention_scores(tape, hl, &layer.layout.query, &layer.layout.key, heads)?;
        let vt = layer.text.value.forward(tape, ht);
        let vl = layer.layout.value.forward(tape, hl);
        let mut pt = Vec::with_capacity(heads);
        let mut pl = Vec::with_capacity(heads);
        for h in 0..heads {
            let (ct, cl) = biacm_combine(tape, st[h], sl[h], cfg.mode)?;
            pt.push(tape.masked_softmax(ct, key_mask));
            pl.push(tape.masked_softmax(cl, key_mask));
        }
        let ctx_t = attend(tape, &pt, vt, heads)?;
        let ctx_l = attend(tape, &pl, vl, heads)?;
        ht = residual_blocks(tape, &layer.text, ht, ctx_t, &mut dropout);
        hl = residual_blocks(tape, &layer.layout, hl, ctx_l, &mut dropout);
        check_finite(tape, ht, li, "text flow activations")?;
        check_finite(tape, hl, li, "layout flow activations")?;
        text_attention.push(pt);
        layout_attention.push(pl);
    }
    Ok(EncoderOutput {
        text: ht,
        layout: hl,
        text_attention,
        layout_attention,
    })
}

/// Channel concatenation `[H_T | H_L]`.
pub fn concat_features(tape: &mut Tape, text: Var, layout: Var) -> Result<Var> {
    let (a, b) = (tape.value(text).nrows(), tape.value(layout).nrows());
    if a != b {
        return Err(Error::Shape(format!("text has {a} rows, layout has {b}")));
    }
    tape.concat_cols(&[text, layout])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Matrix;
    use ndarray::{array, s};
    use rand::SeedableRng;

    fn linear(store: &mut ParamStore, name: &str, w: Matrix) -> Linear {
        let cols = w.ncols();
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Matrix::zeros((1, cols))),
        }
    }

    #[test]
    fn identity_projection_single_dim() {
        let mut store = ParamStore::new();
        let q = linear(&mut store, "q", array![[1.0]]);
        let k = linear(&mut store, "k", array![[1.0]]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[2.0], [3.0]]);
        let s = attention_scores(&mut tape, x, &q, &k, 1).unwrap();
        assert_eq!(tape.value(s[0])[[0, 1]], 6.0);
        assert_eq!(tape.value(s[0])[[1, 1]], 9.0);
    }

    #[test]
    fn zero_input_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let q = Linear::register(&mut store, "q", 4, 4, &mut rng);
        let k = Linear::register(&mut store, "k", 4, 4, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::zeros((3, 4)));
        for s in attention_scores(&mut tape, x, &q, &k, 2).unwrap() {
            assert!(tape.value(s).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn naive_loop_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let wq = crate::nn::normal_matrix(4, 4, 1.0, &mut rng);
        let wk = crate::nn::normal_matrix(4, 4, 1.0, &mut rng);
        let x = crate::nn::normal_matrix(3, 4, 1.0, &mut rng);
        let q = linear(&mut store, "q", wq.clone());
        let k = linear(&mut store, "k", wk.clone());
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let s = attention_scores(&mut tape, xv, &q, &k, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for c in 0..4 {
                    let mut qi = 0.0;
                    let mut kj = 0.0;
                    for r in 0..4 {
                        qi += x[[i, r]] * wq[[r, c]];
                        kj += x[[j, r]] * wk[[r, c]];
                    }
                    acc += qi * kj;
                }
                assert!((tape.value(s[0])[[i, j]] - acc / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut store = ParamStore::new();
        let q = linear(&mut store, "q", Matrix::zeros((3, 4)));
        let k = linear(&mut store, "k", Matrix::zeros((3, 4)));
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::zeros((2, 5)));
        assert!(matches!(attention_scores(&mut tape, x, &q, &k, 2), Err(Error::Shape(_))));
        let a = tape.constant(Matrix::zeros((2, 2)));
        let b = tape.constant(Matrix::zeros((3, 3)));
        assert!(matches!(biacm_combine(&mut tape, a, b, Mode::Pretrain), Err(Error::Shape(_))));
        assert!(matches!(concat_features(&mut tape, a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn combine_values_agree_across_modes() {
        let store = ParamStore::new();
        for mode in [Mode::Pretrain, Mode::Finetune] {
            let mut tape = Tape::new(&store);
            let t = tape.constant(array![[0.5]]);
            let l = tape.constant(array![[0.25]]);
            let (ct, cl) = biacm_combine(&mut tape, t, l, mode).unwrap();
            assert_eq!(tape.scalar(ct), 0.75);
            assert_eq!(tape.scalar(cl), 0.75);
            let z = tape.constant(array![[0.0]]);
            let (ct, _) = biacm_combine(&mut tape, t, z, mode).unwrap();
            assert_eq!(tape.scalar(ct), 0.5);
        }
    }

    #[test]
    fn concat_puts_text_first() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let t = tape.constant(Matrix::from_elem((2, 4), 1.0));
        let l = tape.constant(Matrix::zeros((2, 2)));
        let h = concat_features(&mut tape, t, l).unwrap();
        let v = tape.value(h);
        assert_eq!(v.dim(), (2, 6));
        assert_eq!(v.slice(s![.., ..4]), Matrix::from_elem((2, 4), 1.0));
        assert!(v.slice(s![.., 4..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::desk().validate().is_ok());
        assert!(EncoderConfig::base().validate().is_ok());
        let bad = EncoderConfig {
            d_layout: 50,
            ..EncoderConfig::desk()
        };
        assert!(bad.validate().is_err());
    }
}
