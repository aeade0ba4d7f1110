//! Text-flow and layout-flow input embeddings.
//!
//! The text flow sums a token lookup and a 1D position lookup, then applies
//! layer norm. The layout flow looks up the six box fields in four tables
//! (x for `xmin`/`xmax`, y for `ymin`/`ymax`, width, height), concatenates
//! them, projects back to `d_L`, adds its own 1D position lookup and applies
//! layer norm.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::document::{NormalizedBBox, COORD_MAX};
use crate::error::{Error, Result};
use crate::nn::{normal_matrix, LayerNorm, Linear, INIT_STD};

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub token: ParamId,
    pub text_position: ParamId,
    pub text_ln: LayerNorm,
    pub layout_position: ParamId,
    pub x: ParamId,
    pub y: ParamId,
    pub width: ParamId,
    pub height: ParamId,
    pub projection: Linear,
    pub layout_ln: LayerNorm,
    pub coord_dim: usize,
}

impl EmbeddingParams {
    pub fn register(
        store: &mut ParamStore,
        vocab_size: usize,
        max_len: usize,
        d_text: usize,
        d_layout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_layout % 6 != 0 || d_layout == 0 {
            return Err(Error::Config(format!(
                "layout hidden size {d_layout} must be a positive multiple of 6"
            )));
        }
        let coord_dim = d_layout / 6;
        let rows = COORD_MAX as usize + 1;
        let mut table = |name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            store.add(name, normal_matrix(r, c, INIT_STD, rng))
        };
        let token = table("text.embed.token", vocab_size, d_text, rng);
        let text_position = table("text.embed.position", max_len, d_text, rng);
        let layout_position = table("layout.embed.position", max_len, d_layout, rng);
        let x = table("layout.embed.x", rows, coord_dim, rng);
        let y = table("layout.embed.y", rows, coord_dim, rng);
        let width = table("layout.embed.width", rows, coord_dim, rng);
        let height = table("layout.embed.height", rows, coord_dim, rng);
        let text_ln = LayerNorm::register(store, "text.embed.ln", d_text);
        let projection = Linear::register(store, "layout.embed.projection", d_layout, d_layout, rng);
        let layout_ln = LayerNorm::register(store, "layout.embed.ln", d_layout);
        Ok(Self {
            token,
            text_position,
            text_ln,
            layout_position,
            x,
            y,
            width,
            height,
            projection,
            layout_ln,
            coord_dim,
        })
    }
}

/// `E_T = LN(E_token + P_1D)`, one row per position.
pub fn text_embedding(
    tape: &mut Tape,
    token_ids: &[u32],
    position_ids: &[usize],
    params: &EmbeddingParams,
) -> Result<Var> {
    let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
    let tok = tape.gather(params.token, &ids)?;
    let pos = tape.gather(params.text_position, position_ids)?;
    let sum = tape.add(tok, pos);
    Ok(params.text_ln.forward(tape, sum))
}

/// `E_L = LN(Linear(CAT(x[xmin], x[xmax], y[ymin], y[ymax], w[width], h[height])) + P_1D)`.
pub fn layout_embedding(
    tape: &mut Tape,
    boxes: &[NormalizedBBox],
    position_ids: &[usize],
    params: &EmbeddingParams,
) -> Result<Var> {
    let field = |f: fn(&NormalizedBBox) -> u16| -> Vec<usize> { boxes.iter().map(|b| f(b) as usize).collect() };
    let parts = [
        tape.gather(params.x, &field(|b| b.xmin))?,
        tape.gather(params.x, &field(|b| b.xmax))?,
        tape.gather(params.y, &field(|b| b.ymin))?,
        tape.gather(params.y, &field(|b| b.ymax))?,
        tape.gather(params.width, &field(|b| b.width))?,
        tape.gather(params.height, &field(|b| b.height))?,
    ];
    let cat = tape.concat_cols(&parts)?;
    let p2d = params.projection.forward(tape, cat);
    let pos = tape.gather(params.layout_position, position_ids)?;
    let sum = tape.add(p2d, pos);
    Ok(params.layout_ln.forward(tape, sum))
}

/// Zeroes both 1D position tables; used by permutation checks.
pub fn zero_positions(store: &mut ParamStore, params: &EmbeddingParams) {
    for id in [params.text_position, params.layout_position] {
        let shape = store.get(id).dim();
        *store.get_mut(id) = Matrix::zeros(shape);
    }
}
