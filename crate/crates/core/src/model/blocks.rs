//! Functional building blocks operating directly on tape variables. The
//! network in `net.rs` binds its parameters and calls these.

use crate::error::{Result, TabsError};
use crate::tensor::{Scalar, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Hidden width of a squeeze-excitation bottleneck.
pub fn se_hidden(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels < reduction {
        return Err(TabsError::config(format!(
            "squeeze-excitation needs at least {reduction} channels, got {channels}"
        )));
    }
    Ok(channels / reduction)
}

#[derive(Clone, Copy, Debug)]
pub struct SeWeights {
    /// `[C, C/r]`
    pub fc1_w: Var,
    pub fc1_b: Var,
    /// `[C/r, C]`
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Global average pool, two-layer bottleneck MLP with a sigmoid gate, and
/// channel-wise rescaling of the input.
pub fn se_block<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &SeWeights) -> Result<Var> {
    let pooled = tape.channel_mean(x)?;
    let hidden = tape.linear(pooled, w.fc1_w, Some(w.fc1_b))?;
    let hidden = tape.relu(hidden);
    let logits = tape.linear(hidden, w.fc2_w, Some(w.fc2_b))?;
    let gate = tape.sigmoid(logits);
    tape.scale_channels(x, gate)
}

/// Bottleneck features `[f, s, s, s]` to tokens `[s³, d]`: a 1×1×1 projection
/// `f → d`, row-major flattening of voxels into tokens, plus a learned
/// positional embedding `[s³, d]`.
pub fn tokenize<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    proj_w: Var,
    proj_b: Option<Var>,
    positional: Var,
) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 4 {
        return Err(TabsError::config(format!(
            "tokenize: features must be [f,s,s,s], got {fs:?}"
        )));
    }
    let n = fs[1] * fs[2] * fs[3];
    let projected = tape.conv3d(features, proj_w, proj_b, 1, 0)?;
    let d = tape.shape(projected)[0];
    if tape.shape(positional) != [n, d] {
        return Err(TabsError::config(format!(
            "tokenize: positional embedding is {:?}, expected [{n}, {d}]",
            tape.shape(positional)
        )));
    }
    let flat = tape.reshape(projected, &[d, n])?;
    let tokens = tape.transpose(flat)?;
    tape.add(tokens, positional)
}

/// Tokens `[n, d]` back to a `[d, s, s, s]` volume (inverse of the row-major
/// flattening), then a 3×3×3 convolution with padding 1 to `f` channels.
pub fn detokenize<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    edge: usize,
    conv_w: Var,
    conv_b: Option<Var>,
) -> Result<Var> {
    let volume = reshape_tokens(tape, tokens, edge)?;
    tape.conv3d(volume, conv_w, conv_b, 1, 1)
}

/// The reshape half of [`detokenize`].
pub fn reshape_tokens<T: Scalar>(tape: &mut Tape<T>, tokens: Var, edge: usize) -> Result<Var> {
    let ts = tape.shape(tokens).to_vec();
    if ts.len() != 2 || ts[0] != edge * edge * edge {
        return Err(TabsError::config(format!(
            "detokenize: {ts:?} tokens cannot fill a {edge}³ grid"
        )));
    }
    let d = ts[1];
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[d, edge, edge, edge])
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
}

/// Multi-head scaled dot-product self-attention over `x: [n, d]`.
/// Returns the output and each head's `[n, n]` attention matrix.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(TabsError::config(format!(
            "attention: width {d} is not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    let q = tape.linear(x, w.q_w, Some(w.q_b))?;
    let k = tape.linear(x, w.k_w, Some(w.k_b))?;
    let v = tape.linear(x, w.v_w, Some(w.v_b))?;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        outputs.push(tape.matmul(attn, vh)?);
        maps.push(attn);
    }
    let merged = tape.concat_cols(&outputs)?;
    let out = tape.linear(merged, w.o_w, Some(w.o_b))?;
    Ok((out, maps))
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerWeights {
    pub attn: AttentionWeights,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// Post-norm encoder layer: `x = LN(x + MHA(x))`, then `x = LN(x + FFN(x))`
/// with a ReLU feed-forward network.
pub fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &EncoderLayerWeights,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let eps = T::from_f64(NORM_EPS);
    let (attended, maps) = multi_head_attention(tape, x, &w.attn, heads)?;
    let res = tape.add(x, attended)?;
    let x1 = tape.layer_norm(res, w.ln1_gamma, w.ln1_beta, eps)?;
    let h = tape.linear(x1, w.ff1_w, Some(w.ff1_b))?;
    let h = tape.relu(h);
    let h = tape.linear(h, w.ff2_w, Some(w.ff2_b))?;
    let res = tape.add(x1, h)?;
    let out = tape.layer_norm(res, w.ln2_gamma, w.ln2_beta, eps)?;
    Ok((out, maps))
}

/// Stack of identical post-norm encoder layers.
pub fn transformer_encoder<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    layers: &[EncoderLayerWeights],
    heads: usize,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut x = tokens;
    let mut all_maps = Vec::with_capacity(layers.len());
    for layer in layers {
        let (out, maps) = transformer_layer(tape, x, layer, heads)?;
        x = out;
        all_maps.push(maps);
    }
    Ok((x, all_maps))
}
