//! Question-level video encoders. Each maps a `[1, T, H, W]` clip to a
//! `feature_dim` vector using parameters bound on the same tape.

use sdsnet_tensor::{Conv3dSpec, Element, Rounding, Tape, Tensor, Var};

use super::config::{EncoderKind, ModelConfig, FRAME_STRIDE};
use super::params::Bound;
use super::ModelError;

type Result<T> = std::result::Result<T, ModelError>;

pub fn encode<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, clip: Var) -> Result<Var> {
    match cfg.encoder {
        EncoderKind::Q3dcnn => q3dcnn_forward(tape, p, cfg, clip),
        EncoderKind::Bilstm => bilstm_forward(tape, p, cfg, clip),
        EncoderKind::Nonlocal => nonlocal_forward(tape, p, cfg, clip),
        EncoderKind::None => Err(ModelError::Config("model has no video encoder".into())),
    }
}

fn dense<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (w, b) = (p.var(&format!("{prefix}.w"))?, p.var(&format!("{prefix}.b"))?);
    Ok(tape.linear(x, w, b)?)
}

fn conv<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, spec: Conv3dSpec) -> Result<Var> {
    let (w, b) = (p.var(&format!("{prefix}.w"))?, p.var(&format!("{prefix}.b"))?);
    Ok(tape.conv3d(x, w, b, spec)?)
}

/// Conv blocks (3x3x3, temporal pad 1, ReLU, 2x2x2 pooling), a final conv
/// spanning the remaining volume, ReLU, then a linear projection.
pub fn q3dcnn_forward<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, clip: Var) -> Result<Var> {
    let mut x = clip;
    for (i, rounding) in cfg.pool_rounding.iter().enumerate() {
        x = conv(tape, p, &format!("enc.conv{}", i + 1), x, Conv3dSpec::padded(1))?;
        x = tape.relu(x)?;
        x = tape.maxpool3d(x, rounding.map(Rounding::from))?;
    }
    x = conv(tape, p, "enc.conv_final", x, Conv3dSpec::default())?;
    x = tape.relu(x)?;
    let width = tape.value(x).numel();
    x = tape.reshape(x, &[width])?;
    dense(tape, p, "enc.fc", x)
}

/// Two strided per-frame conv stages and a linear embedding: `[T, d]`.
pub fn frame_embeddings<T: Element>(tape: &mut Tape<T>, p: &Bound, clip: Var) -> Result<Var> {
    let mut x = clip;
    for stage in ["enc.frame_conv1", "enc.frame_conv2"] {
        x = conv(tape, p, stage, x, Conv3dSpec::strided(FRAME_STRIDE))?;
        x = tape.relu(x)?;
    }
    x = tape.permute(x, &[1, 0, 2, 3])?;
    let dims = tape.value(x).dims().to_vec();
    x = tape.reshape(x, &[dims[0], dims[1] * dims[2] * dims[3]])?;
    x = tape.matmul(x, p.var("enc.embed.w")?)?;
    x = tape.add_row(x, p.var("enc.embed.b")?)?;
    Ok(tape.relu(x)?)
}

/// One LSTM step. `w` is `[4h, d + h]` acting on `[x, h]`, gate rows in the
/// order input, forget, candidate, output. Returns `(h', c')`.
pub fn lstm_cell<T: Element>(tape: &mut Tape<T>, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let n = tape.value(h).numel();
    let xh = tape.concat(&[x, h])?;
    let z = tape.linear(xh, w, b)?;
    let gate = |tape: &mut Tape<T>, k: usize| tape.slice(z, k * n, n);
    let (i, f, g, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs an LSTM over the rows of `xs[T, d]` in the given order and returns
/// the last hidden state.
pub fn lstm_last_state<T: Element>(
    tape: &mut Tape<T>,
    xs: Var,
    order: impl Iterator<Item = usize>,
    w: Var,
    b: Var,
    hidden: usize,
) -> Result<Var> {
    let mut h = tape.constant(Tensor::zeros(vec![hidden])?)?;
    let mut c = tape.constant(Tensor::zeros(vec![hidden])?)?;
    for t in order {
        let x = tape.row(xs, t)?;
        (h, c) = lstm_cell(tape, x, h, c, w, b)?;
    }
    Ok(h)
}

pub fn bilstm_forward<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, clip: Var) -> Result<Var> {
    let xs = frame_embeddings(tape, p, clip)?;
    let steps = tape.value(xs).dims()[0];
    let d = cfg.temporal_dim;
    let fwd = lstm_last_state(tape, xs, 0..steps, p.var("enc.lstm.fwd.w")?, p.var("enc.lstm.fwd.b")?, d)?;
    let bwd = lstm_last_state(tape, xs, (0..steps).rev(), p.var("enc.lstm.bwd.w")?, p.var("enc.lstm.bwd.b")?, d)?;
    let both = tape.concat(&[fwd, bwd])?;
    dense(tape, p, "enc.fc", both)
}

/// Embedded-Gaussian attention over the rows of `xs[T, d]`: returns the
/// `[T, T]` weights `softmax((X θ)(X φ)ᵀ / sqrt(k))` and `weights · (X g)`.
pub fn attention<T: Element>(tape: &mut Tape<T>, xs: Var, theta: Var, phi: Var, g: Var) -> Result<(Var, Var)> {
    let k = tape.value(theta).dims()[1];
    let q = tape.matmul(xs, theta)?;
    let kx = tape.matmul(xs, phi)?;
    let kt = tape.transpose(kx)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::of(1.0 / (k as f64).sqrt()))?;
    let weights = tape.softmax(scores)?;
    let values = tape.matmul(xs, g)?;
    let y = tape.matmul(weights, values)?;
    Ok((weights, y))
}

pub fn nonlocal_forward<T: Element>(tape: &mut Tape<T>, p: &Bound, _cfg: &ModelConfig, clip: Var) -> Result<Var> {
    let xs = frame_embeddings(tape, p, clip)?;
    let (_, y) = attention(tape, xs, p.var("enc.nl.theta")?, p.var("enc.nl.phi")?, p.var("enc.nl.g")?)?;
    let projected = tape.matmul(y, p.var("enc.nl.out")?)?;
    let z = tape.add(xs, projected)?;
    let pooled = tape.mean_rows(z)?;
    dense(tape, p, "enc.fc", pooled)
}
