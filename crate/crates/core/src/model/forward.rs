//! Forward passes over the latent grid.

use super::{ModelConfig, ModelError, Weights};
use crate::rng::StreamRng;
use crate::tensor::{Graph, Scalar, TensorId};
use std::collections::BTreeMap;

/// Additive mask value for padded attention keys. Large enough that the
/// masked weight underflows to exactly zero after softmax at f32.
const KEY_MASK: f64 = -1e9;

/// A tokenized, possibly padded batch viewed by the model.
///
/// `tokens[b * l + i]` holds the token at position i of sample b; `pad` is
/// true at padded positions. `l` is the common padded length.
#[derive(Debug, Clone)]
pub struct GridInput<'a> {
    pub batch: usize,
    pub l: usize,
    pub tokens: &'a [u32],
    pub pad: &'a [bool],
}

impl<'a> GridInput<'a> {
    pub fn single(tokens: &'a [u32], pad: &'a [bool]) -> Self {
        Self {
            batch: 1,
            l: tokens.len(),
            tokens,
            pad,
        }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.l > cfg.max_len {
            return Err(ModelError::InputTooLong {
                len: self.l,
                max_len: cfg.max_len,
            });
        }
        debug_assert_eq!(self.tokens.len(), self.batch * self.l);
        debug_assert_eq!(self.pad.len(), self.batch * self.l);
        for (position, &t) in self.tokens.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::UnknownToken { position, token: t });
            }
        }
        Ok(())
    }
}

/// Weight tensors bound into a graph as leaves.
pub struct BoundParams {
    by_name: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> TensorId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.by_name.iter()
    }
}

/// Load every weight tensor into the graph. With `trainable` false the whole
/// forward pass records no backward metadata.
pub fn bind<T: Scalar>(graph: &mut Graph<T>, weights: &Weights<T>, trainable: bool) -> BoundParams {
    let mut by_name = BTreeMap::new();
    for t in weights.tensors() {
        let id = graph
            .leaf(&t.shape, t.data.clone(), trainable)
            .expect("weight shape/data consistent");
        by_name.insert(t.name.clone(), id);
    }
    BoundParams { by_name }
}

/// Per-forward constants derived from the padding mask.
struct PadConsts {
    /// [b, l, l, 1]: 1 on real cells, 0 when the row or column is padded.
    cell_mask: TensorId,
    /// [b, 1, 1, l]: 0 on real keys, -1e9 on padded keys.
    key_bias: TensorId,
}

fn pad_consts<T: Scalar>(graph: &mut Graph<T>, input: &GridInput) -> PadConsts {
    let (b, l) = (input.batch, input.l);
    let mut cell = vec![T::one(); b * l * l];
    let mut key = vec![T::zero(); b * l];
    for bb in 0..b {
        for i in 0..l {
            if input.pad[bb * l + i] {
                key[bb * l + i] = T::from_f64(KEY_MASK);
                for j in 0..l {
                    cell[(bb * l + i) * l + j] = T::zero();
                    cell[(bb * l + j) * l + i] = T::zero();
                }
            }
        }
    }
    let cell_mask = graph
        .constant(&[b, l, l, 1], cell)
        .expect("cell mask shape");
    let key_bias = graph.constant(&[b, 1, 1, l], key).expect("key bias shape");
    PadConsts { cell_mask, key_bias }
}

/// Token embedding broadcast: embedding A of the token at the column plus
/// embedding B of the token at the row fills cell (i, j). Embedding dropout,
/// then padded cells zeroed.
fn embed<T: Scalar>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    input: &GridInput,
    consts: &PadConsts,
    training: bool,
    rng: &mut StreamRng,
) -> Result<TensorId, ModelError> {
    let (b, l) = (input.batch, input.l);
    let d = cfg.model_dim;
    let row_table = params.get("embed_row.weight");
    let col_table = params.get("embed_col.weight");
    let a = graph.gather_rows(row_table, input.tokens)?; // [b*l, d], indexed by column token
    let a = graph.reshape(a, &[b, 1, l, d])?;
    let bb = graph.gather_rows(col_table, input.tokens)?; // indexed by row token
    let bb = graph.reshape(bb, &[b, l, 1, d])?;
    let grid = graph.add(a, bb)?; // [b, l, l, d]
    let grid = graph.dropout(grid, cfg.embed_dropout, training, rng)?;
    let grid = graph.mul(grid, consts.cell_mask)?;
    Ok(grid)
}

enum Axis {
    Row,
    Column,
}

/// Pre-norm multi-head attention along one axis of the grid, with relative
/// position bias, key padding mask, residual and dropout.
#[allow(clippy::too_many_arguments)]
fn axial_attention<T: Scalar>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorId,
    axis: Axis,
    consts: &PadConsts,
    training: bool,
    rng: &mut StreamRng,
) -> Result<TensorId, ModelError> {
    let shape = graph.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[3]);
    let heads = cfg.num_head;
    let dh = cfg.head_dim();

    let gain = params.get(&format!("{prefix}.norm.gain"));
    let bias = params.get(&format!("{prefix}.norm.bias"));
    let normed = graph.layer_norm(x, gain, bias, T::from_f64(cfg.ln_eps))?;
    let oriented = match axis {
        Axis::Row => normed,
        Axis::Column => graph.transpose_12(normed)?,
    };

    let proj = |graph: &mut Graph<T>, name: &str| -> Result<TensorId, ModelError> {
        let w = params.get(&format!("{prefix}.{name}.weight"));
        let wb = params.get(&format!("{prefix}.{name}.bias"));
        let y = graph.matmul(oriented, w)?;
        Ok(graph.add(y, wb)?)
    };
    let q = proj(graph, "q")?;
    let k = proj(graph, "k")?;
    let v = proj(graph, "v")?;

    let q3 = graph.reshape(q, &[b * l, l, d])?;
    let k3 = graph.reshape(k, &[b * l, l, d])?;
    let v3 = graph.reshape(v, &[b * l, l, d])?;
    let qh = graph.split_heads(q3, heads)?;
    let kh = graph.split_heads(k3, heads)?;
    let vh = graph.split_heads(v3, heads)?;

    let scores = graph.bmm(qh, kh, true)?; // [b*l*heads, l, l]
    let mut scores = graph.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    if cfg.relative_position_encoding {
        let table = params.get(&format!("{prefix}.rel_bias"));
        let rel = rel_position_matrix(graph, table, l, cfg.rel_pos_clip)?;
        scores = graph.add(scores, rel)?;
    }
    // mask padded keys: same pad vector no matter the axis
    let scores4 = graph.reshape(scores, &[b, l * heads, l, l])?;
    let masked = graph.add(scores4, consts.key_bias)?;
    let scores = graph.reshape(masked, &[b * l * heads, l, l])?;

    let attn = graph.softmax(scores, 2)?;
    let ctx = graph.bmm(attn, vh, false)?; // [b*l*heads, l, dh]
    let merged = graph.merge_heads(ctx, heads)?;
    let merged = graph.reshape(merged, &[b, l, l, d])?;

    let wo = params.get(&format!("{prefix}.out.weight"));
    let bo = params.get(&format!("{prefix}.out.bias"));
    let out = graph.matmul(merged, wo)?;
    let out = graph.add(out, bo)?;
    let out = match axis {
        Axis::Row => out,
        Axis::Column => graph.transpose_12(out)?,
    };
    let out = graph.dropout(out, cfg.resi_dropout, training, rng)?;
    Ok(graph.add(x, out)?)
}

/// Learned bias b[clip(j - i)] shared across heads, materialized as an
/// [l, l] matrix added to the attention logits.
fn rel_position_matrix<T: Scalar>(
    graph: &mut Graph<T>,
    table: TensorId,
    l: usize,
    clip: usize,
) -> Result<TensorId, ModelError> {
    let buckets = 2 * clip as i64 + 1;
    let mut ids = Vec::with_capacity(l * l);
    for i in 0..l as i64 {
        for j in 0..l as i64 {
            let offset = (j - i).clamp(-(clip as i64), clip as i64) + clip as i64;
            debug_assert!(offset >= 0 && offset < buckets);
            ids.push(offset as u32);
        }
    }
    let col = graph.reshape(table, &[buckets as usize, 1])?;
    let rows = graph.gather_rows(col, &ids)?; // [l*l, 1]
    Ok(graph.reshape(rows, &[l, l])?)
}

/// Pre-norm two-layer 3x3 convolution with GELU, residual and dropout.
/// Padded cells are zeroed before each convolution so batching never leaks
/// into real cells.
#[allow(clippy::too_many_arguments)]
fn conv_block<T: Scalar>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    x: TensorId,
    consts: &PadConsts,
    training: bool,
    rng: &mut StreamRng,
) -> Result<TensorId, ModelError> {
    let gain = params.get(&format!("layers.{layer}.conv_norm.gain"));
    let bias = params.get(&format!("layers.{layer}.conv_norm.bias"));
    let normed = graph.layer_norm(x, gain, bias, T::from_f64(cfg.ln_eps))?;
    let masked = graph.mul(normed, consts.cell_mask)?;
    let w1 = params.get(&format!("layers.{layer}.conv1.weight"));
    let b1 = params.get(&format!("layers.{layer}.conv1.bias"));
    let h = graph.conv2d_same(masked, w1)?;
    let h = graph.add(h, b1)?;
    let h = graph.gelu(h);
    let h = graph.mul(h, consts.cell_mask)?;
    let w2 = params.get(&format!("layers.{layer}.conv2.weight"));
    let b2 = params.get(&format!("layers.{layer}.conv2.bias"));
    let out = graph.conv2d_same(h, w2)?;
    let out = graph.add(out, b2)?;
    let out = graph.dropout(out, cfg.resi_dropout, training, rng)?;
    Ok(graph.add(x, out)?)
}

/// One pass of the block stack: row attention, column attention, convolution,
/// repeated `n_layers` times.
fn forward_once<T: Scalar>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    mut grid: TensorId,
    consts: &PadConsts,
    training: bool,
    rng: &mut StreamRng,
) -> Result<TensorId, ModelError> {
    for layer in 0..cfg.n_layers {
        grid = axial_attention(
            graph,
            params,
            cfg,
            &format!("layers.{layer}.row_attn"),
            grid,
            Axis::Row,
            consts,
            training,
            rng,
        )?;
        grid = axial_attention(
            graph,
            params,
            cfg,
            &format!("layers.{layer}.col_attn"),
            grid,
            Axis::Column,
            consts,
            training,
            rng,
        )?;
        grid = conv_block(graph, params, cfg, layer, grid, consts, training, rng)?;
    }
    Ok(grid)
}

/// Result of a forward pass holding the tape alive so callers can read
/// values and run backward.
pub struct RecycledForward<T: Scalar> {
    pub graph: Graph<T>,
    /// [b, l, l, 2] pairing logits.
    pub logits: TensorId,
    /// Final latent grid [b, l, l, d], the recycling state.
    pub latent: TensorId,
    pub params: BoundParams,
}

/// Single pass with an explicit recycling input (zeros when `None`):
/// grid = embed(seq) + recycle_norm(r), block stack, generator.
pub fn forward_with_recycle<T: Scalar>(
    weights: &Weights<T>,
    cfg: &ModelConfig,
    input: &GridInput,
    recycle: Option<&[T]>,
    trainable: bool,
    training: bool,
    rng: &mut StreamRng,
) -> Result<RecycledForward<T>, ModelError> {
    cfg.validate()?;
    input.validate(cfg)?;
    let (b, l, d) = (input.batch, input.l, cfg.model_dim);
    let mut graph = Graph::new();
    let params = bind(&mut graph, weights, trainable);
    let consts = pad_consts(&mut graph, input);

    let grid = embed(&mut graph, &params, cfg, input, &consts, training, rng)?;
    let r_data = match recycle {
        Some(r) => {
            debug_assert_eq!(r.len(), b * l * l * d);
            r.to_vec()
        }
        None => vec![T::zero(); b * l * l * d],
    };
    let r = graph.constant(&[b, l, l, d], r_data)?;
    let r_gain = params.get("recycle_norm.gain");
    let r_bias = params.get("recycle_norm.bias");
    let r_normed = graph.layer_norm(r, r_gain, r_bias, T::from_f64(cfg.ln_eps))?;
    let grid = graph.add(grid, r_normed)?;

    let latent = forward_once(&mut graph, &params, cfg, grid, &consts, training, rng)?;

    let gw = params.get("generator.weight");
    let gb = params.get("generator.bias");
    let logits = graph.matmul(latent, gw)?;
    let logits = graph.add(logits, gb)?;

    Ok(RecycledForward {
        graph,
        logits,
        latent,
        params,
    })
}

/// Recycled forward: `n_cycles - 1` passes run without gradient tracking,
/// each feeding its latent into the next; the last pass records the tape.
pub fn forward_recycled<T: Scalar>(
    weights: &Weights<T>,
    cfg: &ModelConfig,
    input: &GridInput,
    n_cycles: usize,
    training: bool,
    rng: &mut StreamRng,
) -> Result<RecycledForward<T>, ModelError> {
    if n_cycles < 1 {
        return Err(ModelError::Config {
            message: format!("n_cycles {n_cycles} must be at least 1"),
        });
    }
    let mut recycle: Option<Vec<T>> = None;
    for _ in 0..n_cycles - 1 {
        let pass = forward_with_recycle(
            weights,
            cfg,
            input,
            recycle.as_deref(),
            false,
            training,
            rng,
        )?;
        recycle = Some(pass.graph.data(pass.latent).to_vec());
    }
    forward_with_recycle(
        weights,
        cfg,
        input,
        recycle.as_deref(),
        training,
        training,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fold::RnaSequence;
    use crate::model::Weights;

    fn toy_cfg(d: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            model_dim: d,
            n_layers: layers,
            num_head: 1,
            rel_pos_clip: 4,
            resi_dropout: 0.0,
            embed_dropout: 0.0,
            max_len: 64,
            ..ModelConfig::default()
        }
    }

    fn rng() -> StreamRng {
        StreamRng::from_seed(77)
    }

    fn run_latent(
        weights: &Weights<f32>,
        cfg: &ModelConfig,
        seq: &str,
        n_cycles: usize,
    ) -> (Vec<f32>, Vec<f32>) {
        let seq = RnaSequence::new("t", seq).unwrap();
        let tokens = seq.token_ids();
        let pad = vec![false; tokens.len()];
        let input = GridInput::single(&tokens, &pad);
        let fwd = forward_recycled(weights, cfg, &input, n_cycles, false, &mut rng()).unwrap();
        (
            fwd.graph.data(fwd.latent).to_vec(),
            fwd.graph.data(fwd.logits).to_vec(),
        )
    }

    #[test]
    fn embed_single_position_is_sum_of_embeddings() {
        let cfg = toy_cfg(8, 0);
        let weights: Weights<f32> = Weights::init(&cfg, &mut rng());
        let (latent, _) = run_latent(&weights, &cfg, "G", 1);
        let token = 2usize; // G
        let d = cfg.model_dim;
        let row = &weights.get("embed_row.weight").unwrap().data[token * d..(token + 1) * d];
        let col = &weights.get("embed_col.weight").unwrap().data[token * d..(token + 1) * d];
        for i in 0..d {
            // recycle_norm of zeros is exactly zero at init (gain 1, bias 0)
            let expected = row[i] + col[i];
            assert!((latent[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_homopolymer_grid_is_uniform() {
        let cfg = toy_cfg(8, 0);
        let weights: Weights<f32> = Weights::init(&cfg, &mut rng());
        let (latent, _) = run_latent(&weights, &cfg, "AAAA", 1);
        let d = cfg.model_dim;
        let cell = |i: usize, j: usize| &latent[(i * 4 + j) * d..(i * 4 + j + 1) * d];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(cell(i, j), cell(0, 0), "cell ({i},{j}) differs");
            }
        }
    }

    #[test]
    fn embed_column_differences_are_row_independent() {
        let cfg = toy_cfg(8, 0);
        let weights: Weights<f32> = Weights::init(&cfg, &mut rng());
        let (latent, _) = run_latent(&weights, &cfg, "ACGUA", 1);
        let l = 5;
        let d = cfg.model_dim;
        let cell = |i: usize, j: usize| &latent[(i * l + j) * d..(i * l + j + 1) * d];
        let (j, k) = (1usize, 3usize);
        let base: Vec<f32> = cell(0, j).iter().zip(cell(0, k)).map(|(a, b)| a - b).collect();
        for i in 1..l {
            let diff: Vec<f32> = cell(i, j).iter().zip(cell(i, k)).map(|(a, b)| a - b).collect();
            for (x, y) in diff.iter().zip(&base) {
                assert!((x - y).abs() < 1e-6, "difference depends on row {i}");
            }
        }
    }

    /// Hand-rolled dense per-row attention at f64, used as the reference
    /// implementation for the axial attention sublayer.
    #[allow(clippy::too_many_arguments)]
    fn dense_row_attention_ref(
        grid: &[f64], // [l, l, d] single sample
        l: usize,
        d: usize,
        wq: &[f64],
        bq: &[f64],
        wk: &[f64],
        bk: &[f64],
        wv: &[f64],
        bv: &[f64],
        wo: &[f64],
        bo: &[f64],
        gain: &[f64],
        bias: &[f64],
        rel: &[f64],
        clip: usize,
        eps: f64,
    ) -> Vec<f64> {
        let cell = |i: usize, j: usize| &grid[(i * l + j) * d..(i * l + j + 1) * d];
        let norm = |x: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            (0..d).map(|c| (x[c] - mean) * inv * gain[c] + bias[c]).collect()
        };
        let matvec = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|o| (0..d).map(|i| x[i] * w[i * d + o]).sum::<f64>() + b[o])
                .collect()
        };
        let mut out = grid.to_vec();
        for r in 0..l {
            let normed: Vec<Vec<f64>> = (0..l).map(|j| norm(cell(r, j))).collect();
            let qs: Vec<Vec<f64>> = normed.iter().map(|x| matvec(wq, bq, x)).collect();
            let ks: Vec<Vec<f64>> = normed.iter().map(|x| matvec(wk, bk, x)).collect();
            let vs: Vec<Vec<f64>> = normed.iter().map(|x| matvec(wv, bv, x)).collect();
            for i in 0..l {
                let mut scores: Vec<f64> = (0..l)
                    .map(|j| {
                        let dot: f64 = qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum();
                        let off = (j as i64 - i as i64).clamp(-(clip as i64), clip as i64)
                            + clip as i64;
                        dot / (d as f64).sqrt() + rel[off as usize]
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp() / sum;
                }
                let mut ctx = vec![0.0; d];
                for j in 0..l {
                    for c in 0..d {
                        ctx[c] += scores[j] * vs[j][c];
                    }
                }
                let proj = matvec(wo, bo, &ctx);
                for c in 0..d {
                    out[(r * l + i) * d + c] += proj[c];
                }
            }
        }
        out
    }

    #[test]
    fn row_attention_matches_dense_reference() {
        let cfg = ModelConfig {
            model_dim: 2,
            n_layers: 1,
            num_head: 1,
            rel_pos_clip: 4,
            resi_dropout: 0.0,
            embed_dropout: 0.0,
            max_len: 8,
            ..ModelConfig::default()
        };
        let mut seed = StreamRng::from_seed(3);
        let mut weights: Weights<f64> = Weights::init(&cfg, &mut seed);
        // hand-set distinctive weights
        for (name, values) in [
            ("layers.0.row_attn.q.weight", vec![0.3, -0.7, 1.1, 0.2]),
            ("layers.0.row_attn.k.weight", vec![-0.4, 0.9, 0.5, -0.1]),
            ("layers.0.row_attn.v.weight", vec![0.8, 0.1, -0.6, 0.4]),
            ("layers.0.row_attn.out.weight", vec![1.2, -0.3, 0.25, 0.75]),
            ("layers.0.row_attn.q.bias", vec![0.05, -0.02]),
            ("layers.0.row_attn.k.bias", vec![-0.03, 0.08]),
            ("layers.0.row_attn.v.bias", vec![0.01, 0.02]),
            ("layers.0.row_attn.out.bias", vec![-0.04, 0.06]),
        ] {
            weights.get_mut(name).unwrap().data = values;
        }
        {
            let rel = weights.get_mut("layers.0.row_attn.rel_bias").unwrap();
            rel.data = (0..rel.data.len()).map(|i| (i as f64 - 4.0) * 0.07).collect();
        }

        let l = 2;
        let d = 2;
        let grid_data = vec![0.9, -0.4, 0.2, 1.3, -0.8, 0.6, 0.15, -0.25];
        let mut graph: Graph<f64> = Graph::new();
        let params = bind(&mut graph, &weights, false);
        let tokens = vec![0u32; l];
        let pad = vec![false; l];
        let input = GridInput {
            batch: 1,
            l,
            tokens: &tokens,
            pad: &pad,
        };
        let consts = pad_consts(&mut graph, &input);
        let grid = graph.leaf(&[1, l, l, d], grid_data.clone(), false).unwrap();
        let got = axial_attention(
            &mut graph,
            &params,
            &cfg,
            "layers.0.row_attn",
            grid,
            Axis::Row,
            &consts,
            false,
            &mut rng(),
        )
        .unwrap();

        let w = |n: &str| weights.get(n).unwrap().data.clone();
        let want = dense_row_attention_ref(
            &grid_data,
            l,
            d,
            &w("layers.0.row_attn.q.weight"),
            &w("layers.0.row_attn.q.bias"),
            &w("layers.0.row_attn.k.weight"),
            &w("layers.0.row_attn.k.bias"),
            &w("layers.0.row_attn.v.weight"),
            &w("layers.0.row_attn.v.bias"),
            &w("layers.0.row_attn.out.weight"),
            &w("layers.0.row_attn.out.bias"),
            &w("layers.0.row_attn.norm.gain"),
            &w("layers.0.row_attn.norm.bias"),
            &w("layers.0.row_attn.rel_bias"),
            cfg.rel_pos_clip,
            cfg.ln_eps,
        );
        for (g, e) in graph.data(got).iter().zip(&want) {
            assert!((g - e).abs() < 1e-6, "attention mismatch: {g} vs {e}");
        }
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        // at l = 1 softmax over one key is exactly 1, so the output is
        // input + out_proj(v(norm(input)))
        let cfg = toy_cfg(4, 1);
        let weights: Weights<f64> = Weights::init(&cfg, &mut StreamRng::from_seed(5));
        let mut graph: Graph<f64> = Graph::new();
        let params = bind(&mut graph, &weights, false);
        let tokens = vec![0u32];
        let pad = vec![false];
        let input = GridInput {
            batch: 1,
            l: 1,
            tokens: &tokens,
            pad: &pad,
        };
        let consts = pad_consts(&mut graph, &input);
        let x_data = vec![0.3, -0.9, 0.5, 0.1];
        let x = graph.leaf(&[1, 1, 1, 4], x_data.clone(), false).unwrap();
        let got = axial_attention(
            &mut graph,
            &params,
            &cfg,
            "layers.0.row_attn",
            x,
            Axis::Row,
            &consts,
            false,
            &mut rng(),
        )
        .unwrap();
        // manual: out = x + Wo^T(v) + bo where v = Wv^T(norm(x)) + bv
        let d = 4;
        let w = |n: &str| weights.get(&format!("layers.0.row_attn.{n}")).unwrap().data.clone();
        let mean = x_data.iter().sum::<f64>() / d as f64;
        let var = x_data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + cfg.ln_eps).sqrt();
        let gain = w("norm.gain");
        let bias = w("norm.bias");
        let normed: Vec<f64> = (0..d).map(|c| (x_data[c] - mean) * inv * gain[c] + bias[c]).collect();
        let (wv, bv, wo, bo) = (w("v.weight"), w("v.bias"), w("out.weight"), w("out.bias"));
        let v: Vec<f64> = (0..d)
            .map(|o| (0..d).map(|i| normed[i] * wv[i * d + o]).sum::<f64>() + bv[o])
            .collect();
        let proj: Vec<f64> = (0..d)
            .map(|o| (0..d).map(|i| v[i] * wo[i * d + o]).sum::<f64>() + bo[o])
            .collect();
        for c in 0..d {
            let want = x_data[c] + proj[c];
            let gv = graph.data(got)[c];
            assert!((gv - want).abs() < 1e-9, "{gv} vs {want}");
        }
    }

    #[test]
    fn row_attention_is_row_local() {
        let cfg = toy_cfg(8, 1);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(6));
        let l = 5;
        let d = 8;
        let mut base = vec![0.0f32; l * l * d];
        for (i, v) in base.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 997) as f32 / 997.0 - 0.5;
        }
        let run = |grid_data: Vec<f32>, axis: Axis| -> Vec<f32> {
            let mut graph: Graph<f32> = Graph::new();
            let params = bind(&mut graph, &weights, false);
            let tokens = vec![0u32; l];
            let pad = vec![false; l];
            let input = GridInput {
                batch: 1,
                l,
                tokens: &tokens,
                pad: &pad,
            };
            let consts = pad_consts(&mut graph, &input);
            let x = graph.leaf(&[1, l, l, d], grid_data, false).unwrap();
            let out = axial_attention(
                &mut graph,
                &params,
                &cfg,
                "layers.0.row_attn",
                x,
                axis,
                &consts,
                false,
                &mut rng(),
            )
            .unwrap();
            graph.data(out).to_vec()
        };
        let out_base = run(base.clone(), Axis::Row);
        // perturb row 3; rows != 3 must be unchanged
        let mut perturbed = base.clone();
        for j in 0..l {
            for c in 0..d {
                perturbed[(3 * l + j) * d + c] += 1.5;
            }
        }
        let out_pert = run(perturbed.clone(), Axis::Row);
        for i in 0..l {
            for j in 0..l {
                for c in 0..d {
                    let idx = (i * l + j) * d + c;
                    if i != 3 {
                        assert_eq!(out_base[idx], out_pert[idx], "row {i} leaked");
                    }
                }
            }
        }
        // column attention: perturb column 2, other columns unchanged
        let out_base = run(base.clone(), Axis::Column);
        let mut perturbed = base;
        for i in 0..l {
            for c in 0..d {
                perturbed[(i * l + 2) * d + c] -= 0.7;
            }
        }
        let out_pert = run(perturbed, Axis::Column);
        for i in 0..l {
            for j in 0..l {
                for c in 0..d {
                    let idx = (i * l + j) * d + c;
                    if j != 2 {
                        assert_eq!(out_base[idx], out_pert[idx], "column {j} leaked");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_block_zero_weights_is_identity() {
        let cfg = toy_cfg(4, 1);
        let mut weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(8));
        for name in ["layers.0.conv1.weight", "layers.0.conv2.weight"] {
            let t = weights.get_mut(name).unwrap();
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let l = 4;
        let d = 4;
        let grid_data: Vec<f32> = (0..l * l * d).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut graph: Graph<f32> = Graph::new();
        let params = bind(&mut graph, &weights, false);
        let tokens = vec![0u32; l];
        let pad = vec![false; l];
        let input = GridInput {
            batch: 1,
            l,
            tokens: &tokens,
            pad: &pad,
        };
        let consts = pad_consts(&mut graph, &input);
        let x = graph.leaf(&[1, l, l, d], grid_data.clone(), false).unwrap();
        let out = conv_block(&mut graph, &params, &cfg, 0, x, &consts, false, &mut rng()).unwrap();
        assert_eq!(graph.data(out), grid_data.as_slice());
    }

    #[test]
    fn conv_block_receptive_field_is_3x3() {
        let cfg = toy_cfg(4, 1);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(9));
        let l = 7;
        let d = 4;
        let mut base = vec![0.0f32; l * l * d];
        for (i, v) in base.iter_mut().enumerate() {
            *v = ((i * 40503) % 131) as f32 / 131.0 - 0.5;
        }
        let run = |grid_data: Vec<f32>| -> Vec<f32> {
            let mut graph: Graph<f32> = Graph::new();
            let params = bind(&mut graph, &weights, false);
            let tokens = vec![0u32; l];
            let pad = vec![false; l];
            let input = GridInput {
                batch: 1,
                l,
                tokens: &tokens,
                pad: &pad,
            };
            let consts = pad_consts(&mut graph, &input);
            let x = graph.leaf(&[1, l, l, d], grid_data, false).unwrap();
            let out = conv_block(&mut graph, &params, &cfg, 0, x, &consts, false, &mut rng()).unwrap();
            graph.data(out).to_vec()
        };
        let out_base = run(base.clone());
        // perturb cell (0, 0); cells at Chebyshev distance >= 2 are unchanged
        let mut perturbed = base;
        for c in 0..d {
            perturbed[c] += 2.0;
        }
        let out_pert = run(perturbed);
        for i in 0..l {
            for j in 0..l {
                let dist = i.max(j); // Chebyshev distance from (0, 0)
                for c in 0..d {
                    let idx = (i * l + j) * d + c;
                    if dist >= 2 {
                        assert_eq!(out_base[idx], out_pert[idx], "cell ({i},{j}) leaked");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_layer_stack_is_identity() {
        let cfg = toy_cfg(8, 0);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(10));
        let mut graph: Graph<f32> = Graph::new();
        let params = bind(&mut graph, &weights, false);
        let tokens = vec![0u32; 3];
        let pad = vec![false; 3];
        let input = GridInput {
            batch: 1,
            l: 3,
            tokens: &tokens,
            pad: &pad,
        };
        let consts = pad_consts(&mut graph, &input);
        let x = graph.leaf(&[1, 3, 3, 8], vec![0.5; 72], false).unwrap();
        let out = forward_once(&mut graph, &params, &cfg, x, &consts, false, &mut rng()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn shapes_preserved_across_lengths() {
        let cfg = toy_cfg(8, 2);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(11));
        for l in [1usize, 7, 32] {
            let seq: String = "ACGU".chars().cycle().take(l).collect();
            let (latent, logits) = run_latent(&weights, &cfg, &seq, 1);
            assert_eq!(latent.len(), l * l * 8);
            assert_eq!(logits.len(), l * l * 2);
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_deterministic_with_dropout_off() {
        let cfg = toy_cfg(8, 2);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(12));
        let a = run_latent(&weights, &cfg, "GGGAAACCC", 2);
        let b = run_latent(&weights, &cfg, "GGGAAACCC", 2);
        assert_eq!(a, b);
    }

    #[test]
    fn recycling_changes_logits() {
        let cfg = toy_cfg(8, 2);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(13));
        let (_, one) = run_latent(&weights, &cfg, "GGGAAACCC", 1);
        let (_, six) = run_latent(&weights, &cfg, "GGGAAACCC", 6);
        assert_ne!(one, six, "recycling must affect the logits");
    }

    #[test]
    fn single_cycle_equals_explicit_zero_recycle() {
        let cfg = toy_cfg(8, 1);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(14));
        let seq = RnaSequence::new("t", "GAAAC").unwrap();
        let tokens = seq.token_ids();
        let pad = vec![false; tokens.len()];
        let input = GridInput::single(&tokens, &pad);
        let a = forward_recycled(&weights, &cfg, &input, 1, false, &mut rng()).unwrap();
        let b = forward_with_recycle(&weights, &cfg, &input, None, false, false, &mut rng()).unwrap();
        assert_eq!(a.graph.data(a.logits), b.graph.data(b.logits));
    }

    #[test]
    fn stop_gradient_matches_constant_substitution() {
        // grads of a 3-cycle forward == grads of a 1-cycle forward fed the
        // recorded 2-cycle latent as a constant
        let cfg = toy_cfg(8, 1);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(15));
        let seq = RnaSequence::new("t", "GGGAAACCC").unwrap();
        let tokens = seq.token_ids();
        let pad = vec![false; tokens.len()];
        let input = GridInput::single(&tokens, &pad);
        let l = tokens.len();

        let grads_of = |mut fwd: RecycledForward<f32>| -> Vec<(String, Vec<f32>)> {
            let logits2 = fwd.graph.reshape(fwd.logits, &[l * l, 2]).unwrap();
            let targets = vec![1u8; l * l];
            let weights_mask = vec![1.0f32; l * l];
            let loss = fwd
                .graph
                .masked_cross_entropy(logits2, &targets, &weights_mask)
                .unwrap();
            fwd.graph.backward(loss).unwrap();
            fwd.params
                .iter()
                .map(|(name, &id)| {
                    (
                        name.clone(),
                        fwd.graph
                            .grad(id)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; fwd.graph.value(id).numel()]),
                    )
                })
                .collect()
        };

        let three = forward_recycled(&weights, &cfg, &input, 3, true, &mut rng()).unwrap();
        let g3 = grads_of(three);

        let two = forward_recycled(&weights, &cfg, &input, 2, false, &mut rng()).unwrap();
        let latent2 = two.graph.data(two.latent).to_vec();
        let one = forward_with_recycle(&weights, &cfg, &input, Some(&latent2), true, true, &mut rng()).unwrap();
        let g1 = grads_of(one);

        assert_eq!(g3.len(), g1.len());
        for ((n3, a), (n1, b)) in g3.iter().zip(&g1) {
            assert_eq!(n3, n1);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6, "{n3}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn zeroed_blocks_reduce_to_embedding_broadcast() {
        // zero every non-norm, non-embedding weight: the stack must act as
        // the identity on the embedded grid
        let cfg = toy_cfg(8, 2);
        let mut weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(16));
        for t in weights.tensors_mut() {
            let keep = t.name.starts_with("embed_") || t.name.contains("norm");
            if !keep {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let with_blocks = run_latent(&weights, &cfg, "GACGU", 1).0;
        let cfg0 = toy_cfg(8, 0);
        let weights0 = {
            // same embeddings, no layers
            let mut w0: Weights<f32> = Weights::init(&cfg0, &mut StreamRng::from_seed(16));
            for name in ["embed_row.weight", "embed_col.weight"] {
                w0.get_mut(name).unwrap().data = weights.get(name).unwrap().data.clone();
            }
            w0
        };
        let plain = run_latent(&weights0, &cfg0, "GACGU", 1).0;
        for (a, b) in with_blocks.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_input_does_not_merely_permute_output() {
        // relative position encodings break permutation equivariance:
        // swapping two tokens must not just swap the corresponding logits
        let cfg = toy_cfg(8, 1);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(17));
        let (_, base) = run_latent(&weights, &cfg, "GACA", 1);
        let (_, swapped) = run_latent(&weights, &cfg, "AGCA", 1); // swap positions 0 and 1
        let l = 4;
        // build the permuted version of `base` under the position swap 0<->1
        let perm = [1usize, 0, 2, 3];
        let mut permuted = vec![0.0f32; base.len()];
        for i in 0..l {
            for j in 0..l {
                for c in 0..2 {
                    permuted[(i * l + j) * 2 + c] = base[(perm[i] * l + perm[j]) * 2 + c];
                }
            }
        }
        assert_ne!(swapped, permuted, "outputs permuted exactly; equivariance unexpectedly holds");
    }

    #[test]
    fn padding_is_neutral_for_real_cells() {
        // a sequence forwarded alone must produce the same real-cell logits
        // as the same sequence padded inside a batch
        let cfg = toy_cfg(8, 2);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(18));
        let seq = RnaSequence::new("t", "GGGAAACCC").unwrap();
        let tokens = seq.token_ids();
        let l_real = tokens.len();
        let pad = vec![false; l_real];
        let input = GridInput::single(&tokens, &pad);
        let alone = forward_recycled(&weights, &cfg, &input, 2, false, &mut rng()).unwrap();
        let alone_logits = alone.graph.data(alone.logits).to_vec();

        // same sequence padded to length 14 in a batch of 2 (second sample junk)
        let l_pad = 14;
        let mut tokens_b = vec![0u32; 2 * l_pad];
        let mut pad_b = vec![true; 2 * l_pad];
        for (i, &t) in tokens.iter().enumerate() {
            tokens_b[i] = t;
            pad_b[i] = false;
        }
        for i in 0..7 {
            tokens_b[l_pad + i] = (i % 4) as u32;
            pad_b[l_pad + i] = false;
        }
        let input_b = GridInput {
            batch: 2,
            l: l_pad,
            tokens: &tokens_b,
            pad: &pad_b,
        };
        let batched = forward_recycled(&weights, &cfg, &input_b, 2, false, &mut rng()).unwrap();
        let batched_logits = batched.graph.data(batched.logits);
        for i in 0..l_real {
            for j in 0..l_real {
                for c in 0..2 {
                    let a = alone_logits[(i * l_real + j) * 2 + c];
                    let b = batched_logits[(i * l_pad + j) * 2 + c];
                    assert_eq!(a, b, "padding leaked into cell ({i},{j},{c})");
                }
            }
        }
    }

    #[test]
    fn rejects_overlong_and_bad_inputs() {
        let cfg = toy_cfg(8, 1);
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(19));
        let tokens = vec![0u32; 65];
        let pad = vec![false; 65];
        let input = GridInput::single(&tokens, &pad);
        assert!(matches!(
            forward_recycled(&weights, &cfg, &input, 1, false, &mut rng()),
            Err(ModelError::InputTooLong { len: 65, max_len: 64 })
        ));
        let tokens = vec![9u32; 4];
        let pad = vec![false; 4];
        let input = GridInput::single(&tokens, &pad);
        assert!(matches!(
            forward_recycled(&weights, &cfg, &input, 1, false, &mut rng()),
            Err(ModelError::UnknownToken { .. })
        ));
        let tokens = vec![0u32; 4];
        let input = GridInput::single(&tokens, &pad);
        assert!(matches!(
            forward_recycled(&weights, &cfg, &input, 0, false, &mut rng()),
            Err(ModelError::Config { .. })
        ));
    }
}
