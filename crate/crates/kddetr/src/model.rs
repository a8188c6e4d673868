//! Miniature set-prediction detector: patch embedding, a pre-norm
//! transformer encoder over image tokens, a pre-norm decoder over an
//! arbitrary query stack, and classification plus box heads.
//!
//! The decoder accepts any `[M, D]` query tensor, not just the model's own
//! learned queries. That is the hook the distillation machinery relies on:
//! teacher and student share one query tensor, so their outputs are
//! positionally comparable row by row.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BoxCxCyWH;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Param, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn teacher() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            hidden_dim: 64,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            num_queries: 10,
            num_classes: 3,
        }
    }

    pub fn student() -> Self {
        ModelConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 64,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by 4 for the 2-D positional table",
                self.hidden_dim
            )));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Token count HW after patchification.
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

struct LayerNormParams {
    g: Param,
    b: Param,
}

struct AttnParams {
    wq: Vec<Param>,
    wk: Vec<Param>,
    wv: Vec<Param>,
    wo: Vec<Param>,
}

struct FfnParams {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

struct EncoderLayer {
    ln1: LayerNormParams,
    attn: AttnParams,
    ln2: LayerNormParams,
    ffn: FfnParams,
}

struct DecoderLayer {
    ln1: LayerNormParams,
    self_attn: AttnParams,
    ln2: LayerNormParams,
    cross_attn: AttnParams,
    ln3: LayerNormParams,
    ffn: FfnParams,
}

/// One forward pass's outputs, still attached to the tape that produced
/// them. `cross_attention` holds detached per-layer `[M, HW]` weight tables
/// (averaged over heads) when requested.
pub struct DetrOutputs {
    pub class_logits: Var,
    pub boxes: Var,
    pub cross_attention: Option<Vec<Tensor>>,
}

impl DetrOutputs {
    pub fn boxes_list(&self, tape: &Tape) -> Vec<BoxCxCyWH> {
        let t = tape.tensor_of(self.boxes);
        (0..t.rows())
            .map(|i| BoxCxCyWH::from_slice(t.row(i)))
            .collect()
    }
}

pub struct DetrModel {
    pub cfg: ModelConfig,
    patch_w: Param,
    patch_b: Param,
    pos: Tensor,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    queries: Param,
    class_w: Param,
    class_b: Param,
    box_w1: Param,
    box_b1: Param,
    box_w2: Param,
    box_b2: Param,
    box_w3: Param,
    box_b3: Param,
}

/// 2-D sinusoidal table `[HW, D]`: the first D/2 lanes encode the patch
/// column, the rest the row, each as interleaved sin/cos at geometric
/// frequencies.
fn positional_table(grid: usize, d: usize) -> Tensor {
    let half = d / 2;
    let pairs = half / 2;
    let mut values = vec![0.0; grid * grid * d];
    for gy in 0..grid {
        for gx in 0..grid {
            let base = (gy * grid + gx) * d;
            for i in 0..pairs {
                let omega = 10000f64.powf(-(i as f64) / pairs as f64);
                values[base + 2 * i] = (gx as f64 * omega).sin();
                values[base + 2 * i + 1] = (gx as f64 * omega).cos();
                values[base + half + 2 * i] = (gy as f64 * omega).sin();
                values[base + half + 2 * i + 1] = (gy as f64 * omega).cos();
            }
        }
    }
    Tensor::new(vec![grid * grid, d], values).expect("table shape")
}

fn uniform_param(name: String, shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Param {
    let s = (1.0 / fan_in as f64).sqrt();
    Param::new(name, Tensor::uniform(shape, -s, s, rng))
}

fn layer_norm_params(prefix: &str, d: usize) -> LayerNormParams {
    LayerNormParams {
        g: Param::new(format!("{prefix}.g"), Tensor::full(vec![d], 1.0)),
        b: Param::new(format!("{prefix}.b"), Tensor::zeros(vec![d])),
    }
}

fn attn_params(prefix: &str, d: usize, heads: usize, rng: &mut Rng) -> AttnParams {
    let dh = d / heads;
    let mut p = AttnParams {
        wq: Vec::new(),
        wk: Vec::new(),
        wv: Vec::new(),
        wo: Vec::new(),
    };
    for h in 0..heads {
        p.wq.push(uniform_param(format!("{prefix}.h{h}.wq"), vec![d, dh], d, rng));
        p.wk.push(uniform_param(format!("{prefix}.h{h}.wk"), vec![d, dh], d, rng));
        p.wv.push(uniform_param(format!("{prefix}.h{h}.wv"), vec![d, dh], d, rng));
        p.wo.push(uniform_param(format!("{prefix}.h{h}.wo"), vec![dh, d], dh, rng));
    }
    p
}

fn ffn_params(prefix: &str, d: usize, ffn: usize, rng: &mut Rng) -> FfnParams {
    FfnParams {
        w1: uniform_param(format!("{prefix}.w1"), vec![d, ffn], d, rng),
        b1: Param::new(format!("{prefix}.b1"), Tensor::zeros(vec![ffn])),
        w2: uniform_param(format!("{prefix}.w2"), vec![ffn, d], ffn, rng),
        b2: Param::new(format!("{prefix}.b2"), Tensor::zeros(vec![d])),
    }
}

impl DetrModel {
    /// Fresh model; weights are drawn from one seeded stream in the fixed
    /// construction order, so a (config, seed) pair pins every initial value.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seeded(derive_seed(seed, 0x6d6f64656c)); // "model"
        let d = cfg.hidden_dim;
        let grid = cfg.image_size / cfg.patch_size;

        let patch_w = uniform_param("patch.w".into(), vec![cfg.patch_dim(), d], cfg.patch_dim(), &mut rng);
        let patch_b = Param::new("patch.b", Tensor::zeros(vec![d]));

        let mut enc = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            enc.push(EncoderLayer {
                ln1: layer_norm_params(&format!("enc{i}.ln1"), d),
                attn: attn_params(&format!("enc{i}.attn"), d, cfg.num_heads, &mut rng),
                ln2: layer_norm_params(&format!("enc{i}.ln2"), d),
                ffn: ffn_params(&format!("enc{i}.ffn"), d, cfg.ffn_dim, &mut rng),
            });
        }

        let mut dec = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            dec.push(DecoderLayer {
                ln1: layer_norm_params(&format!("dec{i}.ln1"), d),
                self_attn: attn_params(&format!("dec{i}.self"), d, cfg.num_heads, &mut rng),
                ln2: layer_norm_params(&format!("dec{i}.ln2"), d),
                cross_attn: attn_params(&format!("dec{i}.cross"), d, cfg.num_heads, &mut rng),
                ln3: layer_norm_params(&format!("dec{i}.ln3"), d),
                ffn: ffn_params(&format!("dec{i}.ffn"), d, cfg.ffn_dim, &mut rng),
            });
        }

        // Learned queries start uniform on the unit cube, the same region
        // general distillation points are sampled from, so both query kinds
        // probe comparable decoder inputs.
        let queries = Param::new(
            "queries",
            Tensor::uniform(vec![cfg.num_queries, d], 0.0, 1.0, &mut rng),
        );

        let k1 = cfg.num_classes + 1;
        let class_w = uniform_param("class.w".into(), vec![d, k1], d, &mut rng);
        let class_b = Param::new("class.b", Tensor::zeros(vec![k1]));
        let box_w1 = uniform_param("box.w1".into(), vec![d, d], d, &mut rng);
        let box_b1 = Param::new("box.b1", Tensor::zeros(vec![d]));
        let box_w2 = uniform_param("box.w2".into(), vec![d, d], d, &mut rng);
        let box_b2 = Param::new("box.b2", Tensor::zeros(vec![d]));
        let box_w3 = uniform_param("box.w3".into(), vec![d, 4], d, &mut rng);
        let box_b3 = Param::new("box.b3", Tensor::zeros(vec![4]));

        Ok(DetrModel {
            cfg,
            patch_w,
            patch_b,
            pos: positional_table(grid, d),
            enc,
            dec,
            queries,
            class_w,
            class_b,
            box_w1,
            box_b1,
            box_w2,
            box_b2,
            box_w3,
            box_b3,
        })
    }

    /// All trainable parameters in a fixed traversal order.
    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![self.patch_w.clone(), self.patch_b.clone()];
        for l in &self.enc {
            out.extend([l.ln1.g.clone(), l.ln1.b.clone()]);
            for h in 0..self.cfg.num_heads {
                out.extend([
                    l.attn.wq[h].clone(),
                    l.attn.wk[h].clone(),
                    l.attn.wv[h].clone(),
                    l.attn.wo[h].clone(),
                ]);
            }
            out.extend([l.ln2.g.clone(), l.ln2.b.clone()]);
            out.extend([
                l.ffn.w1.clone(),
                l.ffn.b1.clone(),
                l.ffn.w2.clone(),
                l.ffn.b2.clone(),
            ]);
        }
        for l in &self.dec {
            out.extend([l.ln1.g.clone(), l.ln1.b.clone()]);
            for h in 0..self.cfg.num_heads {
                out.extend([
                    l.self_attn.wq[h].clone(),
                    l.self_attn.wk[h].clone(),
                    l.self_attn.wv[h].clone(),
                    l.self_attn.wo[h].clone(),
                ]);
            }
            out.extend([l.ln2.g.clone(), l.ln2.b.clone()]);
            for h in 0..self.cfg.num_heads {
                out.extend([
                    l.cross_attn.wq[h].clone(),
                    l.cross_attn.wk[h].clone(),
                    l.cross_attn.wv[h].clone(),
                    l.cross_attn.wo[h].clone(),
                ]);
            }
            out.extend([l.ln3.g.clone(), l.ln3.b.clone()]);
            out.extend([
                l.ffn.w1.clone(),
                l.ffn.b1.clone(),
                l.ffn.w2.clone(),
                l.ffn.b2.clone(),
            ]);
        }
        out.push(self.queries.clone());
        out.extend([
            self.class_w.clone(),
            self.class_b.clone(),
            self.box_w1.clone(),
            self.box_b1.clone(),
            self.box_w2.clone(),
            self.box_b2.clone(),
            self.box_w3.clone(),
            self.box_b3.clone(),
        ]);
        out
    }

    /// Name → parameter map for checkpoints; names are unique.
    pub fn named_params(&self) -> BTreeMap<String, Param> {
        self.params()
            .into_iter()
            .map(|p| (p.name().to_string(), p))
            .collect()
    }

    /// The model's learned query embeddings, detached.
    pub fn query_snapshot(&self) -> Tensor {
        self.queries.snapshot()
    }

    fn layer_norm(&self, tape: &Tape, x: Var, ln: &LayerNormParams) -> Result<Var> {
        tape.layer_norm(x, tape.param(&ln.g), tape.param(&ln.b))
    }

    fn attention(
        &self,
        tape: &Tape,
        q_in: Var,
        kv_in: Var,
        p: &AttnParams,
        want_weights: bool,
    ) -> Result<(Var, Option<Tensor>)> {
        let heads = self.cfg.num_heads;
        let dh = self.cfg.hidden_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out: Option<Var> = None;
        let mut weights: Option<Vec<f64>> = None;
        let mut wshape = Vec::new();
        for h in 0..heads {
            let q = tape.matmul(q_in, tape.param(&p.wq[h]))?;
            let k = tape.matmul(kv_in, tape.param(&p.wk[h]))?;
            let v = tape.matmul(kv_in, tape.param(&p.wv[h]))?;
            let scores = tape.affine(tape.matmul(q, tape.transpose(k)?)?, scale, 0.0);
            let w = tape.softmax(scores, 1.0)?;
            if want_weights {
                let wt = tape.values_of(w);
                match &mut weights {
                    None => {
                        wshape = tape.shape_of(w);
                        weights = Some(wt.iter().map(|v| v / heads as f64).collect());
                    }
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&wt) {
                            *a += v / heads as f64;
                        }
                    }
                }
            }
            let ctx = tape.matmul(w, v)?;
            let o = tape.matmul(ctx, tape.param(&p.wo[h]))?;
            out = Some(match out {
                None => o,
                Some(acc) => tape.add(acc, o)?,
            });
        }
        let weights = weights
            .map(|w| Tensor::new(wshape, w))
            .transpose()?;
        Ok((out.expect("at least one head"), weights))
    }

    fn ffn(&self, tape: &Tape, x: Var, p: &FfnParams) -> Result<Var> {
        let h = tape.add(tape.matmul(x, tape.param(&p.w1))?, tape.param(&p.b1))?;
        let h = tape.relu(h);
        tape.add(tape.matmul(h, tape.param(&p.w2))?, tape.param(&p.b2))
    }

    /// Patch tokens through the encoder stack; `[HW, D]` output. With zero
    /// encoder layers this is exactly the embedded patches plus positions.
    pub fn encode(&self, tape: &Tape, image: &[f64]) -> Result<Var> {
        let s = self.cfg.image_size;
        if image.len() != s * s * 3 {
            return Err(Error::Config(format!(
                "image has {} values, config wants {}",
                image.len(),
                s * s * 3
            )));
        }
        let p = self.cfg.patch_size;
        let grid = s / p;
        let pd = self.cfg.patch_dim();
        let mut patches = Vec::with_capacity(grid * grid * pd);
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..p {
                    for px in 0..p {
                        let pix = ((gy * p + py) * s + (gx * p + px)) * 3;
                        patches.extend_from_slice(&image[pix..pix + 3]);
                    }
                }
            }
        }
        let tokens = tape.constant(Tensor::new(vec![grid * grid, pd], patches)?);
        let embedded = tape.add(
            tape.matmul(tokens, tape.param(&self.patch_w))?,
            tape.param(&self.patch_b),
        )?;
        let mut x = tape.add(embedded, tape.constant(self.pos.clone()))?;

        for l in &self.enc {
            let normed = self.layer_norm(tape, x, &l.ln1)?;
            let (attn, _) = self.attention(tape, normed, normed, &l.attn, false)?;
            x = tape.add(x, attn)?;
            let normed = self.layer_norm(tape, x, &l.ln2)?;
            x = tape.add(x, self.ffn(tape, normed, &l.ffn)?)?;
        }
        Ok(x)
    }

    /// Runs the decoder over an arbitrary `[M, D]` query stack and applies
    /// the heads. Output rows follow input query order.
    pub fn decode(
        &self,
        tape: &Tape,
        features: Var,
        queries: Var,
        want_attention: bool,
    ) -> Result<DetrOutputs> {
        let qshape = tape.shape_of(queries);
        if qshape.len() != 2 || qshape[1] != self.cfg.hidden_dim {
            return Err(Error::Contract(format!(
                "queries shaped {qshape:?} do not match hidden dimension {}",
                self.cfg.hidden_dim
            )));
        }
        let mut x = queries;
        let mut attn_export = want_attention.then(Vec::new);
        for l in &self.dec {
            let normed = self.layer_norm(tape, x, &l.ln1)?;
            let (attn, _) = self.attention(tape, normed, normed, &l.self_attn, false)?;
            x = tape.add(x, attn)?;
            let normed = self.layer_norm(tape, x, &l.ln2)?;
            let (attn, weights) =
                self.attention(tape, normed, features, &l.cross_attn, want_attention)?;
            if let (Some(out), Some(w)) = (&mut attn_export, weights) {
                out.push(w);
            }
            x = tape.add(x, attn)?;
            let normed = self.layer_norm(tape, x, &l.ln3)?;
            x = tape.add(x, self.ffn(tape, normed, &l.ffn)?)?;
        }

        let class_logits = tape.add(
            tape.matmul(x, tape.param(&self.class_w))?,
            tape.param(&self.class_b),
        )?;
        let h = tape.relu(tape.add(
            tape.matmul(x, tape.param(&self.box_w1))?,
            tape.param(&self.box_b1),
        )?);
        let h = tape.relu(tape.add(
            tape.matmul(h, tape.param(&self.box_w2))?,
            tape.param(&self.box_b2),
        )?);
        let boxes = tape.sigmoid(tape.add(
            tape.matmul(h, tape.param(&self.box_w3))?,
            tape.param(&self.box_b3),
        )?);

        Ok(DetrOutputs {
            class_logits,
            boxes,
            cross_attention: attn_export,
        })
    }

    /// Full pass. `queries: None` is detection mode (the model's own learned
    /// queries); `Some(v)` decodes the supplied tape variable instead, so a
    /// constant-bound tensor receives no gradient and no update.
    pub fn forward(
        &self,
        tape: &Tape,
        image: &[f64],
        queries: Option<Var>,
        want_attention: bool,
    ) -> Result<DetrOutputs> {
        let features = self.encode(tape, image)?;
        let q = match queries {
            Some(v) => v,
            None => tape.param(&self.queries),
        };
        self.decode(tape, features, q, want_attention)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fdcheck;

    fn mini_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            hidden_dim: 8,
            num_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 16,
            num_queries: 3,
            num_classes: 2,
        }
    }

    fn noise_image(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        let mut rng = Rng::seeded(seed);
        (0..cfg.image_size * cfg.image_size * 3)
            .map(|_| rng.uniform(0.0, 1.0))
            .collect()
    }

    #[test]
    fn default_configs_validate() {
        assert!(ModelConfig::teacher().validate().is_ok());
        assert!(ModelConfig::student().validate().is_ok());
        assert_eq!(ModelConfig::teacher().tokens(), 64);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = ModelConfig::teacher();
        c.patch_size = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::teacher();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = ModelConfig::teacher();
        let model = DetrModel::init(cfg, 1).unwrap();
        let image = noise_image(&cfg, 3);
        let tape = Tape::new();
        let f = model.encode(&tape, &image).unwrap();
        assert_eq!(tape.shape_of(f), vec![64, 64]);

        let tape2 = Tape::new();
        let f2 = model.encode(&tape2, &image).unwrap();
        let (a, b) = (tape.values_of(f), tape2.values_of(f2));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_encoder_layers_is_patches_plus_positions() {
        let mut cfg = mini_cfg();
        cfg.encoder_layers = 0;
        let model = DetrModel::init(cfg, 2).unwrap();
        let image = noise_image(&cfg, 4);
        let tape = Tape::new();
        let f = model.encode(&tape, &image).unwrap();

        // Reproduce by hand: patchify, project, add position table.
        let p = cfg.patch_size;
        let grid = cfg.image_size / p;
        let mut patches = Vec::new();
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..p {
                    for px in 0..p {
                        let pix = ((gy * p + py) * cfg.image_size + (gx * p + px)) * 3;
                        patches.extend_from_slice(&image[pix..pix + 3]);
                    }
                }
            }
        }
        let t2 = Tape::new();
        let tok = t2
            .constant(Tensor::new(vec![cfg.tokens(), cfg.patch_dim()], patches).unwrap());
        let w = t2.param(&model.patch_w);
        let b = t2.param(&model.patch_b);
        let proj = t2.add(t2.matmul(tok, w).unwrap(), b).unwrap();
        let want = t2
            .add(proj, t2.constant(positional_table(grid, cfg.hidden_dim)))
            .unwrap();
        assert_eq!(tape.values_of(f), t2.values_of(want));
    }

    #[test]
    fn wrong_image_size_is_a_config_error() {
        let model = DetrModel::init(mini_cfg(), 1).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            model.encode(&tape, &[0.0; 7]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decode_output_shapes_follow_query_count() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 5).unwrap();
        let image = noise_image(&cfg, 6);
        let tape = Tape::new();
        let f = model.encode(&tape, &image).unwrap();
        for m in [1usize, 4, 9] {
            let q = tape.constant(Tensor::full(vec![m, cfg.hidden_dim], 0.3));
            let out = model.decode(&tape, f, q, false).unwrap();
            assert_eq!(tape.shape_of(out.class_logits), vec![m, cfg.num_classes + 1]);
            assert_eq!(tape.shape_of(out.boxes), vec![m, 4]);
        }
    }

    #[test]
    fn decode_rejects_width_mismatch() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 5).unwrap();
        let tape = Tape::new();
        let f = model.encode(&tape, &noise_image(&cfg, 6)).unwrap();
        let q = tape.constant(Tensor::full(vec![2, cfg.hidden_dim + 1], 0.0));
        assert!(matches!(
            model.decode(&tape, f, q, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn boxes_are_strictly_inside_unit_interval() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 7).unwrap();
        let tape = Tape::new();
        let out = model
            .forward(&tape, &noise_image(&cfg, 8), None, false)
            .unwrap();
        for v in tape.values_of(out.boxes) {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn decoder_is_permutation_equivariant() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 9).unwrap();
        let image = noise_image(&cfg, 10);
        let mut rng = Rng::seeded(11);
        let q = Tensor::uniform(vec![5, cfg.hidden_dim], 0.0, 1.0, &mut rng);

        let tape = Tape::new();
        let f = model.encode(&tape, &image).unwrap();
        let out = model
            .decode(&tape, f, tape.constant(q.clone()), false)
            .unwrap();
        let base_logits = tape.values_of(out.class_logits);
        let base_boxes = tape.values_of(out.boxes);

        let perm = [3usize, 0, 4, 1, 2];
        let mut pq = Vec::new();
        for &i in &perm {
            pq.extend_from_slice(q.row(i));
        }
        let tape2 = Tape::new();
        let f2 = model.encode(&tape2, &image).unwrap();
        let out2 = model
            .decode(
                &tape2,
                f2,
                tape2.constant(Tensor::new(vec![5, cfg.hidden_dim], pq).unwrap()),
                false,
            )
            .unwrap();
        let perm_logits = tape2.values_of(out2.class_logits);
        let perm_boxes = tape2.values_of(out2.boxes);

        let k1 = cfg.num_classes + 1;
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..k1 {
                let a = base_logits[old_row * k1 + c];
                let b = perm_logits[new_row * k1 + c];
                assert!((a - b).abs() < 1e-9, "logit drift {a} vs {b}");
            }
            for c in 0..4 {
                let a = base_boxes[old_row * 4 + c];
                let b = perm_boxes[new_row * 4 + c];
                assert!((a - b).abs() < 1e-9, "box drift {a} vs {b}");
            }
        }
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 12).unwrap();
        let tape = Tape::new();
        let out = model
            .forward(&tape, &noise_image(&cfg, 13), None, true)
            .unwrap();
        let layers = out.cross_attention.unwrap();
        assert_eq!(layers.len(), cfg.decoder_layers);
        for w in layers {
            assert_eq!(w.shape(), &[cfg.num_queries, cfg.tokens()]);
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            }
        }
    }

    #[test]
    fn explicit_own_queries_match_detection_mode() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 14).unwrap();
        let image = noise_image(&cfg, 15);

        let tape = Tape::new();
        let det = model.forward(&tape, &image, None, false).unwrap();
        let tape2 = Tape::new();
        let q = tape2.constant(model.query_snapshot());
        let sup = model.forward(&tape2, &image, Some(q), false).unwrap();

        assert_eq!(
            tape.values_of(det.class_logits),
            tape2.values_of(sup.class_logits)
        );
        assert_eq!(tape.values_of(det.boxes), tape2.values_of(sup.boxes));
    }

    #[test]
    fn supplied_queries_receive_no_gradient() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 16).unwrap();
        let tape = Tape::new();
        let q = tape.constant(Tensor::full(vec![2, cfg.hidden_dim], 0.4));
        let out = model
            .forward(&tape, &noise_image(&cfg, 17), Some(q), false)
            .unwrap();
        let loss = tape.add(tape.sum(out.class_logits), tape.sum(out.boxes)).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad_of(q).is_none());
        // Every bound parameter gets a gradient; the model's own query
        // embeddings were bypassed, so they get none.
        for p in model.params() {
            if p.name() == "queries" {
                assert!(p.borrow().grad.is_none());
            } else {
                assert!(p.borrow().grad.is_some(), "{:?} missing grad", p.name());
            }
        }
    }

    #[test]
    fn same_seed_reinitializes_identically() {
        let cfg = mini_cfg();
        let a = DetrModel::init(cfg, 21).unwrap();
        let b = DetrModel::init(cfg, 21).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.name(), pb.name());
            assert_eq!(pa.borrow().values(), pb.borrow().values());
        }
        let c = DetrModel::init(cfg, 22).unwrap();
        assert_ne!(
            a.params()[0].borrow().values(),
            c.params()[0].borrow().values()
        );
    }

    #[test]
    fn named_params_are_unique_and_complete() {
        let model = DetrModel::init(ModelConfig::teacher(), 1).unwrap();
        let flat = model.params();
        let named = model.named_params();
        assert_eq!(flat.len(), named.len(), "duplicate parameter names");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = mini_cfg();
        let model = DetrModel::init(cfg, 33).unwrap();
        let image = noise_image(&cfg, 34);
        let params = model.params();
        let worst = fdcheck::check_params(&params, |tape| {
            let out = model.forward(tape, &image, None, false)?;
            tape.add(tape.sum(out.class_logits), tape.sum(out.boxes))
        })
        .unwrap();
        assert!(worst < 1e-3, "worst rel err {worst}");
    }
}
