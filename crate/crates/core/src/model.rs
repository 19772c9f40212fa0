//! Transformer backbone: a ViT-style patch path for images and a causal
//! token path for next-character prediction.
//!
//! Every parameter has a stable dotted name. The per-block query/key/value
//! projections form the attention set (the personalized part); everything
//! else, biases included, is the shared set.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::AttentionTrace;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{GradMap, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ImageClassification,
    NextToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClassToken,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub task: Task,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    /// Image task only.
    pub patch_size: usize,
    pub image_extent: usize,
    pub channels: usize,
    /// Next-token task only.
    pub seq_len: usize,
    /// Class count, or vocabulary size for the next-token task.
    pub num_classes: usize,
    pub pooling: Pooling,
    /// Also treat each block's attention output projection as personalized.
    pub personalize_out_proj: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small model used for experiments that run on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            task: Task::ImageClassification,
            num_blocks: 2,
            num_heads: 4,
            d_model: 32,
            mlp_hidden: 64,
            patch_size: 4,
            image_extent: 16,
            channels: 3,
            seq_len: 32,
            num_classes: 10,
            pooling: Pooling::ClassToken,
            personalize_out_proj: false,
        }
    }

    /// 8 blocks, 8 heads, width 128, patch 4 on 32×32 RGB.
    pub fn paper() -> Self {
        ModelConfig {
            num_blocks: 8,
            num_heads: 8,
            d_model: 128,
            mlp_hidden: 512,
            image_extent: 32,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        match self.task {
            Task::ImageClassification => {
                if self.patch_size == 0 || self.channels == 0 || self.image_extent == 0 {
                    return fail("patch_size, channels and image_extent must be positive".into());
                }
                if self.image_extent % self.patch_size != 0 {
                    return fail(format!(
                        "image_extent {} not divisible by patch_size {}",
                        self.image_extent, self.patch_size
                    ));
                }
            }
            Task::NextToken => {
                if self.seq_len == 0 {
                    return fail("seq_len must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_extent / self.patch_size;
        side * side
    }

    pub fn uses_class_token(&self) -> bool {
        self.task == Task::ImageClassification && self.pooling == Pooling::ClassToken
    }

    /// Sequence length seen by the attention layers.
    pub fn num_tokens(&self) -> usize {
        match self.task {
            Task::ImageClassification => self.num_patches() + usize::from(self.uses_class_token()),
            Task::NextToken => self.seq_len,
        }
    }

    /// Projection roles per block that are personalized.
    pub fn attention_roles(&self) -> &'static [&'static str] {
        if self.personalize_out_proj {
            &["wq", "wk", "wv", "wo"]
        } else {
            &["wq", "wk", "wv"]
        }
    }

    /// Names of the personalized matrices, block-major, roles in Q, K, V(, O) order.
    pub fn attention_keys(&self) -> Vec<String> {
        (0..self.num_blocks)
            .flat_map(|b| {
                self.attention_roles()
                    .iter()
                    .map(move |r| format!("blocks.{b}.attn.{r}"))
            })
            .collect()
    }

    /// Scalars in the attention set.
    pub fn attention_size(&self) -> usize {
        self.num_blocks * self.attention_roles().len() * self.d_model * self.d_model
    }

    /// Names of the final classifier layer.
    pub fn head_keys(&self) -> Vec<String> {
        vec!["head.bias".into(), "head.weight".into()]
    }

    /// Every parameter with its shape and init std, in init order.
    /// An std of `None` means constant init (zeros, or ones for layer-norm gains).
    fn param_specs(&self) -> Vec<(String, Vec<usize>, Option<f64>)> {
        let d = self.d_model;
        let h = self.mlp_hidden;
        let inv = |n: usize| Some(1.0 / (n as f64).sqrt());
        let mut specs = Vec::new();
        match self.task {
            Task::ImageClassification => {
                let pdim = self.channels * self.patch_size * self.patch_size;
                specs.push(("embed.patch.weight".into(), vec![pdim, d], inv(pdim)));
                specs.push(("embed.patch.bias".into(), vec![d], None));
                if self.uses_class_token() {
                    specs.push(("embed.cls".into(), vec![1, d], Some(0.1)));
                }
            }
            Task::NextToken => {
                specs.push(("embed.token".into(), vec![self.num_classes, d], Some(1.0)));
            }
        }
        specs.push(("embed.pos".into(), vec![self.num_tokens(), d], Some(0.1)));
        for b in 0..self.num_blocks {
            let p = |s: &str| format!("blocks.{b}.{s}");
            specs.push((p("ln1.gamma"), vec![d], None));
            specs.push((p("ln1.beta"), vec![d], None));
            for r in ["q", "k", "v", "o"] {
                specs.push((p(&format!("attn.w{r}")), vec![d, d], inv(d)));
                // no key bias
                if r != "k" {
                    specs.push((p(&format!("attn.b{r}")), vec![d], None));
                }
            }
            specs.push((p("ln2.gamma"), vec![d], None));
            specs.push((p("ln2.beta"), vec![d], None));
            specs.push((p("mlp.w1"), vec![d, h], inv(d)));
            specs.push((p("mlp.b1"), vec![h], None));
            specs.push((p("mlp.w2"), vec![h, d], inv(h)));
            specs.push((p("mlp.b2"), vec![d], None));
        }
        specs.push(("final_ln.gamma".into(), vec![d], None));
        specs.push(("final_ln.beta".into(), vec![d], None));
        specs.push(("head.weight".into(), vec![d, self.num_classes], inv(d)));
        specs.push(("head.bias".into(), vec![self.num_classes], None));
        specs
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.param_specs()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }
}

/// A model's parameters split into the personalized attention projections
/// and the shared remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition {
    pub attention: ParamSet,
    pub shared: ParamSet,
}

impl ParamPartition {
    pub fn merged(&self) -> ParamSet {
        let mut all = self.shared.clone();
        all.extend(self.attention.iter().map(|(k, v)| (k.clone(), v.clone())));
        all
    }
}

/// Deterministic initialization from `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParamPartition> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = ParamSet::new();
    for (name, shape, std) in config.param_specs() {
        let t = match std {
            Some(s) => Tensor::randn(shape, s, &mut rng),
            None if name.ends_with("gamma") => Tensor::full(shape, 1.0),
            None => Tensor::zeros(shape),
        };
        flat.insert(name, t);
    }
    split_params(config, flat)
}

/// Splits a full parameter set; every expected name must be present exactly.
pub fn split_params(config: &ModelConfig, flat: ParamSet) -> Result<ParamPartition> {
    let shapes = config.param_shapes();
    let attn: Vec<String> = config.attention_keys();
    let mut out = ParamPartition {
        attention: ParamSet::new(),
        shared: ParamSet::new(),
    };
    for (name, t) in flat {
        let shape = shapes
            .get(&name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(
                "split_params",
                format!("`{name}` {shape:?}"),
                format!("{:?}", t.shape()),
            ));
        }
        if attn.contains(&name) {
            out.attention.insert(name, t);
        } else {
            out.shared.insert(name, t);
        }
    }
    if let Some(missing) = shapes
        .keys()
        .find(|k| !out.attention.contains_key(*k) && !out.shared.contains_key(*k))
    {
        return Err(Error::MissingParam(missing.clone()));
    }
    Ok(out)
}

/// Inverse of [`split_params`]; fails naming the first missing or foreign key.
pub fn merge_params(config: &ModelConfig, attention: &ParamSet, shared: &ParamSet) -> Result<ParamSet> {
    let attn_keys = config.attention_keys();
    for k in attention.keys() {
        if !attn_keys.contains(k) {
            return Err(Error::UnknownParam(k.clone()));
        }
    }
    for k in shared.keys() {
        if attn_keys.contains(k) {
            return Err(Error::UnknownParam(k.clone()));
        }
    }
    let mut all = shared.clone();
    all.extend(attention.iter().map(|(k, v)| (k.clone(), v.clone())));
    let shapes = config.param_shapes();
    if let Some(missing) = shapes.keys().find(|k| !all.contains_key(*k)) {
        return Err(Error::MissingParam(missing.clone()));
    }
    if let Some(extra) = all.keys().find(|k| !shapes.contains_key(*k)) {
        return Err(Error::UnknownParam(extra.clone()));
    }
    Ok(all)
}

/// Cuts a `C×H×W` image into row-major `p×p` patches, each flattened in
/// channel, row, column order. Returns `[m, C·p²]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", "[C, H, W]", format!("{s:?}")));
    }
    let batched = image.clone().reshape(vec![1, s[0], s[1], s[2]])?;
    let out = patchify_batch(&batched, patch)?;
    let (m, w) = (out.shape()[1], out.shape()[2]);
    out.reshape(vec![m, w])
}

/// Batched [`patchify`]: `[B, C, H, W]` to `[B, m, C·p²]`.
pub fn patchify_batch(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("patchify", "[B, C, H, W]", format!("{s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("extents divisible by patch {patch}"),
            format!("{h}x{w}"),
        ));
    }
    let (ph, pw) = (h / patch, w / patch);
    let tok = c * patch * patch;
    let mut out = Vec::with_capacity(images.len());
    let src = images.data();
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for ci in 0..c {
                    for y in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + y) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, ph * pw, tok], out))
}

/// Multi-head scaled dot-product attention over `[B, m, d]` projections.
/// Returns the concatenated head outputs and each head's weights `[B, m, m]`.
fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = *tape.value(q).shape().last().unwrap();
    if d % heads != 0 {
        return Err(Error::shape("attention", format!("width divisible by {heads}"), d));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 2, h * dh, dh)?;
        let kh = tape.slice(k, 2, h * dh, dh)?;
        let vh = tape.slice(v, 2, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, scale)?;
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let a = tape.softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    Ok((o, weights))
}

/// Self-attention of a single `m×d` token matrix with bias-free projections.
/// Returns the `m×d` output and each head's `m×m` weights.
pub fn attention_forward(
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let s = h.shape();
    if s.len() != 2 {
        return Err(Error::shape("attention", "H [m, d]", format!("{s:?}")));
    }
    for w in [wq, wk, wv] {
        if w.shape() != [s[1], s[1]] {
            return Err(Error::shape(
                "attention",
                format!("projection [{0}, {0}]", s[1]),
                format!("{:?}", w.shape()),
            ));
        }
    }
    let mut tape = Tape::new();
    let x = tape.input("h", h.clone().reshape(vec![1, s[0], s[1]])?);
    let (wq, wk, wv) = (tape.constant(wq.clone()), tape.constant(wk.clone()), tape.constant(wv.clone()));
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let (o, ws) = multi_head(&mut tape, q, k, v, heads, None)?;
    let out = tape.value(o).clone().reshape(s.to_vec())?;
    let ws = ws
        .into_iter()
        .map(|w| tape.value(w).clone().reshape(vec![s[0], s[0]]))
        .collect::<Result<_>>()?;
    Ok((out, ws))
}

/// Inputs and targets for one mini-batch.
///
/// Images: `inputs [B, C, H, W]`, `targets [B]`. Next-token:
/// `inputs [B, m]` token ids, `targets [B, m]` next ids.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

/// Tape handles produced by [`Transformer::forward`].
pub struct ForwardVars {
    /// `[B, C]` for images, `[B, m, V]` for next-token.
    pub logits: Var,
    pub loss: Var,
    /// block → head → `[B, m, m]` weights.
    pub attention: Vec<Vec<Var>>,
}

/// Result of [`Transformer::model_forward`].
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub loss: f64,
    /// One trace per batch element when tracing was requested.
    pub traces: Option<Vec<AttentionTrace>>,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Transformer { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Registers every parameter on `tape`.
    pub fn register(&self, tape: &mut Tape, params: &ParamSet) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(k.clone(), t)))
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let s = batch.inputs.shape();
        let b = s.first().copied().unwrap_or(0);
        let (want_in, want_t) = match c.task {
            Task::ImageClassification => (
                vec![b, c.channels, c.image_extent, c.image_extent],
                vec![b],
            ),
            Task::NextToken => (vec![b, c.seq_len], vec![b, c.seq_len]),
        };
        if s != want_in.as_slice() || batch.targets.shape() != want_t.as_slice() {
            return Err(Error::shape(
                "model_forward",
                format!("{:?} inputs {want_in:?} / targets {want_t:?}", c.task),
                format!("{s:?} / {:?}", batch.targets.shape()),
            ));
        }
        Ok(())
    }

    fn affine_norm(&self, tape: &mut Tape, x: Var, v: &BTreeMap<String, Var>, prefix: &str) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let n = tape.mul(n, get(v, &format!("{prefix}.gamma"))?)?;
        tape.add(n, get(v, &format!("{prefix}.beta"))?)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// Records the full forward pass and loss on `tape`.
    pub fn forward(&self, tape: &mut Tape, v: &BTreeMap<String, Var>, batch: &Batch) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let c = &self.config;
        let b = batch.size();
        let m = c.num_tokens();
        let mut x = match c.task {
            Task::ImageClassification => {
                let patches = patchify_batch(&batch.inputs, c.patch_size)?;
                let patches = tape.input("patches", patches);
                let x = self.linear(
                    tape,
                    patches,
                    get(v, "embed.patch.weight")?,
                    get(v, "embed.patch.bias")?,
                )?;
                if c.uses_class_token() {
                    let ones = tape.constant(Tensor::full(vec![b, 1, 1], 1.0));
                    let cls = tape.matmul(ones, get(v, "embed.cls")?)?;
                    tape.concat(&[cls, x], 1)?
                } else {
                    x
                }
            }
            Task::NextToken => {
                let tokens = tape.input("tokens", batch.inputs.clone());
                tape.embedding(get(v, "embed.token")?, tokens)?
            }
        };
        x = tape.add(x, get(v, "embed.pos")?)?;

        let mask = match c.task {
            Task::NextToken => {
                let mut mk = vec![0.0; m * m];
                for i in 0..m {
                    for j in i + 1..m {
                        mk[i * m + j] = -1e9;
                    }
                }
                Some(tape.constant(Tensor::from_parts(vec![m, m], mk)))
            }
            Task::ImageClassification => None,
        };

        let mut attention = Vec::with_capacity(c.num_blocks);
        for blk in 0..c.num_blocks {
            let p = |s: &str| format!("blocks.{blk}.{s}");
            let h = self.affine_norm(tape, x, v, &p("ln1"))?;
            let q = self.linear(tape, h, get(v, &p("attn.wq"))?, get(v, &p("attn.bq"))?)?;
            let k = tape.matmul(h, get(v, &p("attn.wk"))?)?;
            let val = self.linear(tape, h, get(v, &p("attn.wv"))?, get(v, &p("attn.bv"))?)?;
            let (o, weights) = multi_head(tape, q, k, val, c.num_heads, mask)?;
            let o = self.linear(tape, o, get(v, &p("attn.wo"))?, get(v, &p("attn.bo"))?)?;
            x = tape.add(x, o)?;
            let h2 = self.affine_norm(tape, x, v, &p("ln2"))?;
            let f = self.linear(tape, h2, get(v, &p("mlp.w1"))?, get(v, &p("mlp.b1"))?)?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, f, get(v, &p("mlp.w2"))?, get(v, &p("mlp.b2"))?)?;
            x = tape.add(x, f)?;
            attention.push(weights);
        }
        x = self.affine_norm(tape, x, v, "final_ln")?;

        let (logits, loss) = match c.task {
            Task::ImageClassification => {
                let pooled = match c.pooling {
                    Pooling::ClassToken => {
                        let first = tape.slice(x, 1, 0, 1)?;
                        tape.reshape(first, vec![b, c.d_model])?
                    }
                    Pooling::Mean => tape.mean_axis(x, 1)?,
                };
                let logits = self.linear(tape, pooled, get(v, "head.weight")?, get(v, "head.bias")?)?;
                let t = tape.input("targets", batch.targets.clone());
                let loss = tape.cross_entropy(logits, t)?;
                (logits, loss)
            }
            Task::NextToken => {
                let logits = self.linear(tape, x, get(v, "head.weight")?, get(v, "head.bias")?)?;
                let flat = tape.reshape(logits, vec![b * m, c.num_classes])?;
                let t = tape.input("targets", batch.targets.clone().reshape(vec![b * m])?);
                let loss = tape.cross_entropy(flat, t)?;
                (logits, loss)
            }
        };
        Ok(ForwardVars {
            logits,
            loss,
            attention,
        })
    }

    /// Per-example traces out of a recorded forward pass.
    pub fn traces(&self, tape: &Tape, fwd: &ForwardVars) -> Vec<AttentionTrace> {
        let m = self.config.num_tokens();
        let b = fwd
            .attention
            .first()
            .and_then(|h| h.first())
            .map_or(0, |v| tape.value(*v).shape()[0]);
        (0..b)
            .map(|i| AttentionTrace {
                tokens: m,
                class_token: self.config.uses_class_token(),
                blocks: fwd
                    .attention
                    .iter()
                    .map(|heads| {
                        heads
                            .iter()
                            .map(|h| tape.value(*h).data()[i * m * m..(i + 1) * m * m].to_vec())
                            .collect()
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn model_forward(&self, params: &ParamSet, batch: &Batch, trace: bool) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let v = self.register(&mut tape, params);
        let fwd = self.forward(&mut tape, &v, batch)?;
        Ok(ModelOutput {
            logits: tape.value(fwd.logits).clone(),
            loss: tape.value(fwd.loss).item(),
            traces: trace.then(|| self.traces(&tape, &fwd)),
        })
    }

    /// Loss and gradient for every parameter with `requires_grad`.
    pub fn loss_and_grads(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, GradMap)> {
        let mut tape = Tape::new();
        let v = self.register(&mut tape, params);
        let fwd = self.forward(&mut tape, &v, batch)?;
        let grads = tape.backward(fwd.loss)?;
        Ok((tape.value(fwd.loss).item(), grads))
    }

    /// Number of correct top-1 predictions and the number of predictions made.
    /// Ties resolve to the lowest class index.
    pub fn count_correct(&self, params: &ParamSet, batch: &Batch) -> Result<(usize, usize)> {
        let out = self.model_forward(params, batch, false)?;
        let classes = self.config.num_classes;
        let mut correct = 0;
        let mut total = 0;
        for (row, &t) in out.logits.data().chunks(classes).zip(batch.targets.data()) {
            if argmax(row) == t as usize {
                correct += 1;
            }
            total += 1;
        }
        Ok((correct, total))
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn get(v: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    v.get(name)
        .copied()
        .ok_or_else(|| Error::MissingParam(name.to_string()))
}
