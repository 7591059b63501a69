//! Pre-layer-norm transformer encoder with a masked-LM head and a
//! classification head over the final `<s>` (CLS) vector.
//!
//! Everything is f64 with hand-written backward passes. A forward pass
//! records the activations it needs in the returned [`EncoderOutput`];
//! [`Model::backward`] consumes them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{dot, matmul, matmul_at_acc, matmul_bt, softmax, softmax_in_place, Matrix};
use crate::tokenizer::{Tokenizer, MASK_ID};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    /// Reuse the token embedding matrix as the MLM output projection.
    pub tie_mlm_weights: bool,
    /// Insert a dense+tanh pooler between the CLS vector and the classifier.
    pub classifier_pooler: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ff_dim: 256,
            max_positions: 512,
            vocab_size: crate::tokenizer::TOY_VOCAB_SIZE,
            num_classes: 2,
            dropout_rate: 0.1,
            tie_mlm_weights: true,
            classifier_pooler: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ff_dim", self.ff_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.num_heads > 0 && !self.hidden_dim.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            problems.push("layer_norm_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gamma: Matrix,
    pub attn_norm_beta: Matrix,
    pub query_weight: Matrix,
    pub query_bias: Matrix,
    pub key_weight: Matrix,
    pub key_bias: Matrix,
    pub value_weight: Matrix,
    pub value_bias: Matrix,
    pub attn_out_weight: Matrix,
    pub attn_out_bias: Matrix,
    pub ffn_norm_gamma: Matrix,
    pub ffn_norm_beta: Matrix,
    pub ffn_in_weight: Matrix,
    pub ffn_in_bias: Matrix,
    pub ffn_out_weight: Matrix,
    pub ffn_out_bias: Matrix,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            attn_norm_gamma,
            attn_norm_beta,
            query_weight,
            query_bias,
            key_weight,
            key_bias,
            value_weight,
            value_bias,
            attn_out_weight,
            attn_out_bias,
            ffn_norm_gamma,
            ffn_norm_beta,
            ffn_in_weight,
            ffn_in_bias,
            ffn_out_weight,
            ffn_out_bias
        )
    };
}

impl LayerParams {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let h = cfg.hidden_dim;
        let f = cfg.ff_dim;
        LayerParams {
            attn_norm_gamma: Matrix::filled(1, h, 1.0),
            attn_norm_beta: Matrix::zeros(1, h),
            query_weight: Matrix::random_normal(h, h, INIT_STD, rng),
            query_bias: Matrix::zeros(1, h),
            key_weight: Matrix::random_normal(h, h, INIT_STD, rng),
            key_bias: Matrix::zeros(1, h),
            value_weight: Matrix::random_normal(h, h, INIT_STD, rng),
            value_bias: Matrix::zeros(1, h),
            attn_out_weight: Matrix::random_normal(h, h, INIT_STD, rng),
            attn_out_bias: Matrix::zeros(1, h),
            ffn_norm_gamma: Matrix::filled(1, h, 1.0),
            ffn_norm_beta: Matrix::zeros(1, h),
            ffn_in_weight: Matrix::random_normal(h, f, INIT_STD, rng),
            ffn_in_bias: Matrix::zeros(1, f),
            ffn_out_weight: Matrix::random_normal(f, h, INIT_STD, rng),
            ffn_out_bias: Matrix::zeros(1, h),
        }
    }
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm_gamma: Matrix,
    pub final_norm_beta: Matrix,
    /// Untied MLM projection, `vocab × hidden`. `None` when tied.
    pub mlm_weight: Option<Matrix>,
    pub mlm_bias: Matrix,
    pub pooler_weight: Option<Matrix>,
    pub pooler_bias: Option<Matrix>,
    /// `hidden × num_classes`.
    pub classifier_weight: Matrix,
    pub classifier_bias: Matrix,
}

impl Parameters {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim;
        let token_embedding = Matrix::random_normal(cfg.vocab_size, h, INIT_STD, &mut rng);
        let position_embedding = Matrix::random_normal(cfg.max_positions, h, INIT_STD, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams::init(cfg, &mut rng))
            .collect();
        let mlm_weight = (!cfg.tie_mlm_weights)
            .then(|| Matrix::random_normal(cfg.vocab_size, h, INIT_STD, &mut rng));
        let mut params = Parameters {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gamma: Matrix::filled(1, h, 1.0),
            final_norm_beta: Matrix::zeros(1, h),
            mlm_weight,
            mlm_bias: Matrix::zeros(1, cfg.vocab_size),
            pooler_weight: None,
            pooler_bias: None,
            classifier_weight: Matrix::zeros(h, cfg.num_classes),
            classifier_bias: Matrix::zeros(1, cfg.num_classes),
        };
        params.reset_classifier(cfg, seed.wrapping_add(0x5eed));
        params
    }

    /// Fresh classification head (and pooler, if configured).
    pub fn reset_classifier(&mut self, cfg: &ModelConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim;
        if cfg.classifier_pooler {
            self.pooler_weight = Some(Matrix::random_normal(h, h, INIT_STD, &mut rng));
            self.pooler_bias = Some(Matrix::zeros(1, h));
        } else {
            self.pooler_weight = None;
            self.pooler_bias = None;
        }
        self.classifier_weight = Matrix::random_normal(h, cfg.num_classes, INIT_STD, &mut rng);
        self.classifier_bias = Matrix::zeros(1, cfg.num_classes);
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, m| m.fill(0.0));
        z
    }

    /// Visits every tensor with a stable dotted name, in a fixed order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a Matrix)) {
        f("embeddings.token", &self.token_embedding);
        f("embeddings.position", &self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            macro_rules! visit {
                ($($field:ident),*) => {
                    $( f(&format!("layers.{i}.{}", stringify!($field)), &layer.$field); )*
                };
            }
            layer_fields!(visit);
        }
        f("final_norm.gamma", &self.final_norm_gamma);
        f("final_norm.beta", &self.final_norm_beta);
        if let Some(w) = &self.mlm_weight {
            f("mlm.weight", w);
        }
        f("mlm.bias", &self.mlm_bias);
        if let Some(w) = &self.pooler_weight {
            f("pooler.weight", w);
        }
        if let Some(b) = &self.pooler_bias {
            f("pooler.bias", b);
        }
        f("classifier.weight", &self.classifier_weight);
        f("classifier.bias", &self.classifier_bias);
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut Matrix)) {
        f("embeddings.token", &mut self.token_embedding);
        f("embeddings.position", &mut self.position_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            macro_rules! visit {
                ($($field:ident),*) => {
                    $( f(&format!("layers.{i}.{}", stringify!($field)), &mut layer.$field); )*
                };
            }
            layer_fields!(visit);
        }
        f("final_norm.gamma", &mut self.final_norm_gamma);
        f("final_norm.beta", &mut self.final_norm_beta);
        if let Some(w) = &mut self.mlm_weight {
            f("mlm.weight", w);
        }
        f("mlm.bias", &mut self.mlm_bias);
        if let Some(w) = &mut self.pooler_weight {
            f("pooler.weight", w);
        }
        if let Some(b) = &mut self.pooler_bias {
            f("pooler.bias", b);
        }
        f("classifier.weight", &mut self.classifier_weight);
        f("classifier.bias", &mut self.classifier_bias);
    }

    /// Every tensor with its name, in visiting order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.for_each(|n, m| out.push((n.to_string(), m)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.for_each_mut(|n, m| out.push((n.to_string(), m)));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, m| n += m.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, m| ok &= m.is_finite());
        ok
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for ((_, m), (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in m.data_mut().iter_mut().zip(o.data()) {
                *a += b * scale;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    attn_norm: NormCache,
    attn_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    context: Matrix,
    attn_dropout: Option<Vec<f64>>,
    ffn_norm: NormCache,
    ffn_in: Matrix,
    pre_activation: Matrix,
    activation: Matrix,
    ffn_dropout: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct ForwardTrace {
    ids: Vec<u32>,
    embed_dropout: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
}

/// Final-layer hidden states of one sequence.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `seq_len × hidden_dim`.
    pub hidden_states: Matrix,
    /// Attention probabilities, indexed `layer * num_heads + head`, each
    /// `seq_len × seq_len`.
    pub attention_probs: Vec<Matrix>,
    /// Number of leading positions that keys may attend to.
    pub attended_len: usize,
    trace: Option<ForwardTrace>,
}

impl EncoderOutput {
    /// Wraps externally produced hidden states. Such an output has no
    /// recorded forward pass, so it cannot be back-propagated.
    pub fn from_hidden(hidden_states: Matrix) -> Self {
        let attended_len = hidden_states.rows();
        EncoderOutput {
            hidden_states,
            attention_probs: Vec::new(),
            attended_len,
            trace: None,
        }
    }

    pub fn cls_vector(&self) -> &[f64] {
        self.hidden_states.row(0)
    }

    pub fn seq_len(&self) -> usize {
        self.hidden_states.rows()
    }
}

/// A differentiable quantity built on top of an [`EncoderOutput`].
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Summed cross-entropy of the MLM head at `positions`.
    MaskedLm {
        positions: &'a [usize],
        targets: &'a [u32],
    },
    /// Cross-entropy of the classification head.
    Classification { label: usize },
    /// A loss that does not depend on the parameters.
    Constant(f64),
}

/// Cross-entropy `-ln softmax(logits)[target]` and its gradient
/// `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = crate::tensor::log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> (Matrix, NormCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..cols {
            let xh = (row[c] - mean) * rs;
            xhat.set(r, c, xh);
            out.set(r, c, xh * gamma.data()[c] + beta.data()[c]);
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Matrix,
    cache: &NormCache,
    gamma: &Matrix,
    dgamma: &mut Matrix,
    dbeta: &mut Matrix,
) -> Matrix {
    let (rows, cols) = dy.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let n = cols as f64;
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..cols {
            dgamma.data_mut()[c] += dyr[c] * xh[c];
            dbeta.data_mut()[c] += dyr[c];
            let dxh = dyr[c] * gamma.data()[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[c];
        }
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..cols {
            let dxh = dyr[c] * gamma.data()[c];
            out[c] = rs * (dxh - sum_dxhat / n - xh[c] * sum_dxhat_xhat / n);
        }
    }
    dx
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = matmul(x, w);
    y.add_row_vector(b.data());
    y
}

/// `dx = dy · wᵀ`, accumulating `dw += xᵀ · dy` and `db += Σ dy`.
fn linear_backward(
    dy: &Matrix,
    x: &Matrix,
    w: &Matrix,
    dw: &mut Matrix,
    db: &mut Matrix,
) -> Matrix {
    matmul_at_acc(x, dy, dw);
    dy.sum_rows_into(db.data_mut());
    matmul_bt(dy, w)
}

fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn apply_mask(x: &mut Matrix, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, m) in x.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(Model { config, params })
    }

    /// Swaps in a freshly initialised classification head for `num_classes`
    /// while keeping the encoder weights.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        self.config.num_classes = num_classes;
        self.params.reset_classifier(&self.config, seed);
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(invalid("empty input sequence"));
        }
        if ids.len() > self.config.max_positions {
            return Err(invalid(format!(
                "sequence length {} exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::UnknownTokenId(bad));
        }
        Ok(())
    }

    /// Inference forward pass: full attention, no dropout.
    pub fn forward_encoder(&self, ids: &[u32]) -> Result<EncoderOutput> {
        self.forward(ids, ids.len(), None)
    }

    /// Forward pass where only the first `attended_len` positions may be
    /// attended to (the rest are padding). Dropout is applied when an RNG is
    /// supplied and the configured rate is positive.
    pub fn forward(
        &self,
        ids: &[u32],
        attended_len: usize,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        self.check_ids(ids)?;
        if attended_len == 0 || attended_len > ids.len() {
            return Err(invalid(format!(
                "attended length {attended_len} outside 1..={}",
                ids.len()
            )));
        }
        let cfg = &self.config;
        let p = &self.params;
        let len = ids.len();
        let h = cfg.hidden_dim;
        let rate = cfg.dropout_rate;
        let mut draw_mask = |n: usize| -> Option<Vec<f64>> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => Some(dropout_mask(n, rate, rng)),
                _ => None,
            }
        };

        let mut x = Matrix::zeros(len, h);
        for (t, &id) in ids.iter().enumerate() {
            let row = x.row_mut(t);
            let tok = p.token_embedding.row(id as usize);
            let pos = p.position_embedding.row(t);
            for c in 0..h {
                row[c] = tok[c] + pos[c];
            }
        }
        let embed_dropout = draw_mask(len * h);
        apply_mask(&mut x, &embed_dropout);

        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut attention_probs = Vec::with_capacity(cfg.num_layers * heads);
        for lp in &p.layers {
            let (attn_in, attn_norm) = layer_norm(
                &x,
                &lp.attn_norm_gamma,
                &lp.attn_norm_beta,
                cfg.layer_norm_eps,
            );
            let q = linear(&attn_in, &lp.query_weight, &lp.query_bias);
            let k = linear(&attn_in, &lp.key_weight, &lp.key_bias);
            let v = linear(&attn_in, &lp.value_weight, &lp.value_bias);
            let mut context = Matrix::zeros(len, h);
            for head in 0..heads {
                let off = head * dh;
                let mut probs = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &q.row(i)[off..off + dh];
                    let row = probs.row_mut(i);
                    for j in 0..len {
                        row[j] = if j < attended_len {
                            dot(qi, &k.row(j)[off..off + dh]) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(row);
                }
                for i in 0..len {
                    let ctx = &mut context.row_mut(i)[off..off + dh];
                    for j in 0..attended_len {
                        let pij = probs.get(i, j);
                        for (c, vj) in ctx.iter_mut().zip(&v.row(j)[off..off + dh]) {
                            *c += pij * vj;
                        }
                    }
                }
                attention_probs.push(probs);
            }
            let mut attn_out = linear(&context, &lp.attn_out_weight, &lp.attn_out_bias);
            let attn_dropout = draw_mask(len * h);
            apply_mask(&mut attn_out, &attn_dropout);
            x.add_assign(&attn_out);

            let (ffn_in, ffn_norm) = layer_norm(
                &x,
                &lp.ffn_norm_gamma,
                &lp.ffn_norm_beta,
                cfg.layer_norm_eps,
            );
            let pre_activation = linear(&ffn_in, &lp.ffn_in_weight, &lp.ffn_in_bias);
            let mut activation = pre_activation.clone();
            activation.data_mut().iter_mut().for_each(|u| *u = gelu(*u));
            let mut ffn_out = linear(&activation, &lp.ffn_out_weight, &lp.ffn_out_bias);
            let ffn_dropout = draw_mask(len * h);
            apply_mask(&mut ffn_out, &ffn_dropout);
            x.add_assign(&ffn_out);

            layers.push(LayerCache {
                attn_norm,
                attn_in,
                q,
                k,
                v,
                context,
                attn_dropout,
                ffn_norm,
                ffn_in,
                pre_activation,
                activation,
                ffn_dropout,
            });
        }
        let (hidden_states, final_norm) = layer_norm(
            &x,
            &p.final_norm_gamma,
            &p.final_norm_beta,
            cfg.layer_norm_eps,
        );
        Ok(EncoderOutput {
            hidden_states,
            attention_probs,
            attended_len,
            trace: Some(ForwardTrace {
                ids: ids.to_vec(),
                embed_dropout,
                layers,
                final_norm,
            }),
        })
    }

    fn mlm_projection(&self) -> &Matrix {
        self.params
            .mlm_weight
            .as_ref()
            .unwrap_or(&self.params.token_embedding)
    }

    /// Vocabulary logits at each requested position.
    pub fn mlm_logits(&self, output: &EncoderOutput, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let proj = self.mlm_projection();
        positions
            .iter()
            .map(|&pos| {
                if pos >= output.seq_len() {
                    return Err(invalid(format!(
                        "masked position {pos} outside sequence of length {}",
                        output.seq_len()
                    )));
                }
                let hp = output.hidden_states.row(pos);
                Ok((0..self.config.vocab_size)
                    .map(|v| dot(proj.row(v), hp) + self.params.mlm_bias.data()[v])
                    .collect())
            })
            .collect()
    }

    fn pooled(&self, cls: &[f64]) -> Vec<f64> {
        match (&self.params.pooler_weight, &self.params.pooler_bias) {
            (Some(w), Some(b)) => {
                let z = linear(&Matrix::from_vec(1, cls.len(), cls.to_vec()), w, b);
                z.data().iter().map(|v| v.tanh()).collect()
            }
            _ => cls.to_vec(),
        }
    }

    /// Class logits from the final-layer CLS vector.
    pub fn cls_logits(&self, output: &EncoderOutput) -> Result<Vec<f64>> {
        let w = &self.params.classifier_weight;
        if w.shape() != (self.config.hidden_dim, self.config.num_classes)
            || self.params.classifier_bias.cols() != self.config.num_classes
            || output.hidden_states.cols() != self.config.hidden_dim
        {
            return Err(Error::Shape(format!(
                "classifier {:?} does not match hidden {} / classes {}",
                w.shape(),
                self.config.hidden_dim,
                self.config.num_classes
            )));
        }
        let pooled = self.pooled(output.cls_vector());
        let logits = linear(
            &Matrix::from_vec(1, pooled.len(), pooled),
            w,
            &self.params.classifier_bias,
        );
        Ok(logits.into_data())
    }

    pub fn class_probabilities(&self, output: &EncoderOutput) -> Result<Vec<f64>> {
        Ok(softmax(&self.cls_logits(output)?))
    }

    /// Back-propagates `Σ weight · loss(objective)` into `grads` and returns
    /// that weighted loss.
    pub fn backward(
        &self,
        output: &EncoderOutput,
        terms: &[(Objective<'_>, f64)],
        grads: &mut Parameters,
    ) -> Result<f64> {
        let trace = output.trace.as_ref().ok_or(Error::NoForwardPass)?;
        let cfg = &self.config;
        let p = &self.params;
        let len = output.seq_len();
        let h = cfg.hidden_dim;
        let mut d_hidden = Matrix::zeros(len, h);
        let mut total = 0.0;

        for &(objective, weight) in terms {
            match objective {
                Objective::Constant(c) => total += weight * c,
                Objective::MaskedLm { positions, targets } => {
                    if positions.len() != targets.len() {
                        return Err(invalid("one target per masked position required"));
                    }
                    let logits = self.mlm_logits(output, positions)?;
                    let tied = p.mlm_weight.is_none();
                    for ((&pos, &target), lg) in positions.iter().zip(targets).zip(&logits) {
                        if target as usize >= cfg.vocab_size {
                            return Err(Error::UnknownTokenId(target));
                        }
                        let (loss, mut dl) = softmax_cross_entropy(lg, target as usize);
                        total += weight * loss;
                        dl.iter_mut().for_each(|g| *g *= weight);
                        let hp = output.hidden_states.row(pos).to_vec();
                        let proj = self.mlm_projection();
                        let dh_row = d_hidden.row_mut(pos);
                        for (v, &g) in dl.iter().enumerate() {
                            grads.mlm_bias.data_mut()[v] += g;
                            if g == 0.0 {
                                continue;
                            }
                            let pr = proj.row(v);
                            for c in 0..h {
                                dh_row[c] += g * pr[c];
                            }
                            let dproj = if tied {
                                grads.token_embedding.row_mut(v)
                            } else {
                                grads
                                    .mlm_weight
                                    .as_mut()
                                    .expect("untied gradient buffer")
                                    .row_mut(v)
                            };
                            for c in 0..h {
                                dproj[c] += g * hp[c];
                            }
                        }
                    }
                }
                Objective::Classification { label } => {
                    if label >= cfg.num_classes {
                        return Err(invalid(format!(
                            "label {label} outside {} classes",
                            cfg.num_classes
                        )));
                    }
                    let logits = self.cls_logits(output)?;
                    let (loss, mut dl) = softmax_cross_entropy(&logits, label);
                    total += weight * loss;
                    dl.iter_mut().for_each(|g| *g *= weight);
                    let cls = output.cls_vector().to_vec();
                    let pooled = self.pooled(&cls);
                    let dlog = Matrix::from_vec(1, dl.len(), dl);
                    let d_pooled = linear_backward(
                        &dlog,
                        &Matrix::from_vec(1, h, pooled.clone()),
                        &p.classifier_weight,
                        &mut grads.classifier_weight,
                        &mut grads.classifier_bias,
                    );
                    let d_cls = match (
                        &p.pooler_weight,
                        &mut grads.pooler_weight,
                        &mut grads.pooler_bias,
                    ) {
                        (Some(pw), Some(gw), Some(gb)) => {
                            let dz: Vec<f64> = d_pooled
                                .data()
                                .iter()
                                .zip(&pooled)
                                .map(|(d, t)| d * (1.0 - t * t))
                                .collect();
                            linear_backward(
                                &Matrix::from_vec(1, h, dz),
                                &Matrix::from_vec(1, h, cls),
                                pw,
                                gw,
                                gb,
                            )
                        }
                        _ => d_pooled,
                    };
                    for (d, g) in d_hidden.row_mut(0).iter_mut().zip(d_cls.data()) {
                        *d += g;
                    }
                }
            }
        }

        // final norm
        let mut dx = layer_norm_backward(
            &d_hidden,
            &trace.final_norm,
            &p.final_norm_gamma,
            &mut grads.final_norm_gamma,
            &mut grads.final_norm_beta,
        );

        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, (lp, cache)) in p.layers.iter().zip(&trace.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];

            // feed-forward branch
            let mut d_ffn_out = dx.clone();
            apply_mask(&mut d_ffn_out, &cache.ffn_dropout);
            let mut d_act = linear_backward(
                &d_ffn_out,
                &cache.activation,
                &lp.ffn_out_weight,
                &mut gl.ffn_out_weight,
                &mut gl.ffn_out_bias,
            );
            for (d, u) in d_act.data_mut().iter_mut().zip(cache.pre_activation.data()) {
                *d *= gelu_grad(*u);
            }
            let d_ffn_in = linear_backward(
                &d_act,
                &cache.ffn_in,
                &lp.ffn_in_weight,
                &mut gl.ffn_in_weight,
                &mut gl.ffn_in_bias,
            );
            let d_norm = layer_norm_backward(
                &d_ffn_in,
                &cache.ffn_norm,
                &lp.ffn_norm_gamma,
                &mut gl.ffn_norm_gamma,
                &mut gl.ffn_norm_beta,
            );
            dx.add_assign(&d_norm);

            // attention branch
            let mut d_attn_out = dx.clone();
            apply_mask(&mut d_attn_out, &cache.attn_dropout);
            let d_context = linear_backward(
                &d_attn_out,
                &cache.context,
                &lp.attn_out_weight,
                &mut gl.attn_out_weight,
                &mut gl.attn_out_bias,
            );
            let mut dq = Matrix::zeros(len, h);
            let mut dk = Matrix::zeros(len, h);
            let mut dv = Matrix::zeros(len, h);
            let att_len = output.attended_len;
            for head in 0..heads {
                let off = head * dh;
                let probs = &output.attention_probs[li * heads + head];
                for i in 0..len {
                    let dci = &d_context.row(i)[off..off + dh];
                    let mut dp = vec![0.0; att_len];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        *dpj = dot(dci, &cache.v.row(j)[off..off + dh]);
                        let pij = probs.get(i, j);
                        let dvj = &mut dv.row_mut(j)[off..off + dh];
                        for (a, b) in dvj.iter_mut().zip(dci) {
                            *a += pij * b;
                        }
                    }
                    let pr = &probs.row(i)[..att_len];
                    let inner = dot(pr, &dp);
                    let qi = cache.q.row(i)[off..off + dh].to_vec();
                    for j in 0..att_len {
                        let ds = pr[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &cache.k.row(j)[off..off + dh];
                        let dqi = &mut dq.row_mut(i)[off..off + dh];
                        for (a, b) in dqi.iter_mut().zip(kj) {
                            *a += ds * b;
                        }
                        let dkj = &mut dk.row_mut(j)[off..off + dh];
                        for (a, b) in dkj.iter_mut().zip(&qi) {
                            *a += ds * b;
                        }
                    }
                }
            }
            let mut d_attn_in = linear_backward(
                &dq,
                &cache.attn_in,
                &lp.query_weight,
                &mut gl.query_weight,
                &mut gl.query_bias,
            );
            d_attn_in.add_assign(&linear_backward(
                &dk,
                &cache.attn_in,
                &lp.key_weight,
                &mut gl.key_weight,
                &mut gl.key_bias,
            ));
            d_attn_in.add_assign(&linear_backward(
                &dv,
                &cache.attn_in,
                &lp.value_weight,
                &mut gl.value_weight,
                &mut gl.value_bias,
            ));
            let d_norm = layer_norm_backward(
                &d_attn_in,
                &cache.attn_norm,
                &lp.attn_norm_gamma,
                &mut gl.attn_norm_gamma,
                &mut gl.attn_norm_beta,
            );
            dx.add_assign(&d_norm);
        }

        apply_mask(&mut dx, &trace.embed_dropout);
        for (t, &id) in trace.ids.iter().enumerate() {
            let d = dx.row(t);
            for (a, b) in grads.token_embedding.row_mut(id as usize).iter_mut().zip(d) {
                *a += b;
            }
            for (a, b) in grads.position_embedding.row_mut(t).iter_mut().zip(d) {
                *a += b;
            }
        }
        Ok(total)
    }
}

impl Model {
    /// Value of `Σ weight · loss(objective)` without touching gradients.
    pub fn objective_loss(
        &self,
        output: &EncoderOutput,
        terms: &[(Objective<'_>, f64)],
    ) -> Result<f64> {
        let mut total = 0.0;
        for &(objective, weight) in terms {
            total += weight
                * match objective {
                    Objective::Constant(c) => c,
                    Objective::MaskedLm { positions, targets } => {
                        if positions.len() != targets.len() {
                            return Err(invalid("one target per masked position required"));
                        }
                        let logits = self.mlm_logits(output, positions)?;
                        let mut sum = 0.0;
                        for (lg, &t) in logits.iter().zip(targets) {
                            if t as usize >= self.config.vocab_size {
                                return Err(Error::UnknownTokenId(t));
                            }
                            sum += softmax_cross_entropy(lg, t as usize).0;
                        }
                        sum
                    }
                    Objective::Classification { label } => {
                        let logits = self.cls_logits(output)?;
                        if label >= logits.len() {
                            return Err(invalid(format!(
                                "label {label} outside {} classes",
                                logits.len()
                            )));
                        }
                        softmax_cross_entropy(&logits, label).0
                    }
                };
        }
        Ok(total)
    }
}

/// Worst agreement between analytic and numerical gradients within one
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero compare on absolute error instead.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compares [`Model::backward`] against central differences
/// `(L(θ+h) - L(θ-h)) / 2h` for every entry of every parameter tensor.
/// Relative error is `|a - n| / max(|a|, |n|, GRADIENT_CHECK_FLOOR)`.
pub fn finite_difference_check(
    model: &Model,
    ids: &[u32],
    attended_len: usize,
    terms: &[(Objective<'_>, f64)],
    h: f64,
) -> Result<Vec<GradientCheck>> {
    let out = model.forward(ids, attended_len, None)?;
    let mut grads = model.params.zeros_like();
    model.backward(&out, terms, &mut grads)?;
    let mut analytic = Vec::new();
    grads.for_each(|name, m| analytic.push((name.to_string(), m.data().to_vec())));

    let mut probe = model.clone();
    let mut reports = Vec::new();
    for (tensor_index, (name, analytic_values)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (entry, &a) in analytic_values.iter().enumerate() {
            let numeric = {
                let mut eval = |delta: f64| -> Result<f64> {
                    nudge(&mut probe.params, tensor_index, entry, delta);
                    let loss = probe
                        .forward(ids, attended_len, None)
                        .and_then(|o| probe.objective_loss(&o, terms));
                    nudge(&mut probe.params, tensor_index, entry, -delta);
                    loss
                };
                (eval(h)? - eval(-h)?) / (2.0 * h)
            };
            let denom = a.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
            max_abs = max_abs.max(a.abs());
        }
        reports.push(GradientCheck {
            name: name.clone(),
            entries: analytic_values.len(),
            max_relative_error: worst,
            max_abs_gradient: max_abs,
        });
    }
    Ok(reports)
}

fn nudge(params: &mut Parameters, tensor_index: usize, entry: usize, delta: f64) {
    let mut i = 0;
    params.for_each_mut(|_, m| {
        if i == tensor_index {
            m.data_mut()[entry] += delta;
        }
        i += 1;
    });
}

/// Fills in the single `<mask>` in `text` and returns the `k` most likely
/// tokens with their probabilities, highest first.
pub fn predict_top_k(
    model: &Model,
    tokenizer: &Tokenizer,
    text: &str,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let sentinel = tokenizer.vocab().specials().mask.clone();
    let parts: Vec<&str> = text.split(sentinel.as_str()).collect();
    if parts.len() != 2 {
        return Err(invalid(format!(
            "text must contain exactly one {sentinel} sentinel, found {}",
            parts.len() - 1
        )));
    }
    let mut ids = tokenizer.encode(parts[0]);
    let position = ids.len();
    ids.push(MASK_ID);
    ids.extend(tokenizer.encode(parts[1]));
    let output = model.forward_encoder(&ids)?;
    let logits = model.mlm_logits(&output, &[position])?;
    let probs = softmax(&logits[0]);
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(id, p)| (tokenizer.display_token(id as u32), p))
        .collect())
}
