//! Sequence encoders and MLP output heads.
//!
//! Two encoder kinds are provided: a permutation-invariant mean-pool + MLP encoder and
//! an order-sensitive gated recurrent (GRU) encoder. Both map a token sequence to a
//! vector of `embed_dim` entries. The same types serve the frozen auxiliary encoder
//! and the trainable main encoder; they differ only in the parameter ids they own.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{xavier_uniform, AutodiffError, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Default cap on sequence length; longer inputs keep their most recent tokens.
pub const DEFAULT_MAX_LEN: usize = 300;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence {index} is empty")]
    EmptySequence { index: usize },
    #[error("sequence {index}: token {token} at position {position} is outside the vocabulary of {vocab}")]
    OutOfVocab {
        index: usize,
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("vector has {got} entries, expected {expected}")]
    Dim { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    MeanPoolMlp,
    GatedRecurrent,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::MeanPoolMlp => "mean-pool-mlp",
            EncoderKind::GatedRecurrent => "gated-recurrent",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean-pool-mlp" => Ok(EncoderKind::MeanPoolMlp),
            "gated-recurrent" => Ok(EncoderKind::GatedRecurrent),
            other => Err(format!("unknown encoder kind '{other}' (mean-pool-mlp | gated-recurrent)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub kind: EncoderKind,
    pub mlp_hidden: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 653,
            embed_dim: 64,
            kind: EncoderKind::MeanPoolMlp,
            mlp_hidden: 64,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// A ragged batch of token sequences, already validated and truncated.
#[derive(Clone, Debug, Default)]
pub struct SeqBatch {
    tokens: Vec<u32>,
    offsets: Vec<usize>,
}

impl SeqBatch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S], vocab_size: usize, max_len: usize) -> Result<Self, EncoderError> {
        let mut tokens = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        offsets.push(0);
        for (index, seq) in seqs.iter().enumerate() {
            let seq = seq.as_ref();
            if seq.is_empty() {
                return Err(EncoderError::EmptySequence { index });
            }
            if let Some(position) = seq.iter().position(|&t| t as usize >= vocab_size) {
                return Err(EncoderError::OutOfVocab {
                    index,
                    position,
                    token: seq[position],
                    vocab: vocab_size,
                });
            }
            let start = seq.len().saturating_sub(max_len.max(1));
            tokens.extend_from_slice(&seq[start..]);
            offsets.push(tokens.len());
        }
        Ok(Self { tokens, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq(&self, i: usize) -> &[u32] {
        &self.tokens[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Affine map `y = x W^T + b` with `W` stored `out x in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier_uniform(out_dim, in_dim, rng));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// MLP mapping `in_dim -> 1`: `depth` tanh hidden layers of width `in_dim`, then a
/// linear logit layer.
#[derive(Clone, Debug)]
pub struct OutputHead {
    layers: Vec<Linear>,
}

impl OutputHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        depth: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        for i in 0..depth {
            layers.push(Linear::new(store, rng, &format!("{name}.hidden{i}"), in_dim, in_dim));
        }
        layers.push(Linear::new(store, rng, &format!("{name}.logit"), in_dim, 1));
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Logits `[n x 1]` for representations `[n x in_dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Logit for a single representation vector.
pub fn predict_logit<T: Real>(head: &OutputHead, store: &ParamStore<T>, vector: &[T]) -> Result<T, EncoderError> {
    if vector.len() != head.in_dim() {
        return Err(EncoderError::Dim {
            expected: head.in_dim(),
            got: vector.len(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(vector.to_vec()));
    let y = head.forward(&mut tape, store, x)?;
    Ok(tape.scalar(y))
}

#[derive(Clone, Debug)]
struct GruCell {
    wz: Linear,
    wr: Linear,
    wn: Linear,
    uz: ParamId,
    ur: ParamId,
    un: ParamId,
}

#[derive(Clone, Debug)]
enum Body {
    MeanPool { hidden: Linear, out: Linear },
    Recurrent(GruCell),
}

#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    config: EncoderConfig,
    embedding: ParamId,
    body: Body,
}

impl SequenceEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: EncoderConfig,
    ) -> Self {
        assert!(config.embed_dim > 0 && config.vocab_size > 0, "encoder dims must be positive");
        let d = config.embed_dim;
        let embedding = store.register(format!("{name}.embedding"), xavier_uniform(config.vocab_size, d, rng));
        let body = match config.kind {
            EncoderKind::MeanPoolMlp => Body::MeanPool {
                hidden: Linear::new(store, rng, &format!("{name}.mlp0"), d, config.mlp_hidden),
                out: Linear::new(store, rng, &format!("{name}.mlp1"), config.mlp_hidden, d),
            },
            EncoderKind::GatedRecurrent => {
                let wz = Linear::new(store, rng, &format!("{name}.gru.z"), d, d);
                let wr = Linear::new(store, rng, &format!("{name}.gru.r"), d, d);
                let wn = Linear::new(store, rng, &format!("{name}.gru.n"), d, d);
                let uz = store.register(format!("{name}.gru.uz"), xavier_uniform(d, d, rng));
                let ur = store.register(format!("{name}.gru.ur"), xavier_uniform(d, d, rng));
                let un = store.register(format!("{name}.gru.un"), xavier_uniform(d, d, rng));
                Body::Recurrent(GruCell { wz, wr, wn, uz, ur, un })
            }
        };
        Self { config, embedding, body }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        match &self.body {
            Body::MeanPool { hidden, out } => {
                ids.extend(hidden.params());
                ids.extend(out.params());
            }
            Body::Recurrent(c) => {
                ids.extend(c.wz.params());
                ids.extend(c.wr.params());
                ids.extend(c.wn.params());
                ids.extend([c.uz, c.ur, c.un]);
            }
        }
        ids
    }

    pub fn batch<S: AsRef<[u32]>>(&self, seqs: &[S]) -> Result<SeqBatch, EncoderError> {
        SeqBatch::new(seqs, self.config.vocab_size, self.config.max_len)
    }

    /// Representations `[batch x embed_dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &SeqBatch) -> Result<Var, AutodiffError> {
        let table = tape.param(store, self.embedding);
        match &self.body {
            Body::MeanPool { hidden, out } => {
                let pooled = tape.embedding_bag_mean(table, &batch.tokens, &batch.offsets)?;
                let h = hidden.forward(tape, store, pooled)?;
                let h = tape.tanh(h);
                let o = out.forward(tape, store, h)?;
                Ok(tape.tanh(o))
            }
            Body::Recurrent(cell) => self.forward_gru(cell, tape, store, table, batch),
        }
    }

    fn forward_gru<T: Real>(
        &self,
        cell: &GruCell,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        table: Var,
        batch: &SeqBatch,
    ) -> Result<Var, AutodiffError> {
        let b = batch.len();
        let d = self.config.embed_dim;
        let steps = (0..b).map(|i| batch.seq(i).len()).max().unwrap_or(0);
        let uz = tape.param(store, cell.uz);
        let ur = tape.param(store, cell.ur);
        let un = tape.param(store, cell.un);
        let mut h = tape.constant(Tensor::zeros(&[b, d]));
        for t in 0..steps {
            let mut index = Vec::with_capacity(b);
            let mut mask = Vec::with_capacity(b);
            for i in 0..b {
                let seq = batch.seq(i);
                if t < seq.len() {
                    index.push(seq[t] as usize);
                    mask.push(T::one());
                } else {
                    index.push(0);
                    mask.push(T::zero());
                }
            }
            let x = tape.gather_rows(table, &index)?;

            let xz = cell.wz.forward(tape, store, x)?;
            let hz = tape.matmul_nt(h, uz)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);

            let xr = cell.wr.forward(tape, store, x)?;
            let hr = tape.matmul_nt(h, ur)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);

            let xn = cell.wn.forward(tape, store, x)?;
            let hn = tape.matmul_nt(h, un)?;
            let rhn = tape.mul(r, hn)?;
            let n = tape.add(xn, rhn)?;
            let n = tape.tanh(n);

            // h' = n + z * (h - n); masked rows keep h.
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            let cand = tape.add(n, zd)?;
            let step = tape.sub(cand, h)?;
            let m = tape.constant(Tensor::column(mask));
            let step = tape.mul_col(step, m)?;
            h = tape.add(h, step)?;
        }
        Ok(h)
    }

    /// Encodes sequences without recording gradients; one row per sequence.
    pub fn encode_batch<T: Real, S: AsRef<[u32]>>(&self, store: &ParamStore<T>, seqs: &[S]) -> Result<Vec<Vec<T>>, EncoderError> {
        let batch = self.batch(seqs)?;
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, store, &batch)?;
        let out = tape.value(h);
        Ok((0..batch.len()).map(|i| out.row_slice(i).to_vec()).collect())
    }

    pub fn encode<T: Real>(&self, store: &ParamStore<T>, seq: &[u32]) -> Result<Vec<T>, EncoderError> {
        Ok(self.encode_batch(store, &[seq])?.remove(0))
    }
}
