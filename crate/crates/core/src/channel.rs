//! The emergent-language channel.
//!
//! The Sender reads the backbone features and emits a sentence of
//! `sentence_length` discrete symbols, relaxed with Gumbel-Softmax during
//! training so gradients reach it. The Receiver reads the sentence back
//! into a small conditioning vector `x'`, and the fusion head combines
//! `x` and `x'` into the final mask probabilities.
//!
//! Symbol id 0 is the start token and is never emitted.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{argmax, Tape, Tensor, Var};
use crate::params::{ForwardPass, Mode, ParamStore};

/// Log-probabilities are clamped here before the Gumbel perturbation.
pub const MIN_PROB: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub const START: u32 = 0;

    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary size must be at least 2, got {size}")));
        }
        Ok(Self { size })
    }

    pub fn size(self) -> usize {
        self.size
    }

    /// Number of emittable (non-start) symbols.
    pub fn content_size(self) -> usize {
        self.size - 1
    }

    pub fn contains(self, id: u32) -> bool {
        (id as usize) < self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SenderInput {
    /// Global average pooling over the spatial grid.
    Pool,
    /// Row-major flattening of the whole feature map.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub sentence_length: usize,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub cell_size: usize,
    pub num_lstm_layers: usize,
    pub embedding_dim: usize,
    pub temperature: f64,
    pub straight_through: bool,
    /// Width of the Receiver output `x'`.
    pub receiver_dim: usize,
    pub sender_input: SenderInput,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            sentence_length: 10,
            vocab_size: 64,
            hidden_size: 64,
            cell_size: 64,
            num_lstm_layers: 2,
            embedding_dim: 32,
            temperature: 1.0,
            straight_through: false,
            receiver_dim: 4,
            sender_input: SenderInput::Pool,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab_size)?;
        if self.sentence_length == 0 {
            return Err(Error::Config("sentence_length must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.hidden_size == 0 || self.cell_size == 0 || self.num_lstm_layers == 0 || self.embedding_dim == 0 || self.receiver_dim == 0 {
            return Err(Error::Config("channel widths and layer count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary { size: self.vocab_size }
    }
}

/// A fixed-length sequence of symbol ids, with the relaxed simplex vectors
/// that produced them when it came from a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub ids: Vec<u32>,
    pub relaxed: Option<Vec<Vec<f64>>>,
}

pub struct SenderOutput {
    pub sentences: Vec<Sentence>,
    /// Per step, the `[N, vocab_size]` symbol vectors fed downstream.
    pub symbols: Vec<Var>,
    /// Hidden state after consuming the last symbol, `[N, hidden_size]`.
    pub h_last: Var,
}

/// Gumbel(0, 1) draws via `-ln(-ln u)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            -(-u.max(f64::MIN_POSITIVE).ln()).ln()
        })
        .collect()
}

/// `softmax((log p_i + g_i) / tau)` on plain slices.
pub fn gumbel_softmax(p: &[f64], tau: f64, g: &[f64]) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if p.len() != g.len() || p.is_empty() {
        return Err(Error::shape("gumbel_softmax", format!("p has {} entries, g has {}", p.len(), g.len())));
    }
    let z: Vec<f64> = p
        .iter()
        .zip(g)
        .map(|(&pi, &gi)| (pi.max(MIN_PROB).ln() + gi) / tau)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Tape version of [`gumbel_softmax`] over the last axis of a 2-d `p`,
/// differentiable with respect to `p`.
pub fn gumbel_softmax_var(tape: &mut Tape, p: Var, tau: f64, g: &[f64]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(p).to_vec();
    if shape.len() != 2 || g.len() != shape[0] * shape[1] {
        return Err(Error::shape("gumbel_softmax", format!("noise length {} does not fit {:?}", g.len(), shape)));
    }
    let clamped = tape.clamp_min(p, MIN_PROB)?;
    let logp = tape.log(clamped)?;
    let noise = tape.constant(Tensor::new(shape, g.to_vec())?)?;
    let z = tape.add(logp, noise)?;
    let z = tape.mul_scalar(z, 1.0 / tau)?;
    tape.softmax(z, 1)
}

fn init_lstm<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cfg: &ChannelConfig, input: usize) -> Result<()> {
    let (h, c) = (cfg.hidden_size, cfg.cell_size);
    for l in 0..cfg.num_lstm_layers {
        let inp = if l == 0 { input } else { h };
        let p = format!("{prefix}.lstm{l}");
        store.init_uniform(rng, &format!("{p}.w_ih"), &[inp, 4 * c], inp)?;
        store.init_uniform(rng, &format!("{p}.w_hh"), &[h, 4 * c], h)?;
        store.init_uniform(rng, &format!("{p}.bias"), &[4 * c], h)?;
        if c != h {
            store.init_uniform(rng, &format!("{p}.proj"), &[c, h], c)?;
        }
    }
    Ok(())
}

/// Sender, Receiver and fusion-head parameters for features with
/// `feature_channels` channels on a `spatial` grid.
pub fn init_params<R: Rng>(
    cfg: &ChannelConfig,
    feature_channels: usize,
    spatial: [usize; 2],
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let (v, e, h) = (cfg.vocab_size, cfg.embedding_dim, cfg.hidden_size);
    let sender_in = match cfg.sender_input {
        SenderInput::Pool => feature_channels,
        SenderInput::Flatten => feature_channels * spatial[0] * spatial[1],
    };
    store.init_uniform(rng, "sender.input.weight", &[sender_in, e], sender_in)?;
    store.init_uniform(rng, "sender.input.bias", &[e], sender_in)?;
    store.init_uniform(rng, "sender.embedding", &[v, e], v)?;
    init_lstm(store, rng, "sender", cfg, e)?;
    store.init_uniform(rng, "sender.output.weight", &[h, v - 1], h)?;
    store.init_uniform(rng, "sender.output.bias", &[v - 1], h)?;

    store.init_uniform(rng, "receiver.embedding", &[v - 1, e], v - 1)?;
    init_lstm(store, rng, "receiver", cfg, e)?;
    store.init_uniform(rng, "receiver.output.weight", &[h, cfg.receiver_dim], h)?;
    store.init_uniform(rng, "receiver.output.bias", &[cfg.receiver_dim], h)?;

    let fused = feature_channels + cfg.receiver_dim;
    store.init_uniform(rng, "fusion.conv.weight", &[1, fused, 1, 1], fused)?;
    store.init_batch_norm("fusion.bn", 1)
}

/// Stacked LSTM state, one `(h, c)` pair per layer.
struct Stack {
    prefix: &'static str,
    h: Vec<Var>,
    c: Vec<Var>,
}

impl Stack {
    fn zeros(pass: &mut ForwardPass<'_>, prefix: &'static str, cfg: &ChannelConfig, batch: usize) -> Result<Self> {
        let mut h = Vec::new();
        let mut c = Vec::new();
        for _ in 0..cfg.num_lstm_layers {
            h.push(pass.tape.constant(Tensor::zeros([batch, cfg.hidden_size]))?);
            c.push(pass.tape.constant(Tensor::zeros([batch, cfg.cell_size]))?);
        }
        Ok(Self { prefix, h, c })
    }

    /// Feeds `input` through every layer; returns the top hidden state.
    fn step(&mut self, pass: &mut ForwardPass<'_>, input: Var) -> Result<Var> {
        let mut x = input;
        for l in 0..self.h.len() {
            let p = format!("{}.lstm{l}", self.prefix);
            let w = crate::grad::LstmWeights {
                w_ih: pass.param(&format!("{p}.w_ih"))?,
                w_hh: pass.param(&format!("{p}.w_hh"))?,
                bias: pass.param(&format!("{p}.bias"))?,
                proj: if pass.store().contains(&format!("{p}.proj")) {
                    Some(pass.param(&format!("{p}.proj"))?)
                } else {
                    None
                },
            };
            let (h, c) = crate::grad::lstm_step(&mut pass.tape, x, self.h[l], self.c[l], &w)?;
            self.h[l] = h;
            self.c[l] = c;
            x = h;
        }
        Ok(x)
    }
}

fn one_hot_rows(rows: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros([rows.len(), width]);
    for (r, &k) in rows.iter().enumerate() {
        t.data_mut()[r * width + k] = 1.0;
    }
    t
}

/// Sender: features `[N, C_x, H, W]` to one sentence per batch item.
///
/// Training mode draws Gumbel noise from `rng` (required) and feeds the
/// relaxed symbol vectors forward; inference takes the argmax of each step's
/// distribution and feeds its exact one-hot vector.
pub fn sender_forward<R: Rng + ?Sized>(
    pass: &mut ForwardPass<'_>,
    cfg: &ChannelConfig,
    x: Var,
    tau: f64,
    rng: Option<&mut R>,
) -> Result<SenderOutput> {
    let mode = pass.mode();
    let mut rng = match (mode, rng) {
        (Mode::Train, None) => {
            return Err(Error::Config("training-mode sender needs a seeded rng".into()));
        }
        (_, r) => r,
    };
    if mode == Mode::Train && !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let s = pass.tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("sender", format!("expected [N,C,H,W] features, got {:?}", s)));
    }
    let n = s[0];
    let (v, content) = (cfg.vocab_size, cfg.vocab_size - 1);

    let feat = match cfg.sender_input {
        SenderInput::Pool => pass.tape.global_avg_pool(x)?,
        SenderInput::Flatten => pass.tape.reshape(x, &[n, s[1] * s[2] * s[3]])?,
    };
    let projected = pass.linear(feat, "sender.input")?;
    let emb = pass.param("sender.embedding")?;
    let start = pass.tape.constant(one_hot_rows(&vec![Vocabulary::START as usize; n], v))?;
    let start = pass.tape.matmul(start, emb)?;
    let mut input = pass.tape.add(projected, start)?;

    let mut stack = Stack::zeros(pass, "sender", cfg, n)?;
    let zero_col = pass.tape.constant(Tensor::zeros([n, 1]))?;
    let mut ids = vec![Vec::with_capacity(cfg.sentence_length); n];
    let mut relaxed = vec![Vec::with_capacity(cfg.sentence_length); n];
    let mut symbols = Vec::with_capacity(cfg.sentence_length);

    for _ in 0..cfg.sentence_length {
        let top = stack.step(pass, input)?;
        let logits = pass.linear(top, "sender.output")?;
        let p = pass.tape.softmax(logits, 1)?;
        let y = match mode {
            Mode::Train => {
                let g = sample_gumbel(rng.as_deref_mut().expect("checked above"), n * content);
                let soft = gumbel_softmax_var(&mut pass.tape, p, tau, &g)?;
                for (b, row) in pass.tape.data(soft).chunks(content).enumerate() {
                    ids[b].push(argmax(row) as u32 + 1);
                    let mut full = Vec::with_capacity(v);
                    full.push(0.0);
                    full.extend_from_slice(row);
                    relaxed[b].push(full);
                }
                if cfg.straight_through {
                    pass.tape.straight_through(soft)?
                } else {
                    soft
                }
            }
            Mode::Infer => {
                let picks: Vec<usize> = pass.tape.data(p).chunks(content).map(argmax).collect();
                for (b, &k) in picks.iter().enumerate() {
                    ids[b].push(k as u32 + 1);
                }
                pass.tape.constant(one_hot_rows(&picks, content))?
            }
        };
        let full = pass.tape.concat(&[zero_col, y], 1)?;
        symbols.push(full);
        input = pass.tape.matmul(full, emb)?;
    }
    let h_last = stack.step(pass, input)?;

    let sentences = ids
        .into_iter()
        .zip(relaxed)
        .map(|(ids, rel)| Sentence {
            ids,
            relaxed: (mode == Mode::Train).then_some(rel),
        })
        .collect();
    Ok(SenderOutput {
        sentences,
        symbols,
        h_last,
    })
}

/// Places sentences on the tape as per-step `[N, vocab_size]` symbol
/// vectors: relaxed vectors when present and `prefer_relaxed`, exact
/// one-hots otherwise. `track` makes them differentiable leaves.
pub fn symbol_inputs(
    tape: &mut Tape,
    cfg: &ChannelConfig,
    sentences: &[Sentence],
    prefer_relaxed: bool,
    track: bool,
) -> Result<Vec<Var>> {
    let vocab = cfg.vocabulary();
    let (n, v) = (sentences.len(), cfg.vocab_size);
    for s in sentences {
        if s.ids.len() != cfg.sentence_length {
            return Err(Error::shape(
                "receiver",
                format!("sentence length {} != {}", s.ids.len(), cfg.sentence_length),
            ));
        }
        if let Some(&bad) = s.ids.iter().find(|&&id| !vocab.contains(id)) {
            return Err(Error::InvalidArgument(format!("symbol {bad} outside vocabulary of {v}")));
        }
    }
    (0..cfg.sentence_length)
        .map(|step| {
            let mut data = vec![0.0; n * v];
            for (b, s) in sentences.iter().enumerate() {
                let row = &mut data[b * v..(b + 1) * v];
                match (&s.relaxed, prefer_relaxed) {
                    (Some(rel), true) => row.copy_from_slice(&rel[step]),
                    _ => row[s.ids[step] as usize] = 1.0,
                }
            }
            tape.leaf(Tensor::new([n, v], data)?.with_requires_grad(track))
        })
        .collect()
}

/// Receiver: per-step symbol vectors to `x'` of shape `[N, receiver_dim]`.
pub fn receiver_forward(pass: &mut ForwardPass<'_>, cfg: &ChannelConfig, symbols: &[Var]) -> Result<Var> {
    if symbols.len() != cfg.sentence_length {
        return Err(Error::shape(
            "receiver",
            format!("sentence length {} != {}", symbols.len(), cfg.sentence_length),
        ));
    }
    let n = pass.tape.shape(symbols[0])[0];
    let emb = pass.param("receiver.embedding")?;
    let mut stack = Stack::zeros(pass, "receiver", cfg, n)?;
    let mut top = stack.h[cfg.num_lstm_layers - 1];
    for &sym in symbols {
        if pass.tape.shape(sym) != [n, cfg.vocab_size] {
            return Err(Error::shape(
                "receiver",
                format!("symbol vector {:?}, expected [{n}, {}]", pass.tape.shape(sym), cfg.vocab_size),
            ));
        }
        let content = pass.tape.slice(sym, 1, 1, cfg.vocab_size - 1)?;
        let e = pass.tape.matmul(content, emb)?;
        top = stack.step(pass, e)?;
    }
    pass.linear(top, "receiver.output")
}

/// Fusion head: `sigmoid(BN(conv1x1(concat(x, broadcast(x')))))`.
pub fn fuse(pass: &mut ForwardPass<'_>, x: Var, x_prime: Var) -> Result<Var> {
    let (sx, sp) = (pass.tape.shape(x).to_vec(), pass.tape.shape(x_prime).to_vec());
    if sx.len() != 4 || sp.len() != 2 || sx[0] != sp[0] {
        return Err(Error::shape("fuse", format!("cannot fuse x {:?} with x' {:?}", sx, sp)));
    }
    let b = pass.tape.broadcast_spatial(x_prime, sx[2], sx[3])?;
    let cat = pass.tape.concat(&[x, b], 1)?;
    let y = pass.conv(cat, "fusion.conv", 0)?;
    let y = pass.batch_norm(y, "fusion.bn")?;
    pass.tape.sigmoid(y)
}

/// One line of a sentence log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub sample_id: String,
    pub slice_index: u32,
    pub ids: Vec<u32>,
    pub mode: String,
}

pub fn write_jsonl(path: &Path, records: &[SentenceRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SentenceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut offset = 0u64;
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let r = serde_json::from_str(&line).map_err(|e| Error::parse(path, offset, e.to_string()))?;
            records.push(r);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(records)
}
