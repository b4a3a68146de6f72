//! Listen-attend-spell network with categorical conditioning.
//!
//! Encoder: stacked bidirectional LSTM layers, each followed by a linear
//! projection; after the first layer `N` adjacent frames are concatenated, so
//! the memory has `T = ceil(L / N)` rows (the last group is zero-padded).
//!
//! Attention: per head, additive scoring `vᵀ tanh(W_m h_j + W_q s + b)`
//! softmax-normalized over memory rows; head contexts are concatenated and
//! projected to the attention width.
//!
//! Decoder step `i`: attend with the previous top-layer state, feed
//! `[embed(y_{i-1}), c_i, e_dec]` through the LSTM stack, then
//! `logits = W_o tanh(W_g [s_i, c_i] + b_g) + b_o`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{lstm_from_preact, Graph, Var};
use crate::bpe::SOS;
use crate::conditioning::{self, inject_decoder, inject_encoder, CategoricalFeature, CategoricalSpec, CondLayout, Site};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum InjectionMode {
    #[default]
    None,
    Encoder,
    Decoder,
    Both,
}

impl InjectionMode {
    pub fn encoder(self) -> bool {
        matches!(self, InjectionMode::Encoder | InjectionMode::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, InjectionMode::Decoder | InjectionMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            InjectionMode::None => "none",
            InjectionMode::Encoder => "encoder",
            InjectionMode::Decoder => "decoder",
            InjectionMode::Both => "both",
        }
    }
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => InjectionMode::None,
            "encoder" | "enc" => InjectionMode::Encoder,
            "decoder" | "dec" => InjectionMode::Decoder,
            "both" => InjectionMode::Both,
            other => {
                return Err(Error::Config(format!(
                    "unknown injection mode `{other}` (none, encoder, decoder, both)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub enc_cells: usize,
    pub enc_proj: usize,
    pub reduction: usize,
    pub att_heads: usize,
    pub att_dim: usize,
    pub dec_layers: usize,
    pub dec_cells: usize,
    pub vocab_size: usize,
    pub d_feat: usize,
    pub inject: InjectionMode,
    pub cond: CategoricalSpec,
    pub cond_enc_dim: usize,
    pub cond_dec_dim: usize,
}

impl ModelConfig {
    /// CPU-sized network: 2×32 bi-LSTM encoder, 2-head 32-dim attention,
    /// one 32-cell decoder layer.
    pub fn desk(vocab_size: usize, d_feat: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            enc_cells: 32,
            enc_proj: 32,
            reduction: 2,
            att_heads: 2,
            att_dim: 32,
            dec_layers: 1,
            dec_cells: 32,
            vocab_size,
            d_feat,
            inject: InjectionMode::None,
            cond: CategoricalSpec::dialect_domain(8),
            cond_enc_dim: 4,
            cond_dec_dim: 8,
        }
    }

    /// Production-sized network: 5×1200 bi-LSTM with 600-dim projections,
    /// 4-head 1200-dim attention, 2×800 decoder, 19k output tokens, 80-dim
    /// inputs and 80-dim category tables transformed to 20 (encoder) and
    /// 160 (decoder).
    pub fn paper() -> Self {
        ModelConfig {
            enc_layers: 5,
            enc_cells: 1200,
            enc_proj: 600,
            reduction: 2,
            att_heads: 4,
            att_dim: 1200,
            dec_layers: 2,
            dec_cells: 800,
            vocab_size: 19_000,
            d_feat: 80,
            inject: InjectionMode::None,
            cond: CategoricalSpec::dialect_domain(80),
            cond_enc_dim: 20,
            cond_dec_dim: 160,
        }
    }

    pub fn with_inject(mut self, inject: InjectionMode) -> Self {
        self.inject = inject;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("enc_layers", self.enc_layers),
            ("enc_cells", self.enc_cells),
            ("enc_proj", self.enc_proj),
            ("reduction", self.reduction),
            ("att_heads", self.att_heads),
            ("att_dim", self.att_dim),
            ("dec_layers", self.dec_layers),
            ("dec_cells", self.dec_cells),
            ("vocab_size", self.vocab_size),
            ("d_feat", self.d_feat),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model dimension `{name}` must be positive")));
        }
        if !self.att_dim.is_multiple_of(self.att_heads) {
            return Err(Error::Config("att_dim must be divisible by att_heads".into()));
        }
        if self.inject != InjectionMode::None {
            self.cond.validate()?;
            if (self.inject.encoder() && self.cond_enc_dim == 0)
                || (self.inject.decoder() && self.cond_dec_dim == 0)
            {
                return Err(Error::Config("active injection sites need a positive width".into()));
            }
        }
        Ok(())
    }

    fn enc_inj(&self) -> Option<usize> {
        self.inject.encoder().then_some(self.cond_enc_dim)
    }

    fn dec_inj(&self) -> Option<usize> {
        self.inject.decoder().then_some(self.cond_dec_dim)
    }

    /// Width of the encoder input after conditioning.
    pub fn encoder_input_dim(&self) -> usize {
        self.d_feat + self.enc_inj().unwrap_or(0)
    }

    /// Width of the memory rows.
    pub fn memory_dim(&self) -> usize {
        if self.enc_layers == 1 {
            self.enc_proj * self.reduction
        } else {
            self.enc_proj
        }
    }

    pub fn encoder_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.reduction)
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let f = self
            .cond
            .features
            .iter()
            .map(|f| format!("{}:{}:{}", f.name, f.cardinality, f.emb_dim))
            .collect::<Vec<_>>()
            .join(",");
        for (k, v) in [
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_cells", self.enc_cells.to_string()),
            ("enc_proj", self.enc_proj.to_string()),
            ("reduction", self.reduction.to_string()),
            ("att_heads", self.att_heads.to_string()),
            ("att_dim", self.att_dim.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("dec_cells", self.dec_cells.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("d_feat", self.d_feat.to_string()),
            ("inject", self.inject.name().to_string()),
            ("cond_features", f),
            ("cond_enc_dim", self.cond_enc_dim.to_string()),
            ("cond_dec_dim", self.cond_dec_dim.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| {
            kv.remove(k)
                .ok_or_else(|| Error::Config(format!("model config is missing `{k}`")))
        };
        let num = |s: String, k: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("`{k}` must be a non-negative integer")))
        };
        let mut c = ModelConfig::desk(1, 1);
        c.enc_layers = num(take("enc_layers")?, "enc_layers")?;
        c.enc_cells = num(take("enc_cells")?, "enc_cells")?;
        c.enc_proj = num(take("enc_proj")?, "enc_proj")?;
        c.reduction = num(take("reduction")?, "reduction")?;
        c.att_heads = num(take("att_heads")?, "att_heads")?;
        c.att_dim = num(take("att_dim")?, "att_dim")?;
        c.dec_layers = num(take("dec_layers")?, "dec_layers")?;
        c.dec_cells = num(take("dec_cells")?, "dec_cells")?;
        c.vocab_size = num(take("vocab_size")?, "vocab_size")?;
        c.d_feat = num(take("d_feat")?, "d_feat")?;
        c.inject = take("inject")?.parse()?;
        c.cond = parse_features(&take("cond_features")?)?;
        c.cond_enc_dim = num(take("cond_enc_dim")?, "cond_enc_dim")?;
        c.cond_dec_dim = num(take("cond_dec_dim")?, "cond_dec_dim")?;
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown model config key `{k}`")));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `name:cardinality:emb_dim[,…]`.
pub fn parse_features(s: &str) -> Result<CategoricalSpec> {
    let mut features = Vec::new();
    for item in s.split(',').filter(|p| !p.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let bad = || Error::Config(format!("bad categorical feature `{item}` (name:cardinality:dim)"));
        if parts.len() != 3 {
            return Err(bad());
        }
        features.push(CategoricalFeature {
            name: parts[0].to_string(),
            cardinality: parts[1].parse().map_err(|_| bad())?,
            emb_dim: parts[2].parse().map_err(|_| bad())?,
        });
    }
    let spec = CategoricalSpec { features };
    spec.validate()?;
    Ok(spec)
}

fn lstm_specs(prefix: &str, d_in: usize, cells: usize, out: &mut Vec<ParamSpec>) {
    let a = 1.0 / (cells as f64).sqrt();
    out.push(ParamSpec::new(format!("{prefix}.wx"), vec![d_in, 4 * cells], Init::Uniform(a)));
    out.push(ParamSpec::new(format!("{prefix}.wh"), vec![cells, 4 * cells], Init::Uniform(a)));
    out.push(ParamSpec::new(format!("{prefix}.b"), vec![4 * cells], Init::ForgetBias));
}

/// Every parameter of the network, in checkpoint order.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let mut d_in = c.encoder_input_dim();
    for l in 0..c.enc_layers {
        for dir in ["fw", "bw"] {
            lstm_specs(&format!("enc.{l}.{dir}"), d_in, c.enc_cells, &mut s);
        }
        s.push(ParamSpec::new(format!("enc.{l}.proj.w"), vec![2 * c.enc_cells, c.enc_proj], Init::Glorot));
        s.push(ParamSpec::new(format!("enc.{l}.proj.b"), vec![c.enc_proj], Init::Zeros));
        d_in = if l == 0 { c.enc_proj * c.reduction } else { c.enc_proj };
    }
    let d_mem = c.memory_dim();
    let a_h = c.att_dim / c.att_heads;
    for k in 0..c.att_heads {
        s.push(ParamSpec::new(format!("att.{k}.wm"), vec![d_mem, a_h], Init::Glorot));
        s.push(ParamSpec::new(format!("att.{k}.wq"), vec![c.dec_cells, a_h], Init::Glorot));
        s.push(ParamSpec::new(format!("att.{k}.b"), vec![a_h], Init::Zeros));
        s.push(ParamSpec::new(format!("att.{k}.v"), vec![a_h, 1], Init::Glorot));
    }
    s.push(ParamSpec::new("att.out.w", vec![c.att_heads * d_mem, c.att_dim], Init::Glorot));
    s.push(ParamSpec::new("dec.emb", vec![c.vocab_size, c.dec_cells], Init::Normal(0.1)));
    let mut d_in = c.dec_cells + c.att_dim + c.dec_inj().unwrap_or(0);
    for l in 0..c.dec_layers {
        lstm_specs(&format!("dec.{l}"), d_in, c.dec_cells, &mut s);
        d_in = c.dec_cells;
    }
    s.push(ParamSpec::new("gen.hidden.w", vec![c.dec_cells + c.att_dim, c.dec_cells], Init::Glorot));
    s.push(ParamSpec::new("gen.hidden.b", vec![c.dec_cells], Init::Zeros));
    s.push(ParamSpec::new("gen.out.w", vec![c.dec_cells, c.vocab_size], Init::Glorot));
    s.push(ParamSpec::new("gen.out.b", vec![c.vocab_size], Init::Zeros));
    s.extend(conditioning::param_specs(&c.cond, c.enc_inj(), c.dec_inj()));
    s
}

/// Exact parameter count implied by the declared shapes.
pub fn count_params(c: &ModelConfig) -> usize {
    param_specs(c).iter().map(ParamSpec::numel).sum()
}

/// `count_params(with) − count_params(without)`.
pub fn param_delta(with: &ModelConfig, without: &ModelConfig) -> i64 {
    count_params(with) as i64 - count_params(without) as i64
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LstmIdx {
    wx: usize,
    wh: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct EncLayerIdx {
    fw: LstmIdx,
    bw: LstmIdx,
    proj_w: usize,
    proj_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadIdx {
    wm: usize,
    wq: usize,
    b: usize,
    v: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc: Vec<EncLayerIdx>,
    heads: Vec<HeadIdx>,
    att_out: usize,
    emb: usize,
    dec: Vec<LstmIdx>,
    gen_hw: usize,
    gen_hb: usize,
    gen_ow: usize,
    gen_ob: usize,
}

/// Encoder memory plus per-head key projections.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub memory: Var,
    pub len: usize,
    keys: Vec<Var>,
}

/// Decoder recurrent state after a step.
#[derive(Clone, Debug)]
pub struct DecoderStepState {
    /// `(h, c)` per decoder layer, each `[1 × dec_cells]`.
    pub layers: Vec<(Var, Var)>,
    /// Context vector that fed this state, `[1 × att_dim]`.
    pub context: Var,
    /// Attention weights per head, each `[1 × T]`.
    pub attention: Vec<Var>,
}

/// Encoder output and decoder-side conditioning for one utterance.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub enc: EncoderOutput,
    pub e_dec: Option<Var>,
}

/// Network structure: configuration plus parameter positions. Stateless;
/// parameter values are bound into a graph per forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LasNet {
    config: ModelConfig,
    layout: Layout,
    cond: CondLayout,
}

impl LasNet {
    pub fn new<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != store.len()
            || specs
                .iter()
                .zip(store.iter())
                .any(|(s, (n, t))| s.name != n || s.shape != t.shape())
        {
            return Err(Error::Contract(
                "parameter store does not match the model configuration".into(),
            ));
        }
        let p = |n: String| store.position(&n).expect("validated above");
        let lstm = |pre: String| LstmIdx {
            wx: p(format!("{pre}.wx")),
            wh: p(format!("{pre}.wh")),
            b: p(format!("{pre}.b")),
        };
        let layout = Layout {
            enc: (0..config.enc_layers)
                .map(|l| EncLayerIdx {
                    fw: lstm(format!("enc.{l}.fw")),
                    bw: lstm(format!("enc.{l}.bw")),
                    proj_w: p(format!("enc.{l}.proj.w")),
                    proj_b: p(format!("enc.{l}.proj.b")),
                })
                .collect(),
            heads: (0..config.att_heads)
                .map(|k| HeadIdx {
                    wm: p(format!("att.{k}.wm")),
                    wq: p(format!("att.{k}.wq")),
                    b: p(format!("att.{k}.b")),
                    v: p(format!("att.{k}.v")),
                })
                .collect(),
            att_out: p("att.out.w".into()),
            emb: p("dec.emb".into()),
            dec: (0..config.dec_layers).map(|l| lstm(format!("dec.{l}"))).collect(),
            gen_hw: p("gen.hidden.w".into()),
            gen_hb: p("gen.hidden.b".into()),
            gen_ow: p("gen.out.w".into()),
            gen_ob: p("gen.out.b".into()),
        };
        let cond = CondLayout::resolve(&config.cond, store, config.enc_inj(), config.dec_inj())?;
        Ok(LasNet {
            config: config.clone(),
            layout,
            cond,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn conditioning(&self) -> &CondLayout {
        &self.cond
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Vec<Var> {
        store
            .tensors()
            .iter()
            .map(|t| if trainable { g.leaf(&t.clone().with_grad(true)) } else { g.constant(t) })
            .collect()
    }

    fn run_lstm<T: Scalar>(&self, g: &mut Graph<T>, b: &[Var], idx: LstmIdx, x: Var, reverse: bool) -> Result<Var> {
        let rows = g.shape(x)[0];
        let cells = g.shape(b[idx.wh])[0];
        let xw = g.matmul(x, b[idx.wx])?;
        let xw = g.add_bias(xw, b[idx.b])?;
        let mut h = g.constant(&Tensor::zeros(&[1, cells]));
        let mut c = h;
        let mut outs = vec![h; rows];
        let order: Vec<usize> = if reverse { (0..rows).rev().collect() } else { (0..rows).collect() };
        for t in order {
            let zx = g.row(xw, t)?;
            let zh = g.matmul(h, b[idx.wh])?;
            let z = g.add(zx, zh)?;
            (h, c) = lstm_from_preact(g, z, c)?;
            outs[t] = h;
        }
        g.stack_rows(&outs)
    }

    /// Runs the encoder over `x` (`[L × encoder_input_dim]`).
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, b: &[Var], x: Var) -> Result<EncoderOutput> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != c.encoder_input_dim() {
            return Err(Error::dim("encode", &shape, &[0, c.encoder_input_dim()]));
        }
        let frames = shape[0];
        let mut h = x;
        for (l, layer) in self.layout.enc.iter().enumerate() {
            let f = self.run_lstm(g, b, layer.fw, h, false)?;
            let r = self.run_lstm(g, b, layer.bw, h, true)?;
            let both = g.concat(&[f, r], 1)?;
            let p = g.matmul(both, b[layer.proj_w])?;
            h = g.add_bias(p, b[layer.proj_b])?;
            if l == 0 && c.reduction > 1 {
                h = self.reduce(g, h, frames)?;
            }
        }
        let len = g.shape(h)[0];
        let keys = self
            .layout
            .heads
            .iter()
            .map(|hd| g.matmul(h, b[hd.wm]))
            .collect::<Result<_>>()?;
        Ok(EncoderOutput { memory: h, len, keys })
    }

    /// Concatenates groups of `N` frames, zero-padding the last group.
    fn reduce<T: Scalar>(&self, g: &mut Graph<T>, h: Var, frames: usize) -> Result<Var> {
        let n = self.config.reduction;
        let width = g.shape(h)[1];
        let t = frames.div_ceil(n);
        let pad = t * n - frames;
        let padded = if pad > 0 {
            let z = g.constant(&Tensor::zeros(&[pad, width]));
            g.concat(&[h, z], 0)?
        } else {
            h
        };
        g.reshape(padded, &[t, n * width])
    }

    /// Multi-head additive attention; returns the projected context and the
    /// per-head weights.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &[Var],
        enc: &EncoderOutput,
        query: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut ctxs = Vec::with_capacity(self.layout.heads.len());
        let mut betas = Vec::with_capacity(self.layout.heads.len());
        for (hd, &key) in self.layout.heads.iter().zip(&enc.keys) {
            let q = g.matmul(query, b[hd.wq])?;
            let pre = g.add_bias(key, q)?;
            let pre = g.add_bias(pre, b[hd.b])?;
            let act = g.tanh(pre);
            let scores = g.matmul(act, b[hd.v])?;
            let scores = g.reshape(scores, &[1, enc.len])?;
            let beta = g.softmax(scores, 1)?;
            ctxs.push(g.matmul(beta, enc.memory)?);
            betas.push(beta);
        }
        let cat = g.concat(&ctxs, 1)?;
        let ctx = g.matmul(cat, b[self.layout.att_out])?;
        Ok((ctx, betas))
    }

    pub fn initial_state<T: Scalar>(&self, g: &mut Graph<T>) -> DecoderStepState {
        let c = &self.config;
        let zero = g.constant(&Tensor::zeros(&[1, c.dec_cells]));
        let ctx = g.constant(&Tensor::zeros(&[1, c.att_dim]));
        DecoderStepState {
            layers: vec![(zero, zero); c.dec_layers],
            context: ctx,
            attention: Vec::new(),
        }
    }

    /// One decoder step from `y_prev`; returns the next state and `[1 × V]` logits.
    pub fn decode_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &[Var],
        enc: &EncoderOutput,
        y_prev: usize,
        state: &DecoderStepState,
        e_dec: Option<Var>,
    ) -> Result<(DecoderStepState, Var)> {
        if y_prev >= self.config.vocab_size {
            return Err(Error::Input(format!(
                "token id {y_prev} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let query = state.layers.last().expect("at least one decoder layer").0;
        let (ctx, attention) = self.attend(g, b, enc, query)?;
        let emb = g.row(b[self.layout.emb], y_prev)?;
        let ce = inject_decoder(g, ctx, e_dec)?;
        let mut input = g.concat(&[emb, ce], 1)?;
        let mut layers = Vec::with_capacity(state.layers.len());
        for (idx, &(h_prev, c_prev)) in self.layout.dec.iter().zip(&state.layers) {
            let xw = g.matmul(input, b[idx.wx])?;
            let hw = g.matmul(h_prev, b[idx.wh])?;
            let z = g.add(xw, hw)?;
            let z = g.add_bias(z, b[idx.b])?;
            let (h, c) = lstm_from_preact(g, z, c_prev)?;
            layers.push((h, c));
            input = h;
        }
        let sc = g.concat(&[input, ctx], 1)?;
        let hid = g.matmul(sc, b[self.layout.gen_hw])?;
        let hid = g.add_bias(hid, b[self.layout.gen_hb])?;
        let hid = g.tanh(hid);
        let logits = g.matmul(hid, b[self.layout.gen_ow])?;
        let logits = g.add_bias(logits, b[self.layout.gen_ob])?;
        Ok((
            DecoderStepState {
                layers,
                context: ctx,
                attention,
            },
            logits,
        ))
    }

    /// Builds conditioning vectors, injects them, and encodes `feats`.
    pub fn prepare<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &[Var],
        feats: &Tensor<T>,
        cond_ids: &[usize],
    ) -> Result<Prepared> {
        let inj = self.config.inject;
        let e_enc = if inj.encoder() {
            Some(self.cond.combine(g, b, Site::Encoder, cond_ids)?)
        } else {
            None
        };
        let e_dec = if inj.decoder() {
            Some(self.cond.combine(g, b, Site::Decoder, cond_ids)?)
        } else {
            None
        };
        let x = g.constant(feats);
        let x = inject_encoder(g, x, e_enc)?;
        let enc = self.encode(g, b, x)?;
        Ok(Prepared { enc, e_dec })
    }

    /// Runs the decoder over `targets.len()` steps. `choose_prev(i, logits)`
    /// picks the token fed at step `i ≥ 1` given the previous step's logits;
    /// step 0 is always fed `<sos>`.
    pub fn unroll<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &[Var],
        prep: &Prepared,
        steps: usize,
        mut choose_prev: impl FnMut(usize, &[T]) -> usize,
    ) -> Result<Vec<Var>> {
        let mut state = self.initial_state(g);
        let mut logits = Vec::with_capacity(steps);
        let mut prev = SOS;
        for i in 0..steps {
            if i > 0 {
                prev = choose_prev(i, g.value(logits[i - 1]));
            }
            let (next, l) = self.decode_step(g, b, &prep.enc, prev, &state, prep.e_dec)?;
            state = next;
            logits.push(l);
        }
        Ok(logits)
    }

    pub fn teacher_forced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &[Var],
        prep: &Prepared,
        targets: &[usize],
    ) -> Result<Vec<Var>> {
        self.unroll(g, b, prep, targets.len(), |i, _| targets[i - 1])
    }

    /// `log P(y | x)`: teacher-forced sum of per-step log probabilities.
    /// `targets` must already end with `<eos>`.
    pub fn sequence_log_prob<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &[Var],
        prep: &Prepared,
        targets: &[usize],
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Input("target sequence is empty".into()));
        }
        let logits = self.teacher_forced(g, b, prep, targets)?;
        let v = self.config.vocab_size;
        let stacked = g.stack_rows(&logits)?;
        let logp = g.log_softmax(stacked, 1)?;
        let mut w = vec![T::zero(); targets.len() * v];
        for (i, &y) in targets.iter().enumerate() {
            if y >= v {
                return Err(Error::Input(format!("target id {y} out of range")));
            }
            w[i * v + y] = T::one();
        }
        g.weighted_sum(logp, w)
    }
}

/// Frames of an utterance as a `[L × d]` tensor.
pub fn frames_tensor<T: Scalar>(features: &[f32], num_frames: usize, d_feat: usize) -> Result<Tensor<T>> {
    if num_frames == 0 {
        return Err(Error::Input("utterance has no frames".into()));
    }
    Tensor::new(
        vec![num_frames, d_feat],
        features.iter().map(|&x| T::lit(x as f64)).collect(),
    )
}

/// A network together with its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct LasModel<T> {
    pub net: LasNet,
    pub params: ParamStore<T>,
}

impl<T: Scalar> LasModel<T> {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::initialize(&param_specs(config), rng)?;
        let net = LasNet::new(config, &params)?;
        Ok(LasModel { net, params })
    }

    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let net = LasNet::new(config, &params)?;
        Ok(LasModel { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn cast<U: Scalar>(&self) -> LasModel<U> {
        LasModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Scalar `log P(targets | feats)` without building gradients.
    pub fn log_prob(&self, feats: &Tensor<T>, cond_ids: &[usize], targets: &[usize]) -> Result<T> {
        let mut g = Graph::new();
        let b = self.net.bind(&mut g, &self.params, false);
        let prep = self.net.prepare(&mut g, &b, feats, cond_ids)?;
        let lp = self.net.sequence_log_prob(&mut g, &b, &prep, targets)?;
        Ok(g.item(lp))
    }

    /// Sets every conditioning tensor (tables and transforms) to zero.
    pub fn zero_conditioning(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with("cond."))
            .cloned()
            .collect();
        for n in names {
            let t = self.params.get_mut(&n).expect("name from store");
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Copies same-named tensors from `src` into `dst`. When `dst` has more rows
/// (a widened input), only the leading rows are overwritten.
pub fn copy_shared_params<T: Scalar>(src: &ParamStore<T>, dst: &mut ParamStore<T>) -> Result<usize> {
    let mut copied = 0;
    for (name, s) in src.iter() {
        let Some(d) = dst.get_mut(name) else { continue };
        if s.shape() == d.shape() {
            d.data_mut().copy_from_slice(s.data());
        } else if s.rank() == 2 && d.rank() == 2 && s.cols() == d.cols() && s.rows() <= d.rows() {
            d.data_mut()[..s.numel()].copy_from_slice(s.data());
        } else {
            return Err(Error::dim("copy_shared_params", s.shape(), d.shape()));
        }
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(inject: InjectionMode) -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            enc_cells: 3,
            enc_proj: 3,
            reduction: 2,
            att_heads: 2,
            att_dim: 4,
            dec_layers: 1,
            dec_cells: 3,
            vocab_size: 5,
            d_feat: 2,
            inject,
            cond: CategoricalSpec::dialect_domain(2),
            cond_enc_dim: 2,
            cond_dec_dim: 2,
        }
    }

    #[test]
    fn encoder_length_is_ceil() {
        let c = tiny(InjectionMode::None);
        let m = LasModel::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (l, t) in [(8, 4), (7, 4), (1, 1)] {
            let mut g = Graph::new();
            let b = m.net.bind(&mut g, &m.params, false);
            let x = Tensor::from_fn(&[l, 2], |i| (i as f64).sin());
            let prep = m.net.prepare(&mut g, &b, &x, &[]).unwrap();
            assert_eq!(prep.enc.len, t);
            assert_eq!(g.shape(prep.enc.memory), &[t, 3]);
        }
    }

    #[test]
    fn single_memory_row_gets_all_attention() {
        let c = tiny(InjectionMode::None);
        let m = LasModel::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut g = Graph::new();
        let b = m.net.bind(&mut g, &m.params, false);
        let x = Tensor::from_fn(&[2, 2], |i| i as f64 * 0.3);
        let prep = m.net.prepare(&mut g, &b, &x, &[]).unwrap();
        let q = g.constant(&Tensor::from_fn(&[1, 3], |i| i as f64));
        let (ctx, betas) = m.net.attend(&mut g, &b, &prep.enc, q).unwrap();
        for beta in &betas {
            assert_eq!(g.value(*beta), &[1.0]);
        }
        // projection of [h_1, h_1]
        let h = g.value(prep.enc.memory).to_vec();
        let mut cat = h.clone();
        cat.extend(&h);
        let w = m.params.get("att.out.w").unwrap();
        for j in 0..4 {
            let expect: f64 = (0..6).map(|i| cat[i] * w.get2(i, j)).sum();
            assert!((g.value(ctx)[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_token_is_input_error() {
        let c = tiny(InjectionMode::None);
        let m = LasModel::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let b = m.net.bind(&mut g, &m.params, false);
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        let prep = m.net.prepare(&mut g, &b, &x, &[]).unwrap();
        let st = m.net.initial_state(&mut g);
        assert!(matches!(
            m.net.decode_step(&mut g, &b, &prep.enc, 5, &st, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn single_token_vocab_has_certain_output() {
        let mut c = tiny(InjectionMode::None);
        c.vocab_size = 1;
        let m = LasModel::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        assert_eq!(m.log_prob(&x, &[], &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn config_sidecar_roundtrip() {
        let c = tiny(InjectionMode::Both);
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(ModelConfig::from_kv(&(c.to_kv() + "bogus=1\n")).is_err());
    }

    #[test]
    fn empty_frames_are_rejected() {
        assert!(matches!(frames_tensor::<f64>(&[], 0, 4), Err(Error::Input(_))));
    }
}
