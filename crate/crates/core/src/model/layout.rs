use serde::{Deserialize, Serialize};

use super::{ModelConfig, Stream, FFN_MULT};

/// Functional group a parameter belongs to, used for gradient-norm profiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamPath {
    /// Latent input projection and positional embedding.
    Embedding,
    /// Timestep and prompt conditioning.
    Conditioning,
    SelfAttention,
    /// Key/value projections of this stream's cross-attention. They read the
    /// *other* stream's hidden states: for the video stream this is the A2V
    /// audio KV path.
    CrossKv,
    /// Query-side norm, query projection and output projection of cross-attention.
    CrossQuery,
    FeedForward,
    /// Final norm and velocity projection.
    Output,
}

impl ParamPath {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamPath::Embedding => "embedding",
            ParamPath::Conditioning => "conditioning",
            ParamPath::SelfAttention => "self_attention",
            ParamPath::CrossKv => "cross_kv",
            ParamPath::CrossQuery => "cross_query",
            ParamPath::FeedForward => "feed_forward",
            ParamPath::Output => "output",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    Zeros,
    Ones,
    Uniform { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub stream: Stream,
    pub block: Option<usize>,
    pub path: ParamPath,
    pub init: ParamInit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub self_ln_gain: usize,
    pub self_ln_bias: usize,
    pub self_q: usize,
    pub self_k: usize,
    pub self_v: usize,
    pub self_o: usize,
    pub cross_ln_gain: usize,
    pub cross_ln_bias: usize,
    pub cross_q: usize,
    pub cross_k: usize,
    pub cross_v: usize,
    pub cross_o: usize,
    pub ffn_ln_gain: usize,
    pub ffn_ln_bias: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamLayout {
    pub in_weight: usize,
    pub in_bias: usize,
    pub pos_emb: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub prompt_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub out_ln_gain: usize,
    pub out_ln_bias: usize,
    pub out_weight: usize,
    /// Per-token `[N, d]` offset, so a fixed per-position mean is one step away.
    pub out_bias: usize,
}

/// Ordered parameter inventory of a [`ModelConfig`]: names, shapes, roles and
/// index handles into the flat parameter list. Audio parameters come first.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    params: Vec<ParamInfo>,
    pub audio: StreamLayout,
    pub video: StreamLayout,
}

struct Builder {
    params: Vec<ParamInfo>,
    stream: Stream,
}

impl Builder {
    fn push(
        &mut self,
        name: String,
        shape: &[usize],
        block: Option<usize>,
        path: ParamPath,
        init: ParamInit,
    ) -> usize {
        self.params.push(ParamInfo {
            name: format!("{}.{name}", self.stream.as_str()),
            shape: shape.to_vec(),
            stream: self.stream,
            block,
            path,
            init,
        });
        self.params.len() - 1
    }

    fn stream(&mut self, config: &ModelConfig) -> StreamLayout {
        use ParamInit::*;
        use ParamPath::*;
        let d = config.d_model;
        let h = d * FFN_MULT;
        let n = config.tokens(self.stream);
        let w = |fan_in| Uniform { fan_in };
        let in_weight = self.push("in.weight".into(), &[d, d], None, Embedding, w(d));
        let in_bias = self.push("in.bias".into(), &[d], None, Embedding, Zeros);
        let pos_emb = self.push("pos_emb".into(), &[n, d], None, Embedding, w(d));
        let time_w1 = self.push("time.w1".into(), &[d, d], None, Conditioning, w(d));
        let time_b1 = self.push("time.b1".into(), &[d], None, Conditioning, Zeros);
        let time_w2 = self.push("time.w2".into(), &[d, d], None, Conditioning, w(d));
        let time_b2 = self.push("time.b2".into(), &[d], None, Conditioning, Zeros);
        let prompt_emb = self.push(
            "prompt_emb".into(),
            &[config.prompt_vocab, d],
            None,
            Conditioning,
            w(d),
        );
        let blocks = (0..config.blocks(self.stream))
            .map(|l| {
                let b = Some(l);
                let mut p = |suffix: &str, shape: &[usize], path, init| {
                    self.push(format!("blocks.{l}.{suffix}"), shape, b, path, init)
                };
                BlockLayout {
                    self_ln_gain: p("self.ln.gain", &[d], SelfAttention, Ones),
                    self_ln_bias: p("self.ln.bias", &[d], SelfAttention, Zeros),
                    self_q: p("self.q", &[d, d], SelfAttention, w(d)),
                    self_k: p("self.k", &[d, d], SelfAttention, w(d)),
                    self_v: p("self.v", &[d, d], SelfAttention, w(d)),
                    self_o: p("self.o", &[d, d], SelfAttention, w(d)),
                    cross_ln_gain: p("cross.ln.gain", &[d], CrossQuery, Ones),
                    cross_ln_bias: p("cross.ln.bias", &[d], CrossQuery, Zeros),
                    cross_q: p("cross.q", &[d, d], CrossQuery, w(d)),
                    cross_k: p("cross.k", &[d, d], CrossKv, w(d)),
                    cross_v: p("cross.v", &[d, d], CrossKv, w(d)),
                    cross_o: p("cross.o", &[d, d], CrossQuery, w(d)),
                    ffn_ln_gain: p("ffn.ln.gain", &[d], FeedForward, Ones),
                    ffn_ln_bias: p("ffn.ln.bias", &[d], FeedForward, Zeros),
                    ffn_w1: p("ffn.w1", &[d, h], FeedForward, w(d)),
                    ffn_b1: p("ffn.b1", &[h], FeedForward, Zeros),
                    ffn_w2: p("ffn.w2", &[h, d], FeedForward, w(h)),
                    ffn_b2: p("ffn.b2", &[d], FeedForward, Zeros),
                }
            })
            .collect();
        StreamLayout {
            in_weight,
            in_bias,
            pos_emb,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            prompt_emb,
            blocks,
            out_ln_gain: self.push("out.ln.gain".into(), &[d], None, Output, Ones),
            out_ln_bias: self.push("out.ln.bias".into(), &[d], None, Output, Zeros),
            out_weight: self.push("out.weight".into(), &[d, d], None, Output, Zeros),
            out_bias: self.push("out.bias".into(), &[n, d], None, Output, Zeros),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut b = Builder {
            params: Vec::new(),
            stream: Stream::Audio,
        };
        let audio = b.stream(config);
        b.stream = Stream::Video;
        let video = b.stream(config);
        Self {
            params: b.params,
            audio,
            video,
        }
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn stream(&self, stream: Stream) -> &StreamLayout {
        match stream {
            Stream::Audio => &self.audio,
            Stream::Video => &self.video,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}
