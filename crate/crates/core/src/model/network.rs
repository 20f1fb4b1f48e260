//! Parameter layout and the forward graph for both architectures.
//!
//! Blocks are pre-norm: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`. A dual-stream
//! cross block first adds co-attention over the other stream's normalized
//! states, then runs a regular block per stream.

use super::config::{Architecture, ModelConfig};
use super::input::{ModelInput, RegionState, TokenSlot};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Matrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Handles to the three heads' outputs on a tape.
pub(crate) struct Heads {
    pub token_logits: Var,
    pub region_logits: Option<Var>,
    pub itm_logit: Var,
}

/// Declares every parameter with its shape, in checkpoint order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let h = cfg.hidden;
    let mut l = Layout::default();
    l.add("text.token_emb", cfg.vocab_size, h, Init::Embedding);
    l.add("text.pos_emb", cfg.max_tokens, h, Init::Embedding);
    l.add("text.segment", 1, h, Init::Embedding);
    l.norm("text.ln", h);
    l.dense("vision.feat", cfg.feature_dim, h);
    if cfg.use_box_embedding {
        l.dense("vision.box", 5, h);
    }
    l.add("vision.segment", 1, h, Init::Embedding);
    l.norm("vision.ln", h);
    match cfg.architecture {
        Architecture::SingleStream => {
            for i in 0..cfg.cross_layers {
                l.block(&format!("enc.{i}"), h, cfg.ffn_dim);
            }
            l.norm("enc.final_ln", h);
        }
        Architecture::DualStream => {
            for i in 0..cfg.text_only_layers {
                l.block(&format!("text.layer.{i}"), h, cfg.ffn_dim);
            }
            for i in 0..cfg.vision_only_layers {
                l.block(&format!("vision.layer.{i}"), h, cfg.ffn_dim);
            }
            for i in 0..cfg.cross_layers {
                for side in ["txt", "vis"] {
                    let p = format!("cross.{i}.{side}");
                    l.norm(&format!("{p}.lnc"), h);
                    l.attention(&format!("{p}.co"), h);
                    l.block(&p, h, cfg.ffn_dim);
                }
            }
            l.norm("text.final_ln", h);
            l.norm("vision.final_ln", h);
        }
    }
    l.dense("mlm.dense", h, h);
    l.norm("mlm.ln", h);
    l.add("mlm.bias", 1, cfg.vocab_size, Init::Zeros);
    l.dense("mrc.dense", h, h);
    l.norm("mrc.ln", h);
    l.dense("mrc.out", h, cfg.num_classes);
    l.dense("itm", h, 1);
    l.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// N(0, 1/fan_in)
    Weight,
    /// N(0, 1/hidden)
    Embedding,
}

#[derive(Default)]
struct Layout(Vec<(String, usize, usize, Init)>);

impl Layout {
    fn add(&mut self, name: &str, r: usize, c: usize, init: Init) {
        self.0.push((name.to_string(), r, c, init));
    }

    fn dense(&mut self, p: &str, fan_in: usize, fan_out: usize) {
        self.add(&format!("{p}.w"), fan_in, fan_out, Init::Weight);
        self.add(&format!("{p}.b"), 1, fan_out, Init::Zeros);
    }

    fn norm(&mut self, p: &str, h: usize) {
        self.add(&format!("{p}.g"), 1, h, Init::Ones);
        self.add(&format!("{p}.b"), 1, h, Init::Zeros);
    }

    fn attention(&mut self, p: &str, h: usize) {
        for m in ["q", "k", "v", "o"] {
            self.dense(&format!("{p}.{m}"), h, h);
        }
    }

    fn block(&mut self, p: &str, h: usize, f: usize) {
        self.norm(&format!("{p}.ln1"), h);
        self.attention(&format!("{p}.attn"), h);
        self.norm(&format!("{p}.ln2"), h);
        self.dense(&format!("{p}.ffn1"), h, f);
        self.dense(&format!("{p}.ffn2"), f, h);
    }
}

/// Draws parameters in layout order from `rng`.
pub(crate) fn initialize(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, r, c, init) in layout(cfg) {
        let std = match init {
            Init::Zeros | Init::Ones => 0.0,
            Init::Weight => 1.0 / (r as f64).sqrt(),
            Init::Embedding => 1.0 / (cfg.hidden as f64).sqrt(),
        };
        let data = match init {
            Init::Zeros => vec![0.0; r * c],
            Init::Ones => vec![1.0; r * c],
            _ => {
                let n = Normal::new(0.0, std).expect("positive std");
                (0..r * c).map(|_| n.sample(rng)).collect()
            }
        };
        store.push(name, Matrix::from_vec(r, c, data));
    }
    store
}

struct Graph<'a, 'p> {
    t: &'a mut Tape<'p>,
    cfg: &'a ModelConfig,
}

impl Graph<'_, '_> {
    fn linear(&mut self, x: Var, p: &str) -> Var {
        let w = self.t.named(&format!("{p}.w"));
        let b = self.t.named(&format!("{p}.b"));
        let y = self.t.matmul(x, w);
        self.t.add_row(y, b)
    }

    fn norm(&mut self, x: Var, p: &str) -> Var {
        let g = self.t.named(&format!("{p}.g"));
        let b = self.t.named(&format!("{p}.b"));
        self.t.layer_norm(x, g, b)
    }

    /// Multi-head attention of `q_in` rows over `kv_in` rows.
    fn attention(&mut self, q_in: Var, kv_in: Var, p: &str) -> Var {
        let q = self.linear(q_in, &format!("{p}.q"));
        let k = self.linear(kv_in, &format!("{p}.k"));
        let v = self.linear(kv_in, &format!("{p}.v"));
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let qh = self.t.slice_cols(q, hd * dh, dh);
            let kh = self.t.slice_cols(k, hd * dh, dh);
            let vh = self.t.slice_cols(v, hd * dh, dh);
            let s = self.t.matmul_bt(qh, kh);
            let s = self.t.scale(s, scale);
            let a = self.t.softmax_rows(s);
            heads.push(self.t.matmul(a, vh));
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            self.t.concat_cols(&heads)
        };
        self.linear(o, &format!("{p}.o"))
    }

    fn block(&mut self, x: Var, p: &str) -> Var {
        let n = self.norm(x, &format!("{p}.ln1"));
        let a = self.attention(n, n, &format!("{p}.attn"));
        let x = self.t.add(x, a);
        let n = self.norm(x, &format!("{p}.ln2"));
        let f = self.linear(n, &format!("{p}.ffn1"));
        let f = self.t.gelu(f);
        let f = self.linear(f, &format!("{p}.ffn2"));
        self.t.add(x, f)
    }

    fn embed_text(&mut self, input: &ModelInput) -> Var {
        let ids: Vec<usize> = input
            .tokens
            .iter()
            .map(|s| match s {
                TokenSlot::Visible(id) => *id,
                TokenSlot::Mask | TokenSlot::Ablated => self.cfg.mask_token,
            })
            .collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let table = self.t.named("text.token_emb");
        let tok = self.t.gather(table, &ids);
        let table = self.t.named("text.pos_emb");
        let pos = self.t.gather(table, &positions);
        let x = self.t.add(tok, pos);
        let seg = self.t.named("text.segment");
        let x = self.t.add_row(x, seg);
        self.norm(x, "text.ln")
    }

    fn embed_regions(&mut self, input: &ModelInput) -> Var {
        let d = self.cfg.feature_dim;
        let k = input.regions.len();
        let mut feats = Matrix::zeros(k, d);
        let mut boxes = Matrix::zeros(k, 5);
        for (i, r) in input.regions.iter().enumerate() {
            match &r.state {
                RegionState::Visible(f) | RegionState::Ablated(f) => feats.row_mut(i).copy_from_slice(f),
                RegionState::Masked => {}
            }
            boxes.row_mut(i).copy_from_slice(&r.bbox.spatial_features());
        }
        let f = self.t.constant(feats);
        let mut x = self.linear(f, "vision.feat");
        if self.cfg.use_box_embedding {
            let b = self.t.constant(boxes);
            let b = self.linear(b, "vision.box");
            x = self.t.add(x, b);
        }
        let seg = self.t.named("vision.segment");
        let x = self.t.add_row(x, seg);
        self.norm(x, "vision.ln")
    }

    fn encode(&mut self, input: &ModelInput) -> (Var, Option<Var>) {
        let n_t = input.tokens.len();
        let n_v = input.regions.len();
        let text = self.embed_text(input);
        let vision = (n_v > 0).then(|| self.embed_regions(input));
        match self.cfg.architecture {
            Architecture::SingleStream => {
                let mut x = match vision {
                    Some(v) => self.t.concat_rows(&[text, v]),
                    None => text,
                };
                for i in 0..self.cfg.cross_layers {
                    x = self.block(x, &format!("enc.{i}"));
                }
                let x = self.norm(x, "enc.final_ln");
                match vision {
                    Some(_) => {
                        let t = self.t.slice_rows(x, 0, n_t);
                        let v = self.t.slice_rows(x, n_t, n_v);
                        (t, Some(v))
                    }
                    None => (x, None),
                }
            }
            Architecture::DualStream => {
                let mut t = text;
                for i in 0..self.cfg.text_only_layers {
                    t = self.block(t, &format!("text.layer.{i}"));
                }
                let mut v = vision;
                if let Some(mut vv) = v {
                    for i in 0..self.cfg.vision_only_layers {
                        vv = self.block(vv, &format!("vision.layer.{i}"));
                    }
                    v = Some(vv);
                }
                for i in 0..self.cfg.cross_layers {
                    let p_t = format!("cross.{i}.txt");
                    let p_v = format!("cross.{i}.vis");
                    if let Some(vv) = v {
                        let tn = self.norm(t, &format!("{p_t}.lnc"));
                        let vn = self.norm(vv, &format!("{p_v}.lnc"));
                        let ta = self.attention(tn, vn, &format!("{p_t}.co"));
                        let va = self.attention(vn, tn, &format!("{p_v}.co"));
                        t = self.t.add(t, ta);
                        v = Some(self.t.add(vv, va));
                    }
                    t = self.block(t, &p_t);
                    v = v.map(|vv| self.block(vv, &p_v));
                }
                let t = self.norm(t, "text.final_ln");
                let v = v.map(|vv| self.norm(vv, "vision.final_ln"));
                (t, v)
            }
        }
    }

    fn heads(&mut self, text: Var, vision: Option<Var>) -> Heads {
        let h = self.linear(text, "mlm.dense");
        let h = self.t.gelu(h);
        let h = self.norm(h, "mlm.ln");
        let emb = self.t.named("text.token_emb");
        let logits = self.t.matmul_bt(h, emb);
        let bias = self.t.named("mlm.bias");
        let token_logits = self.t.add_row(logits, bias);

        let region_logits = vision.map(|v| {
            let h = self.linear(v, "mrc.dense");
            let h = self.t.gelu(h);
            let h = self.norm(h, "mrc.ln");
            self.linear(h, "mrc.out")
        });

        let cls = self.t.slice_rows(text, 0, 1);
        let itm_logit = self.linear(cls, "itm");
        Heads {
            token_logits,
            region_logits,
            itm_logit,
        }
    }
}

/// Records the full forward pass of a validated input on `tape`.
pub(crate) fn build(tape: &mut Tape, cfg: &ModelConfig, input: &ModelInput) -> Heads {
    let mut g = Graph { t: tape, cfg };
    let (text, vision) = g.encode(input);
    g.heads(text, vision)
}
