//! Architecture descriptors, parameter layout and per-sample forward graphs.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::modelzoo::{ModelError, ModuleFamily, ModuleId, ModuleSpec};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::tape::{FlopTag, Tape, Var};

/// Network shape. Input and output widths are per sample; sequence and
/// signal inputs are flattened row-major (`position × feature`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `z = x Wᵀ`, output columns split into `groups` modules. No shared parameters.
    Linear {
        d_in: usize,
        d_out: usize,
        groups: usize,
    },
    /// Tanh MLP whose hidden layers are split into equal neuron blocks.
    BlockMlp {
        d_in: usize,
        width: usize,
        blocks_per_layer: usize,
        layers: usize,
        d_out: usize,
        bias: bool,
    },
    /// Residual self-attention stack with one module per head.
    TinyAttention {
        seq_len: usize,
        d_token: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        d_ff: usize,
        d_out: usize,
    },
    /// 1-D same-padded tanh convolutions, filters split into groups, mean-pooled readout.
    TinyConv {
        length: usize,
        channels_in: usize,
        filters: usize,
        groups: usize,
        layers: usize,
        kernel: usize,
        d_out: usize,
    },
}

impl Architecture {
    pub fn block_mlp(d_in: usize, blocks_per_layer: usize, layers: usize, width: usize) -> Self {
        Architecture::BlockMlp {
            d_in,
            width,
            blocks_per_layer,
            layers,
            d_out: 1,
            bias: true,
        }
    }

    pub fn tiny_attention(d_model: usize, heads: usize, layers: usize) -> Self {
        Architecture::TinyAttention {
            seq_len: 4,
            d_token: 4,
            d_model,
            heads,
            layers,
            d_ff: 2 * d_model,
            d_out: 1,
        }
    }

    pub fn tiny_conv(length: usize, channels_in: usize, filters: usize, groups: usize, layers: usize) -> Self {
        Architecture::TinyConv {
            length,
            channels_in,
            filters,
            groups,
            layers,
            kernel: 3,
            d_out: 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::Linear { d_in, .. } | Architecture::BlockMlp { d_in, .. } => d_in,
            Architecture::TinyAttention { seq_len, d_token, .. } => seq_len * d_token,
            Architecture::TinyConv {
                length, channels_in, ..
            } => length * channels_in,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            Architecture::Linear { d_out, .. }
            | Architecture::BlockMlp { d_out, .. }
            | Architecture::TinyConv { d_out, .. } => d_out,
            Architecture::TinyAttention { seq_len, d_out, .. } => seq_len * d_out,
        }
    }

    /// Width of one softmax group in the output row.
    pub fn class_group(&self) -> usize {
        match *self {
            Architecture::Linear { d_out, .. }
            | Architecture::BlockMlp { d_out, .. }
            | Architecture::TinyConv { d_out, .. }
            | Architecture::TinyAttention { d_out, .. } => d_out,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Linear { .. } => "linear",
            Architecture::BlockMlp { .. } => "block_mlp",
            Architecture::TinyAttention { .. } => "tiny_attention",
            Architecture::TinyConv { .. } => "tiny_conv",
        }
    }

    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(ModelError::Spec(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        let divides = |what: &str, n: usize, d: usize| {
            if !n.is_multiple_of(d) {
                Err(ModelError::Spec(format!("{what}: {n} not divisible by {d}")))
            } else {
                Ok(())
            }
        };
        match *self {
            Architecture::Linear { d_in, d_out, groups } => {
                positive("d_in", d_in)?;
                positive("d_out", d_out)?;
                positive("groups", groups)?;
                divides("d_out by groups", d_out, groups)
            }
            Architecture::BlockMlp {
                d_in,
                width,
                blocks_per_layer,
                layers,
                d_out,
                ..
            } => {
                for (n, v) in [
                    ("d_in", d_in),
                    ("width", width),
                    ("blocks_per_layer", blocks_per_layer),
                    ("layers", layers),
                    ("d_out", d_out),
                ] {
                    positive(n, v)?;
                }
                divides("width by blocks_per_layer", width, blocks_per_layer)
            }
            Architecture::TinyAttention {
                seq_len,
                d_token,
                d_model,
                heads,
                layers,
                d_out,
                ..
            } => {
                for (n, v) in [
                    ("seq_len", seq_len),
                    ("d_token", d_token),
                    ("d_model", d_model),
                    ("heads", heads),
                    ("layers", layers),
                    ("d_out", d_out),
                ] {
                    positive(n, v)?;
                }
                divides("d_model by heads", d_model, heads)
            }
            Architecture::TinyConv {
                length,
                channels_in,
                filters,
                groups,
                layers,
                kernel,
                d_out,
            } => {
                for (n, v) in [
                    ("length", length),
                    ("channels_in", channels_in),
                    ("filters", filters),
                    ("groups", groups),
                    ("layers", layers),
                    ("kernel", kernel),
                    ("d_out", d_out),
                ] {
                    positive(n, v)?;
                }
                if kernel % 2 == 0 {
                    return Err(ModelError::Spec("kernel must be odd".into()));
                }
                divides("filters by groups", filters, groups)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// N(0, 1/fan_in)
    Scaled(usize),
    Normal(f64),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Affine {
    pub weight: Slot,
    pub bias: Option<Slot>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Head {
    pub query: Slot,
    pub key: Slot,
    pub value: Slot,
    pub output: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttentionLayer {
    pub heads: Vec<Head>,
    pub ffn: Option<(Affine, Slot)>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layout {
    Linear {
        groups: Vec<Slot>,
    },
    Mlp {
        layers: Vec<Vec<Affine>>,
        readout: Affine,
    },
    Attention {
        embed: Slot,
        position: Slot,
        layers: Vec<AttentionLayer>,
        readout: Affine,
    },
    Conv {
        kernel: usize,
        layers: Vec<Vec<Affine>>,
        readout: Affine,
    },
}

struct Allocator {
    next: usize,
    inits: Vec<(Range<usize>, Init)>,
    shared: Vec<Range<usize>>,
    modules: Vec<ModuleSpec>,
}

impl Allocator {
    fn new() -> Self {
        Self {
            next: 0,
            inits: Vec::new(),
            shared: Vec::new(),
            modules: Vec::new(),
        }
    }

    fn slot(&mut self, rows: usize, cols: usize, init: Init, owner: Option<usize>) -> Slot {
        let slot = Slot {
            offset: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        self.inits.push((slot.range(), init));
        match owner {
            Some(m) => self.modules[m].ranges.push(slot.range()),
            None => self.shared.push(slot.range()),
        }
        slot
    }

    fn module(&mut self, id: ModuleId, family: ModuleFamily) -> usize {
        self.modules.push(ModuleSpec {
            id,
            family,
            ranges: Vec::new(),
        });
        self.modules.len() - 1
    }
}

pub(crate) struct Built {
    pub layout: Layout,
    pub modules: Vec<ModuleSpec>,
    pub shared: Vec<Range<usize>>,
    pub len: usize,
    inits: Vec<(Range<usize>, Init)>,
}

impl Built {
    pub fn initialize<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); self.len];
        for (range, init) in &self.inits {
            let std = match *init {
                Init::Scaled(fan_in) => 1.0 / (fan_in as f64).sqrt(),
                Init::Normal(s) => s,
                Init::Zero => continue,
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[range.clone()] {
                *p = T::lit(dist.sample(&mut rng));
            }
        }
        params
    }
}

pub(crate) fn build_layout(arch: &Architecture) -> Built {
    let mut a = Allocator::new();
    let layout = match *arch {
        Architecture::Linear { d_in, d_out, groups } => {
            let per = d_out / groups;
            let groups = (0..groups)
                .map(|g| {
                    let m = a.module(ModuleId::new(0, g), ModuleFamily::Group);
                    a.slot(per, d_in, Init::Scaled(d_in), Some(m))
                })
                .collect();
            Layout::Linear { groups }
        }
        Architecture::BlockMlp {
            d_in,
            width,
            blocks_per_layer,
            layers,
            d_out,
            bias,
        } => {
            let per = width / blocks_per_layer;
            let mut fan_in = d_in;
            let mut all = Vec::with_capacity(layers);
            for l in 0..layers {
                let mut blocks = Vec::with_capacity(blocks_per_layer);
                for b in 0..blocks_per_layer {
                    let m = a.module(ModuleId::new(l, b), ModuleFamily::Block);
                    let weight = a.slot(per, fan_in, Init::Scaled(fan_in), Some(m));
                    let bias = bias.then(|| a.slot(1, per, Init::Zero, Some(m)));
                    blocks.push(Affine { weight, bias });
                }
                all.push(blocks);
                fan_in = width;
            }
            let weight = a.slot(d_out, width, Init::Scaled(width), None);
            let bias = bias.then(|| a.slot(1, d_out, Init::Zero, None));
            Layout::Mlp {
                layers: all,
                readout: Affine { weight, bias },
            }
        }
        Architecture::TinyAttention {
            seq_len,
            d_token,
            d_model,
            heads,
            layers,
            d_ff,
            d_out,
        } => {
            let dh = d_model / heads;
            let embed = a.slot(d_token, d_model, Init::Scaled(d_token), None);
            let position = a.slot(seq_len, d_model, Init::Normal(0.5), None);
            let mut all = Vec::with_capacity(layers);
            for l in 0..layers {
                let mut hs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let m = a.module(ModuleId::new(l, h), ModuleFamily::Head);
                    hs.push(Head {
                        query: a.slot(d_model, dh, Init::Scaled(d_model), Some(m)),
                        key: a.slot(d_model, dh, Init::Scaled(d_model), Some(m)),
                        value: a.slot(d_model, dh, Init::Scaled(d_model), Some(m)),
                        output: a.slot(dh, d_model, Init::Scaled(d_model), Some(m)),
                    });
                }
                let ffn = (d_ff > 0).then(|| {
                    let w1 = a.slot(d_model, d_ff, Init::Scaled(d_model), None);
                    let b1 = a.slot(1, d_ff, Init::Zero, None);
                    let w2 = a.slot(d_ff, d_model, Init::Scaled(d_ff), None);
                    (
                        Affine {
                            weight: w1,
                            bias: Some(b1),
                        },
                        w2,
                    )
                });
                all.push(AttentionLayer { heads: hs, ffn });
            }
            let weight = a.slot(d_model, d_out, Init::Scaled(d_model), None);
            let bias = Some(a.slot(1, d_out, Init::Zero, None));
            Layout::Attention {
                embed,
                position,
                layers: all,
                readout: Affine { weight, bias },
            }
        }
        Architecture::TinyConv {
            channels_in,
            filters,
            groups,
            layers,
            kernel,
            d_out,
            ..
        } => {
            let per = filters / groups;
            let mut ch = channels_in;
            let mut all = Vec::with_capacity(layers);
            for l in 0..layers {
                let mut gs = Vec::with_capacity(groups);
                for g in 0..groups {
                    let m = a.module(ModuleId::new(l, g), ModuleFamily::FilterGroup);
                    let fan_in = ch * kernel;
                    let weight = a.slot(per, fan_in, Init::Scaled(fan_in), Some(m));
                    let bias = Some(a.slot(1, per, Init::Zero, Some(m)));
                    gs.push(Affine { weight, bias });
                }
                all.push(gs);
                ch = filters;
            }
            let weight = a.slot(d_out, filters, Init::Scaled(filters), None);
            let bias = Some(a.slot(1, d_out, Init::Zero, None));
            Layout::Conv {
                kernel,
                layers: all,
                readout: Affine { weight, bias },
            }
        }
    };
    Built {
        layout,
        modules: a.modules,
        shared: a.shared,
        len: a.next,
        inits: a.inits,
    }
}

fn param<T: Scalar>(tape: &mut Tape<'_, T>, s: Slot) -> Var {
    tape.param(s.offset, s.rows, s.cols)
}

/// `x Wᵀ + b` with `W` stored one output unit per row.
fn affine_bt<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, a: &Affine) -> Var {
    let w = param(tape, a.weight);
    let y = tape.matmul_bt(x, w);
    match a.bias {
        Some(b) => {
            let b = param(tape, b);
            tape.add_row(y, b)
        }
        None => y,
    }
}

impl Layout {
    /// Records the forward graph for one sample and returns the output node.
    /// Its row-major flattening is the sample's output vector.
    pub fn forward_sample<T: Scalar>(
        &self,
        arch: &Architecture,
        tape: &mut Tape<'_, T>,
        input: &[T],
        pruned: &dyn Fn(ModuleId) -> bool,
    ) -> Var {
        match self {
            Layout::Linear { groups } => {
                let x = tape.constant(Matrix::from_vec_unchecked(1, input.len(), input.to_vec()));
                let mut parts = Vec::with_capacity(groups.len());
                for (g, slot) in groups.iter().enumerate() {
                    let id = ModuleId::new(0, g);
                    if pruned(id) {
                        parts.push(tape.constant(Matrix::zeros(1, slot.rows)));
                        continue;
                    }
                    tape.set_tag(FlopTag::Module(id));
                    let w = param(tape, *slot);
                    parts.push(tape.matmul_bt(x, w));
                }
                tape.set_tag(FlopTag::Shared);
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_cols(parts)
                }
            }
            Layout::Mlp { layers, readout } => {
                let mut h = tape.constant(Matrix::from_vec_unchecked(1, input.len(), input.to_vec()));
                for (l, blocks) in layers.iter().enumerate() {
                    let mut parts = Vec::with_capacity(blocks.len());
                    for (b, block) in blocks.iter().enumerate() {
                        let id = ModuleId::new(l, b);
                        if pruned(id) {
                            parts.push(tape.constant(Matrix::zeros(1, block.weight.rows)));
                            continue;
                        }
                        tape.set_tag(FlopTag::Module(id));
                        let pre = affine_bt(tape, h, block);
                        parts.push(tape.tanh(pre));
                    }
                    tape.set_tag(FlopTag::Shared);
                    h = tape.concat_cols(parts);
                }
                affine_bt(tape, h, readout)
            }
            Layout::Attention {
                embed,
                position,
                layers,
                readout,
            } => {
                let Architecture::TinyAttention { seq_len, d_token, .. } = *arch else {
                    unreachable!("attention layout built from attention architecture")
                };
                tape.set_tag(FlopTag::Shared);
                let x = tape.constant(Matrix::from_vec_unchecked(seq_len, d_token, input.to_vec()));
                let e = param(tape, *embed);
                let p = param(tape, *position);
                let xe = tape.matmul(x, e);
                let mut h = tape.add(xe, p);
                for (l, layer) in layers.iter().enumerate() {
                    let mut mixed: Option<Var> = None;
                    for (hi, head) in layer.heads.iter().enumerate() {
                        let id = ModuleId::new(l, hi);
                        if pruned(id) {
                            continue;
                        }
                        tape.set_tag(FlopTag::Module(id));
                        let wq = param(tape, head.query);
                        let wk = param(tape, head.key);
                        let wv = param(tape, head.value);
                        let wo = param(tape, head.output);
                        let q = tape.matmul(h, wq);
                        let k = tape.matmul(h, wk);
                        let v = tape.matmul(h, wv);
                        let scores = tape.matmul_bt(q, k);
                        let scores = tape.scale(scores, T::one() / T::from_count(head.query.cols).sqrt());
                        let attn = tape.softmax_rows(scores);
                        let o = tape.matmul(attn, v);
                        let c = tape.matmul(o, wo);
                        mixed = Some(match mixed {
                            Some(acc) => tape.add(acc, c),
                            None => c,
                        });
                    }
                    tape.set_tag(FlopTag::Shared);
                    if let Some(m) = mixed {
                        h = tape.add(h, m);
                    }
                    if let Some((up, down)) = &layer.ffn {
                        let w1 = param(tape, up.weight);
                        let pre = tape.matmul(h, w1);
                        let pre = match up.bias {
                            Some(b) => {
                                let b = param(tape, b);
                                tape.add_row(pre, b)
                            }
                            None => pre,
                        };
                        let act = tape.tanh(pre);
                        let w2 = param(tape, *down);
                        let f = tape.matmul(act, w2);
                        h = tape.add(h, f);
                    }
                }
                let w = param(tape, readout.weight);
                let z = tape.matmul(h, w);
                match readout.bias {
                    Some(b) => {
                        let b = param(tape, b);
                        tape.add_row(z, b)
                    }
                    None => z,
                }
            }
            Layout::Conv {
                kernel,
                layers,
                readout,
            } => {
                let Architecture::TinyConv {
                    length, channels_in, ..
                } = *arch
                else {
                    unreachable!("conv layout built from conv architecture")
                };
                let mut h = tape.constant(Matrix::from_vec_unchecked(length, channels_in, input.to_vec()));
                for (l, groups) in layers.iter().enumerate() {
                    tape.set_tag(FlopTag::Shared);
                    let patches = tape.im2col(h, *kernel);
                    let mut parts = Vec::with_capacity(groups.len());
                    for (g, group) in groups.iter().enumerate() {
                        let id = ModuleId::new(l, g);
                        if pruned(id) {
                            parts.push(tape.constant(Matrix::zeros(length, group.weight.rows)));
                            continue;
                        }
                        tape.set_tag(FlopTag::Module(id));
                        let pre = affine_bt(tape, patches, group);
                        parts.push(tape.tanh(pre));
                    }
                    tape.set_tag(FlopTag::Shared);
                    h = tape.concat_cols(parts);
                }
                let pooled = tape.mean_rows(h);
                affine_bt(tape, pooled, readout)
            }
        }
    }
}
