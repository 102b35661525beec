//! Window geometry, relative position bias, fused-window multi-head
//! self-attention, and the overlapping-window token fuser.
//!
//! A series of T tokens is covered by F windows of W base tokens at stride
//! s = round(W*alpha). In block m each window also sees L_per_block[m] =
//! round(m*(1-alpha)*W*beta) fringe tokens on each side (clipped at the
//! series boundary) among its keys, but only base tokens produce outputs.
//! Each window carries its own summary (CLS) query token. After attention,
//! a token covered by P windows receives the unweighted mean of its P
//! per-window outputs.

use crate::diffcore::{NodeId, Scalar, Tape};
use crate::error::{Error, Result};

/// Static windowing hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    /// Base tokens per window.
    pub window: usize,
    /// Stride coefficient in (0, 1]; stride = round(window * alpha).
    pub alpha: f64,
    /// Fringe growth coefficient, nonnegative integer.
    pub beta: usize,
    /// Number of attention blocks.
    pub blocks: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha {} not in (0, 1]",
                self.alpha
            )));
        }
        if self.blocks < 1 {
            return Err(Error::Config("block count must be >= 1".into()));
        }
        if self.stride() < 1 {
            return Err(Error::Config(format!(
                "stride round({} * {}) must be >= 1",
                self.window, self.alpha
            )));
        }
        Ok(())
    }

    /// Window stride, round-half-up.
    pub fn stride(&self) -> usize {
        (self.window as f64 * self.alpha).round() as usize
    }

    /// Fringe length on each side for block m.
    pub fn fringe(&self, m: usize) -> usize {
        (m as f64 * (1.0 - self.alpha) * self.window as f64 * self.beta as f64).round() as usize
    }
}

/// Concrete window placement for one series length.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub t_len: usize,
    pub window: usize,
    /// Base start index per window; strictly increasing.
    pub anchors: Vec<usize>,
    /// Fringe length per block.
    pub l_per_block: Vec<usize>,
    /// Clipped key span [start, end) per block per window (base plus fringe).
    pub key_ranges: Vec<Vec<(usize, usize)>>,
    /// Number of windows covering each token as a base token.
    pub cover: Vec<u32>,
}

impl WindowLayout {
    /// Window count F.
    pub fn f(&self) -> usize {
        self.anchors.len()
    }

    pub fn blocks(&self) -> usize {
        self.l_per_block.len()
    }

    pub fn base_range(&self, i: usize) -> (usize, usize) {
        (self.anchors[i], self.anchors[i] + self.window)
    }

    pub fn key_range(&self, m: usize, i: usize) -> (usize, usize) {
        self.key_ranges[m][i]
    }

    /// Unclipped receptive field of one window at block m.
    pub fn receptive_field(&self, m: usize) -> usize {
        self.window + 2 * self.l_per_block[m]
    }
}

/// Place windows over a series of length `t`.
pub fn plan_windows(t: usize, spec: &WindowSpec) -> Result<WindowLayout> {
    spec.validate()?;
    let w = spec.window;
    if t < w {
        return Err(Error::Config(format!(
            "series length {} shorter than window {}",
            t, w
        )));
    }
    let s = spec.stride();
    let mut anchors: Vec<usize> = Vec::new();
    let mut a = 0;
    while a + w <= t {
        anchors.push(a);
        a += s;
    }
    let last = *anchors.last().expect("t >= w yields at least one window");
    if last + w < t {
        anchors.push(t - w);
    }

    let l_per_block: Vec<usize> = (0..spec.blocks).map(|m| spec.fringe(m)).collect();
    let key_ranges = l_per_block
        .iter()
        .map(|&l| {
            anchors
                .iter()
                .map(|&a| (a.saturating_sub(l), (a + w + l).min(t)))
                .collect()
        })
        .collect();

    let mut cover = vec![0u32; t];
    for &a in &anchors {
        for c in cover[a..a + w].iter_mut() {
            *c += 1;
        }
    }
    debug_assert!(cover.iter().all(|&c| c > 0));

    Ok(WindowLayout {
        t_len: t,
        window: w,
        anchors,
        l_per_block,
        key_ranges,
        cover,
    })
}

/// Per-block attention parameters; `P` is an array in storage and a tape
/// node when bound for a forward pass.
#[derive(Clone, Debug)]
pub struct AttnParams<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    /// Single row of length heads * entries_per_head (see [`bias_table_len`]).
    pub bias: P,
}

impl<P> AttnParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> AttnParams<Q> {
        AttnParams {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&'static str, &'a P)) {
        f("wq", &self.wq);
        f("bq", &self.bq);
        f("wk", &self.wk);
        f("bk", &self.bk);
        f("wv", &self.wv);
        f("bv", &self.bv);
        f("wo", &self.wo);
        f("bo", &self.bo);
        f("bias", &self.bias);
    }
}

/// Bias table entries per head for a block with fringe `l`: one entry per
/// relative offset in [-(w+l-1), w+l-1] plus three CLS entries.
pub fn bias_table_len(w: usize, l: usize) -> usize {
    2 * (w + l) + 2
}

const CLS_TO_TOK: usize = 0; // query CLS, key time token: offset after the span
const TOK_TO_CLS: usize = 1;
const CLS_TO_CLS: usize = 2;

/// Head-0 table indices for window i at block m, row-major
/// (1+W) x (1+K_clipped). Other heads add h * bias_table_len(w, l).
pub fn bias_index_map(layout: &WindowLayout, m: usize, i: usize) -> Vec<usize> {
    let w = layout.window;
    let l = layout.l_per_block[m];
    let span = 2 * (w + l) - 1; // token-token entries
    let anchor = layout.anchors[i];
    let (ks, ke) = layout.key_range(m, i);
    let nk = ke - ks;
    let mut map = Vec::with_capacity((1 + w) * (1 + nk));
    map.push(span + CLS_TO_CLS);
    for _ in 0..nk {
        map.push(span + CLS_TO_TOK);
    }
    for q in 0..w {
        let qt = anchor + q;
        map.push(span + TOK_TO_CLS);
        for k in 0..nk {
            let kt = ks + k;
            let off = kt as isize - qt as isize + (w + l) as isize - 1;
            debug_assert!(off >= 0 && (off as usize) < span);
            map.push(off as usize);
        }
    }
    map
}

/// Precomputed per-series-length geometry: layout plus bias index maps.
#[derive(Clone, Debug)]
pub struct ForwardPlan {
    pub layout: WindowLayout,
    /// bias_maps[m][i]: head-0 index map for window i at block m.
    pub bias_maps: Vec<Vec<Vec<usize>>>,
    /// Fused-row destination map, window-major: row q of window i lands at
    /// token anchors[i] + q.
    pub fuse_dst: Vec<usize>,
}

impl ForwardPlan {
    pub fn new(layout: WindowLayout) -> Self {
        let bias_maps = (0..layout.blocks())
            .map(|m| {
                (0..layout.f())
                    .map(|i| bias_index_map(&layout, m, i))
                    .collect()
            })
            .collect();
        let mut fuse_dst = Vec::with_capacity(layout.f() * layout.window);
        for &a in &layout.anchors {
            fuse_dst.extend(a..a + layout.window);
        }
        Self {
            layout,
            bias_maps,
            fuse_dst,
        }
    }
}

/// Token state threaded through blocks: per-window summary tokens and the
/// series tokens, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct TokenState {
    /// F x D.
    pub cls: NodeId,
    /// T x D.
    pub seq: NodeId,
}

/// The bias matrix for window i at block m: per-head gather from the
/// block's table, returned as H stacked (1+W) x (1+K) nodes.
pub fn bias_lookup<S: Scalar>(
    tape: &mut Tape<S>,
    bias_table: NodeId,
    plan: &ForwardPlan,
    m: usize,
    i: usize,
    heads: usize,
) -> Result<Vec<NodeId>> {
    let layout = &plan.layout;
    let w = layout.window;
    let l = layout.l_per_block[m];
    let e = bias_table_len(w, l);
    let (ks, ke) = layout.key_range(m, i);
    let rows = 1 + w;
    let cols = 1 + (ke - ks);
    let base = &plan.bias_maps[m][i];
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let shifted: Vec<usize> = base.iter().map(|&x| x + h * e).collect();
        out.push(tape.gather_table(bias_table, &shifted, rows, cols)?);
    }
    Ok(out)
}

/// Attention maps retained for one window: the post-softmax node per head,
/// each (1+W) x (1+K_clipped).
#[derive(Clone, Debug)]
pub struct WindowAttn {
    pub window: usize,
    pub heads: Vec<NodeId>,
}

/// Attention output for a single window at block m: rows are the window's
/// CLS token followed by its W base tokens.
pub fn window_attention<S: Scalar>(
    tape: &mut Tape<S>,
    state: &TokenState,
    params: &AttnParams<NodeId>,
    plan: &ForwardPlan,
    m: usize,
    i: usize,
    heads: usize,
) -> Result<(NodeId, WindowAttn)> {
    let layout = &plan.layout;
    let (_, d_model) = tape.dims(state.seq);
    if d_model % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {} not divisible by {} heads",
            d_model, heads
        )));
    }
    let d = d_model / heads;
    let scale = S::of(1.0 / (d as f64).sqrt());

    let (bs, be) = layout.base_range(i);
    let (ks, ke) = layout.key_range(m, i);
    let base_idx: Vec<usize> = (bs..be).collect();
    let key_idx: Vec<usize> = (ks..ke).collect();

    let cls_i = tape.gather_rows(state.cls, &[i])?;
    let base = tape.gather_rows(state.seq, &base_idx)?;
    let keys = tape.gather_rows(state.seq, &key_idx)?;
    let q_in = tape.concat_rows(&[cls_i, base])?;
    let kv_in = tape.concat_rows(&[cls_i, keys])?;

    let q = tape.matmul(q_in, params.wq)?;
    let q = tape.add_row(q, params.bq)?;
    let k = tape.matmul(kv_in, params.wk)?;
    let k = tape.add_row(k, params.bk)?;
    let v = tape.matmul(kv_in, params.wv)?;
    let v = tape.add_row(v, params.bv)?;

    let bias = bias_lookup(tape, params.bias, plan, m, i, heads)?;
    let mut head_outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add(scores, bias[h])?;
        let attn = tape.softmax(scores)?;
        maps.push(attn);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(cat, params.wo)?;
    let out = tape.add_row(out, params.bo)?;
    Ok((
        out,
        WindowAttn {
            window: i,
            heads: maps,
        },
    ))
}

/// Average per-window base-token outputs into a T x D matrix. Each token's
/// vector is the unweighted mean over the windows holding it as a base
/// token; fringe appearances contribute nothing.
pub fn fuse_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    window_outputs: &[NodeId],
    plan: &ForwardPlan,
) -> Result<NodeId> {
    let layout = &plan.layout;
    if window_outputs.len() != layout.f() {
        return Err(Error::Contract(format!(
            "fuse_tokens: {} outputs for {} windows",
            window_outputs.len(),
            layout.f()
        )));
    }
    if let Some(t) = layout.cover.iter().position(|&c| c == 0) {
        return Err(Error::Layout(format!("token {} covered by no window", t)));
    }
    let w = layout.window;
    let base_rows: Vec<usize> = (1..=w).collect();
    let mut parts = Vec::with_capacity(layout.f());
    for &out in window_outputs {
        parts.push(tape.gather_rows(out, &base_rows)?);
    }
    let stacked = tape.concat_rows(&parts)?;
    let summed = tape.scatter_add_rows(stacked, &plan.fuse_dst, layout.t_len)?;
    let factors: Vec<S> = layout
        .cover
        .iter()
        .map(|&c| S::of(1.0 / c as f64))
        .collect();
    tape.row_scale(summed, &factors)
}

/// One fused-window attention layer at block m: per-window attention, CLS
/// pass-through, base-token fusion. Returns the new state and the retained
/// attention maps.
pub fn fw_attention<S: Scalar>(
    tape: &mut Tape<S>,
    state: &TokenState,
    params: &AttnParams<NodeId>,
    plan: &ForwardPlan,
    m: usize,
    heads: usize,
) -> Result<(TokenState, Vec<WindowAttn>)> {
    let f = plan.layout.f();
    let mut outs = Vec::with_capacity(f);
    let mut records = Vec::with_capacity(f);
    for i in 0..f {
        let (out, rec) = window_attention(tape, state, params, plan, m, i, heads)?;
        outs.push(out);
        records.push(rec);
    }
    let mut cls_rows = Vec::with_capacity(f);
    for &out in &outs {
        cls_rows.push(tape.gather_rows(out, &[0])?);
    }
    let cls = tape.concat_rows(&cls_rows)?;
    let seq = fuse_tokens(tape, &outs, plan)?;
    Ok((TokenState { cls, seq }, records))
}
