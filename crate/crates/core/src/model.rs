//! The block cascade: embedding, pre-norm fused-window attention and MLP
//! blocks with residuals, CLS aggregation, classifier head, and the loss
//! L = CE + lambda * CWR. Also the versioned checkpoint format.

use crate::diffcore::{Array, NodeId, Scalar, Tape};
use crate::error::{Error, Result};
use crate::fwmsa::{
    bias_table_len, fw_attention, plan_windows, AttnParams, ForwardPlan, TokenState, WindowAttn,
    WindowSpec,
};
use rand::Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const LN_EPS: f64 = 1e-5;

/// Architecture switches; all true for the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    /// Off: classify on mean output series tokens instead of CLS tokens.
    pub use_cls: bool,
    /// Off: one window spanning the whole series.
    pub use_windowing: bool,
    /// Off: stride equals the window size (no overlap to fuse).
    pub use_fusion: bool,
    /// Off: no fringe keys at any block.
    pub use_cross_attn: bool,
    /// Off: lambda = 0.
    pub use_cwr: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_cls: true,
            use_windowing: true,
            use_fusion: true,
            use_cross_attn: true,
            use_cwr: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub window: WindowSpec,
    pub mlp_expansion: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub lambda_cwr: f64,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: N=16, D=32, H=4, M=4, W=20, alpha=0.4, beta=2.
    fn default() -> Self {
        Self {
            n_channels: 16,
            model_dim: 32,
            heads: 4,
            window: WindowSpec {
                window: 20,
                alpha: 0.4,
                beta: 2,
                blocks: 4,
            },
            mlp_expansion: 4,
            dropout: 0.1,
            num_classes: 2,
            lambda_cwr: 1.0,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn blocks(&self) -> usize {
        self.window.blocks
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.n_channels < 1 {
            return Err(Error::Config("n_channels must be >= 1".into()));
        }
        if self.model_dim < 1 || self.heads < 1 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.mlp_expansion < 1 {
            return Err(Error::Config("mlp_expansion must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0,1)",
                self.dropout
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.lambda_cwr < 0.0 {
            return Err(Error::Config("lambda_cwr must be >= 0".into()));
        }
        Ok(())
    }

    /// Window geometry after ablation flags, for a series of length `t`.
    pub fn effective_spec(&self, t: usize) -> WindowSpec {
        let mut spec = self.window;
        if !self.ablation.use_windowing {
            spec.window = t;
            spec.alpha = 1.0;
        }
        if !self.ablation.use_fusion {
            spec.alpha = 1.0;
        }
        if !self.ablation.use_cross_attn {
            spec.beta = 0;
        }
        spec
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.use_cwr {
            self.lambda_cwr
        } else {
            0.0
        }
    }
}

/// Per-block parameters; `P` is an array in storage, a node when bound.
#[derive(Clone, Debug)]
pub struct BlockParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub attn: AttnParams<P>,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

impl<P> BlockParams<P> {
    fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> BlockParams<Q> {
        BlockParams {
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            attn: self.attn.map(&mut f),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
            mlp_w1: f(&self.mlp_w1),
            mlp_b1: f(&self.mlp_b1),
            mlp_w2: f(&self.mlp_w2),
            mlp_b2: f(&self.mlp_b2),
        }
    }
}

/// All trainable state. Field order fixes the canonical parameter order
/// used by the optimizer, checkpoints, and gradient collection.
#[derive(Clone, Debug)]
pub struct ParamSet<P> {
    pub embed_w: P,
    pub embed_b: P,
    /// One learned vector, replicated to every window's initial CLS.
    pub cls: P,
    pub blocks: Vec<BlockParams<P>>,
    pub head_w: P,
    pub head_b: P,
}

pub type ModelParams<S> = ParamSet<Array<S>>;

impl<P> ParamSet<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ParamSet<Q> {
        ParamSet {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            cls: f(&self.cls),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Visit every parameter with its canonical name, in canonical order.
    pub fn for_each(&self, mut f: impl FnMut(String, &P)) {
        f("embed.w".into(), &self.embed_w);
        f("embed.b".into(), &self.embed_b);
        f("cls".into(), &self.cls);
        for (m, b) in self.blocks.iter().enumerate() {
            f(format!("block{}.ln1.gamma", m), &b.ln1_gamma);
            f(format!("block{}.ln1.beta", m), &b.ln1_beta);
            b.attn
                .for_each(|name, p| f(format!("block{}.attn.{}", m, name), p));
            f(format!("block{}.ln2.gamma", m), &b.ln2_gamma);
            f(format!("block{}.ln2.beta", m), &b.ln2_beta);
            f(format!("block{}.mlp.w1", m), &b.mlp_w1);
            f(format!("block{}.mlp.b1", m), &b.mlp_b1);
            f(format!("block{}.mlp.w2", m), &b.mlp_w2);
            f(format!("block{}.mlp.b2", m), &b.mlp_b2);
        }
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    /// Mutable visit in the same canonical order as [`Self::for_each`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut P)) {
        f("embed.w".into(), &mut self.embed_w);
        f("embed.b".into(), &mut self.embed_b);
        f("cls".into(), &mut self.cls);
        for (m, b) in self.blocks.iter_mut().enumerate() {
            f(format!("block{}.ln1.gamma", m), &mut b.ln1_gamma);
            f(format!("block{}.ln1.beta", m), &mut b.ln1_beta);
            f(format!("block{}.attn.wq", m), &mut b.attn.wq);
            f(format!("block{}.attn.bq", m), &mut b.attn.bq);
            f(format!("block{}.attn.wk", m), &mut b.attn.wk);
            f(format!("block{}.attn.bk", m), &mut b.attn.bk);
            f(format!("block{}.attn.wv", m), &mut b.attn.wv);
            f(format!("block{}.attn.bv", m), &mut b.attn.bv);
            f(format!("block{}.attn.wo", m), &mut b.attn.wo);
            f(format!("block{}.attn.bo", m), &mut b.attn.bo);
            f(format!("block{}.attn.bias", m), &mut b.attn.bias);
            f(format!("block{}.ln2.gamma", m), &mut b.ln2_gamma);
            f(format!("block{}.ln2.beta", m), &mut b.ln2_beta);
            f(format!("block{}.mlp.w1", m), &mut b.mlp_w1);
            f(format!("block{}.mlp.b1", m), &mut b.mlp_b1);
            f(format!("block{}.mlp.w2", m), &mut b.mlp_w2);
            f(format!("block{}.mlp.b2", m), &mut b.mlp_b2);
        }
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn convert<T: Scalar>(&self) -> ModelParams<T> {
        self.map(|a| a.convert::<T>())
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, a| n += a.numel());
        n
    }
}

/// How a parameter tensor is filled at creation.
enum Fill {
    /// Uniform in +-1/sqrt(fan_in).
    Linear(usize),
    /// Normal with std 0.02.
    Gauss,
    Ones,
    Zeros,
}

fn build_params<S: Scalar>(
    cfg: &ModelConfig,
    t_ref: usize,
    tensor: &mut dyn FnMut(Fill, &[usize]) -> Array<S>,
) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let spec = cfg.effective_spec(t_ref);
    let d = cfg.model_dim;
    let n = cfg.n_channels;
    let hidden = d * cfg.mlp_expansion;
    let mut blocks = Vec::with_capacity(spec.blocks);
    for m in 0..spec.blocks {
        let e = bias_table_len(spec.window, spec.fringe(m));
        blocks.push(BlockParams {
            ln1_gamma: tensor(Fill::Ones, &[1, d]),
            ln1_beta: tensor(Fill::Zeros, &[1, d]),
            attn: AttnParams {
                wq: tensor(Fill::Linear(d), &[d, d]),
                bq: tensor(Fill::Linear(d), &[1, d]),
                wk: tensor(Fill::Linear(d), &[d, d]),
                bk: tensor(Fill::Linear(d), &[1, d]),
                wv: tensor(Fill::Linear(d), &[d, d]),
                bv: tensor(Fill::Linear(d), &[1, d]),
                wo: tensor(Fill::Linear(d), &[d, d]),
                bo: tensor(Fill::Linear(d), &[1, d]),
                bias: tensor(Fill::Gauss, &[1, cfg.heads * e]),
            },
            ln2_gamma: tensor(Fill::Ones, &[1, d]),
            ln2_beta: tensor(Fill::Zeros, &[1, d]),
            mlp_w1: tensor(Fill::Linear(d), &[d, hidden]),
            mlp_b1: tensor(Fill::Linear(d), &[1, hidden]),
            mlp_w2: tensor(Fill::Linear(hidden), &[hidden, d]),
            mlp_b2: tensor(Fill::Linear(hidden), &[1, d]),
        });
    }
    Ok(ParamSet {
        embed_w: tensor(Fill::Linear(n), &[n, d]),
        embed_b: tensor(Fill::Linear(n), &[1, d]),
        cls: tensor(Fill::Gauss, &[1, d]),
        blocks,
        head_w: tensor(Fill::Linear(d), &[d, cfg.num_classes]),
        head_b: tensor(Fill::Linear(d), &[1, cfg.num_classes]),
    })
}

/// Fresh parameters. `t_ref` sizes the bias tables when windowing is off
/// (the single global window then spans the series).
pub fn init_params<S: Scalar, R: Rng>(
    cfg: &ModelConfig,
    t_ref: usize,
    rng: &mut R,
) -> Result<ModelParams<S>> {
    build_params(cfg, t_ref, &mut |fill, shape| match fill {
        Fill::Linear(fan_in) => {
            Array::<S>::rand_uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        }
        Fill::Gauss => Array::randn(shape, 0.02, rng),
        Fill::Ones => {
            let n: usize = shape.iter().product();
            Array::from_vec(shape, vec![S::one(); n]).expect("static shape").param()
        }
        Fill::Zeros => Array::zeros(shape),
    })
}

/// Zero-valued parameters with the exact shapes of [`init_params`]; used
/// as the fill target when loading checkpoints.
pub fn zero_params<S: Scalar>(cfg: &ModelConfig, t_ref: usize) -> Result<ModelParams<S>> {
    build_params(cfg, t_ref, &mut |_, shape| Array::zeros(shape))
}

/// Register every parameter on a tape; node ids mirror the param structure.
pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &ModelParams<S>) -> ParamSet<NodeId> {
    params.map(|a| tape.leaf(a))
}

/// Gradients in canonical parameter order; zeros where none flowed.
pub fn collect_grads<S: Scalar>(tape: &Tape<S>, bound: &ParamSet<NodeId>) -> Vec<Vec<S>> {
    let mut out = Vec::new();
    bound.for_each(|_, &id| {
        let (r, c) = tape.dims(id);
        out.push(match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); r * c],
        });
    });
    out
}

pub struct ForwardOutput {
    pub logits: NodeId,
    /// F x D final CLS tokens.
    pub final_cls: NodeId,
    /// Per block, per window attention maps; present iff capture was on.
    pub records: Option<Vec<Vec<WindowAttn>>>,
}

/// Geometry for one series length under this config's ablations.
pub fn forward_plan(cfg: &ModelConfig, t: usize) -> Result<ForwardPlan> {
    let spec = cfg.effective_spec(t);
    Ok(ForwardPlan::new(plan_windows(t, &spec)?))
}

/// Run the block cascade over one series (T x N).
#[allow(clippy::too_many_arguments)]
pub fn forward<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    series: &Array<S>,
    bound: &ParamSet<NodeId>,
    cfg: &ModelConfig,
    plan: &ForwardPlan,
    train: bool,
    rng: &mut R,
    capture: bool,
) -> Result<ForwardOutput> {
    let (t, n) = series.dims();
    if n != cfg.n_channels {
        return Err(Error::Config(format!(
            "series has {} channels, config expects {}",
            n, cfg.n_channels
        )));
    }
    if t != plan.layout.t_len {
        return Err(Error::Contract(format!(
            "series length {} but plan built for {}",
            t, plan.layout.t_len
        )));
    }
    if plan.layout.blocks() != cfg.blocks() {
        return Err(Error::Contract("plan block count mismatch".into()));
    }
    if series.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("series contains non-finite values".into()));
    }

    let f = plan.layout.f();
    let x = tape.leaf(series);
    let emb = tape.matmul(x, bound.embed_w)?;
    let seq = tape.add_row(emb, bound.embed_b)?;
    let cls = tape.gather_rows(bound.cls, &vec![0; f])?;
    let mut state = TokenState { cls, seq };
    let mut records = Vec::new();

    for (m, blk) in bound.blocks.iter().enumerate() {
        let n_cls = tape.layernorm(state.cls, blk.ln1_gamma, blk.ln1_beta, LN_EPS)?;
        let n_seq = tape.layernorm(state.seq, blk.ln1_gamma, blk.ln1_beta, LN_EPS)?;
        let normed = TokenState {
            cls: n_cls,
            seq: n_seq,
        };
        let (attn_out, recs) = fw_attention(tape, &normed, &blk.attn, plan, m, cfg.heads)?;
        let cls_drop = tape.dropout(attn_out.cls, cfg.dropout, train, rng)?;
        let seq_drop = tape.dropout(attn_out.seq, cfg.dropout, train, rng)?;
        let cls1 = tape.add(state.cls, cls_drop)?;
        let seq1 = tape.add(state.seq, seq_drop)?;

        let cat = tape.concat_rows(&[cls1, seq1])?;
        let normed = tape.layernorm(cat, blk.ln2_gamma, blk.ln2_beta, LN_EPS)?;
        let h = tape.matmul(normed, blk.mlp_w1)?;
        let h = tape.add_row(h, blk.mlp_b1)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, cfg.dropout, train, rng)?;
        let h = tape.matmul(h, blk.mlp_w2)?;
        let h = tape.add_row(h, blk.mlp_b2)?;
        let h = tape.dropout(h, cfg.dropout, train, rng)?;
        let out = tape.add(cat, h)?;

        let cls_rows: Vec<usize> = (0..f).collect();
        let seq_rows: Vec<usize> = (f..f + t).collect();
        state = TokenState {
            cls: tape.gather_rows(out, &cls_rows)?,
            seq: tape.gather_rows(out, &seq_rows)?,
        };
        if capture {
            records.push(recs);
        }
    }

    let pooled = if cfg.ablation.use_cls {
        tape.mean_rows(state.cls)?
    } else {
        tape.mean_rows(state.seq)?
    };
    let logits = tape.matmul(pooled, bound.head_w)?;
    let logits = tape.add_row(logits, bound.head_b)?;
    Ok(ForwardOutput {
        logits,
        final_cls: state.cls,
        records: if capture { Some(records) } else { None },
    })
}

/// Deviation of per-window CLS tokens from their mean:
/// (1/(D*F)) * sum_i ||cls_i - mean_j cls_j||^2.
pub fn cwr_loss<S: Scalar>(tape: &mut Tape<S>, final_cls: NodeId) -> Result<NodeId> {
    let (f, d) = tape.dims(final_cls);
    let mean = tape.mean_rows(final_cls)?;
    let neg_mean = tape.scale(mean, -S::one())?;
    let centered = tape.add_row(final_cls, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, S::of(1.0 / (d as f64 * f as f64)))
}

pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub cwr: NodeId,
}

/// CE plus lambda-weighted CWR; lambda comes from the config after
/// ablation (use_cwr=off forces 0).
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    label: usize,
    final_cls: NodeId,
    cfg: &ModelConfig,
) -> Result<LossNodes> {
    let ce = tape.cross_entropy(logits, label)?;
    let cwr = cwr_loss(tape, final_cls)?;
    let weighted = tape.scale(cwr, S::of(cfg.effective_lambda()))?;
    let total = tape.add(ce, weighted)?;
    Ok(LossNodes { total, ce, cwr })
}

/// A configured model with parameters and the reference length its bias
/// tables were sized for (relevant only when windowing is ablated).
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ModelParams<S>,
    pub t_ref: usize,
}

impl<S: Scalar> Model<S> {
    pub fn init<R: Rng>(cfg: ModelConfig, t_ref: usize, rng: &mut R) -> Result<Self> {
        let params = init_params(&cfg, t_ref, rng)?;
        Ok(Self {
            cfg,
            params,
            t_ref,
        })
    }

    /// Plan geometry for a series length, enforcing the fixed-length
    /// restriction of the global-window ablation.
    pub fn plan(&self, t: usize) -> Result<ForwardPlan> {
        if !self.cfg.ablation.use_windowing && t != self.t_ref {
            return Err(Error::Config(format!(
                "global-window model fixed at length {}, got {}",
                self.t_ref, t
            )));
        }
        forward_plan(&self.cfg, t)
    }

    /// Eval-mode logits for one series.
    pub fn predict(&self, series: &Array<S>) -> Result<Vec<S>> {
        let plan = self.plan(series.dims().0)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = forward(
            &mut tape, series, &bound, &self.cfg, &plan, false, &mut rng, false,
        )?;
        Ok(tape.value(out.logits).to_vec())
    }
}

// ---- checkpoint format ----

const CKPT_MAGIC: &[u8; 4] = b"FWTC";
const CKPT_VERSION: u32 = 1;

/// Model-config key/value lines echoed inside checkpoints and accepted by
/// the run-config parser.
pub fn config_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("n_channels".into(), cfg.n_channels.to_string()),
        ("model_dim".into(), cfg.model_dim.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("blocks".into(), cfg.blocks().to_string()),
        ("window".into(), cfg.window.window.to_string()),
        ("alpha".into(), cfg.window.alpha.to_string()),
        ("beta".into(), cfg.window.beta.to_string()),
        ("mlp_expansion".into(), cfg.mlp_expansion.to_string()),
        ("dropout".into(), cfg.dropout.to_string()),
        ("num_classes".into(), cfg.num_classes.to_string()),
        ("lambda_cwr".into(), cfg.lambda_cwr.to_string()),
        ("use_cls".into(), cfg.ablation.use_cls.to_string()),
        ("use_windowing".into(), cfg.ablation.use_windowing.to_string()),
        ("use_fusion".into(), cfg.ablation.use_fusion.to_string()),
        ("use_cross_attn".into(), cfg.ablation.use_cross_attn.to_string()),
        ("use_cwr".into(), cfg.ablation.use_cwr.to_string()),
    ]
}

/// Apply one key=value pair; Ok(false) means the key is not a model key.
pub fn apply_config_key(cfg: &mut ModelConfig, key: &str, val: &str, line: usize) -> Result<bool> {
    let bad = |what: &str| Error::Parse {
        line,
        field: 2,
        msg: format!("invalid {} value '{}'", what, val),
    };
    match key {
        "n_channels" => cfg.n_channels = val.parse().map_err(|_| bad(key))?,
        "model_dim" => cfg.model_dim = val.parse().map_err(|_| bad(key))?,
        "heads" => cfg.heads = val.parse().map_err(|_| bad(key))?,
        "blocks" => cfg.window.blocks = val.parse().map_err(|_| bad(key))?,
        "window" => cfg.window.window = val.parse().map_err(|_| bad(key))?,
        "alpha" => cfg.window.alpha = val.parse().map_err(|_| bad(key))?,
        "beta" => cfg.window.beta = val.parse().map_err(|_| bad(key))?,
        "mlp_expansion" => cfg.mlp_expansion = val.parse().map_err(|_| bad(key))?,
        "dropout" => cfg.dropout = val.parse().map_err(|_| bad(key))?,
        "num_classes" => cfg.num_classes = val.parse().map_err(|_| bad(key))?,
        "lambda_cwr" => cfg.lambda_cwr = val.parse().map_err(|_| bad(key))?,
        "use_cls" => cfg.ablation.use_cls = val.parse().map_err(|_| bad(key))?,
        "use_windowing" => cfg.ablation.use_windowing = val.parse().map_err(|_| bad(key))?,
        "use_fusion" => cfg.ablation.use_fusion = val.parse().map_err(|_| bad(key))?,
        "use_cross_attn" => cfg.ablation.use_cross_attn = val.parse().map_err(|_| bad(key))?,
        "use_cwr" => cfg.ablation.use_cwr = val.parse().map_err(|_| bad(key))?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serialize config echo plus named parameter arrays, f32 little-endian.
pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;
    write_u32(&mut w, model.t_ref as u32)?;
    let echo: String = config_entries(&model.cfg)
        .iter()
        .map(|(k, v)| format!("{}={}\n", k, v))
        .collect();
    write_u32(&mut w, echo.len() as u32)?;
    w.write_all(echo.as_bytes())?;
    write_u32(&mut w, model.params.count() as u32)?;
    let mut err = None;
    model.params.for_each(|name, a| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            let nb = name.as_bytes();
            write_u32(&mut w, nb.len() as u32)?;
            w.write_all(nb)?;
            write_u32(&mut w, a.shape().len() as u32)?;
            for &d in a.shape() {
                write_u32(&mut w, d as u32)?;
            }
            for &v in a.data() {
                w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => {
            w.flush()?;
            Ok(())
        }
    }
}

/// Read a checkpoint back; inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Parse {
            line: 1,
            field: 1,
            msg: "not a checkpoint file (bad magic)".into(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let t_ref = read_u32(&mut r)? as usize;
    let echo_len = read_u32(&mut r)? as usize;
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo)?;
    let echo = String::from_utf8(echo).map_err(|_| Error::Parse {
        line: 1,
        field: 1,
        msg: "config echo is not utf-8".into(),
    })?;
    let mut cfg = ModelConfig::default();
    for (ln, line) in echo.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or(Error::Parse {
            line: ln + 1,
            field: 1,
            msg: "expected key=value".into(),
        })?;
        if !apply_config_key(&mut cfg, k, v, ln + 1)? {
            return Err(Error::Parse {
                line: ln + 1,
                field: 1,
                msg: format!("unknown config key '{}'", k),
            });
        }
    }
    cfg.validate()?;

    let count = read_u32(&mut r)? as usize;
    let mut arrays: HashMap<String, Array<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|_| Error::Parse {
            line: 1,
            field: 1,
            msg: "parameter name is not utf-8".into(),
        })?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        arrays.insert(name, Array::from_vec(&shape, data)?.param());
    }

    // Shape the parameter set from config, then fill by name.
    let mut params: ModelParams<f32> = zero_params(&cfg, t_ref)?;
    let mut missing = Vec::new();
    let mut mismatch = Vec::new();
    params.for_each_mut(|name, slot| match arrays.remove(&name) {
        Some(a) if a.shape() == slot.shape() => *slot = a,
        Some(a) => mismatch.push(format!(
            "{}: file {:?} vs config {:?}",
            name,
            a.shape().to_vec(),
            slot.shape().to_vec()
        )),
        None => missing.push(name),
    });
    if !missing.is_empty() || !mismatch.is_empty() || !arrays.is_empty() {
        let extras: Vec<String> = arrays.into_keys().collect();
        return Err(Error::Config(format!(
            "checkpoint does not match config: missing {:?}, shape mismatches {:?}, extras {:?}",
            missing, mismatch, extras
        )));
    }
    Ok(Model {
        cfg,
        params,
        t_ref,
    })
}
