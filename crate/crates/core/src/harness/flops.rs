//! Analytic attention cost (multiply-accumulates) from the window
//! geometry, plus measured forward wall-clock.

use crate::diffcore::{Array, Tape};
use crate::error::Result;
use crate::fwmsa::plan_windows;
use crate::model::{bind, forward, forward_plan, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-geometry attention cost. Counts multiply-accumulates for the
/// score products, the attention-weighted values, and the four linear
/// projections, over every window of every block, honoring boundary
/// clipping and the trailing anchor.
#[derive(Clone, Debug)]
pub struct FlopReport {
    pub t: usize,
    pub window: usize,
    pub stride: usize,
    pub f: usize,
    pub l_per_block: Vec<usize>,
    /// Attention MACs per block.
    pub per_block: Vec<u64>,
    /// Subtotal of the score-product (QK) term across blocks.
    pub qk: u64,
    pub total: u64,
    /// Measured seconds per forward pass, when benchmarked.
    pub forward_seconds: Option<f64>,
}

/// Count attention MACs for this config at series length `t`.
pub fn flop_model(cfg: &ModelConfig, t: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let spec = cfg.effective_spec(t);
    let layout = plan_windows(t, &spec)?;
    let d = cfg.model_dim as u64;
    let w = layout.window as u64;
    let rows = 1 + w; // CLS plus base queries
    let mut per_block = Vec::with_capacity(layout.blocks());
    let mut qk_total = 0u64;
    let mut total = 0u64;
    for m in 0..layout.blocks() {
        let mut block = 0u64;
        for i in 0..layout.f() {
            let (k0, k1) = layout.key_range(m, i);
            let keys = 1 + (k1 - k0) as u64; // CLS plus clipped span
            let qk = rows * keys * d;
            let av = rows * keys * d;
            let proj = 2 * rows * d * d + 2 * keys * d * d;
            qk_total += qk;
            block += qk + av + proj;
        }
        per_block.push(block);
        total += block;
    }
    Ok(FlopReport {
        t,
        window: layout.window,
        stride: spec.stride(),
        f: layout.f(),
        l_per_block: layout.l_per_block.clone(),
        per_block,
        qk: qk_total,
        total,
        forward_seconds: None,
    })
}

/// Best-of-`reps` wall-clock of one eval-mode forward pass at length `t`
/// on a freshly initialized model over random data.
pub fn measure_forward(cfg: &ModelConfig, t: usize, reps: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::<f32>::init(cfg.clone(), t, &mut rng)?;
    let series = Array::<f32>::randn(&[t, cfg.n_channels], 1.0, &mut rng);
    let plan = forward_plan(cfg, t)?;
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = std::time::Instant::now();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &model.params);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(
            &mut tape, &series, &bound, cfg, &plan, false, &mut drop_rng, false,
        )?;
        std::hint::black_box(tape.value(out.logits));
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}
