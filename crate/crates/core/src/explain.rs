//! Attention relevancy: head-averaged rectified gradient-attention
//! products per window, assembled into a global token-by-token frame with
//! overlap normalization, propagated multiplicatively across blocks, and
//! reduced to per-timepoint importance weights.

use crate::diffcore::{Array, Scalar, Tape};
use crate::error::{Error, Result};
use crate::fwmsa::ForwardPlan;
use crate::model::{bind, forward, Model};
use std::io::Write;
use std::path::Path;

/// Dense square matrix of explanation scores, row-major f64.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMat {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMat {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.n + c]
    }

    /// self * other.
    pub fn matmul(&self, other: &SquareMat) -> SquareMat {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = SquareMat::zeros(n);
        f64::gemm(
            n,
            n,
            n,
            1.0,
            &self.data,
            n as isize,
            1,
            &other.data,
            n as isize,
            1,
            0.0,
            &mut out.data,
            n as isize,
            1,
        );
        out
    }

    pub fn add_assign(&mut self, other: &SquareMat) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// One block's window attention embedded in the (F+T) global frame.
/// Rows/cols 0..F are CLS tokens, F..F+T the series tokens.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    /// Per-cell sum of window contributions, before normalization.
    pub raw: SquareMat,
    /// Per-cell count of contributing windows.
    pub counts: Vec<u32>,
    /// raw / counts where counts > 0; the normalized map.
    pub avg: SquareMat,
}

/// Accumulated relevancy over blocks in the (F+T) frame.
#[derive(Clone, Debug)]
pub struct RelevancyMap {
    pub f: usize,
    pub t: usize,
    pub mat: SquareMat,
}

/// Head-averaged rectified product relu(A .* dA) for one window.
/// `heads` pairs each head's attention values with its gradient, both
/// row-major `rows` x `cols`.
pub fn grad_weighted_attention(
    heads: &[(Vec<f64>, Vec<f64>)],
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    if heads.is_empty() {
        return Err(Error::Contract("no attention heads supplied".into()));
    }
    let numel = rows * cols;
    for (h, (a, g)) in heads.iter().enumerate() {
        if a.len() != numel || g.len() != numel {
            return Err(Error::Contract(format!(
                "head {}: attention {} / gradient {} entries, expected {}",
                h,
                a.len(),
                g.len(),
                numel
            )));
        }
    }
    let mut out = vec![0.0; numel];
    for (a, g) in heads {
        for (o, (&av, &gv)) in out.iter_mut().zip(a.iter().zip(g.iter())) {
            *o += (av * gv).max(0.0);
        }
    }
    let inv = 1.0 / heads.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Embed per-window maps for block `m` into the global frame. Each
/// window writes its CLS self-cell on the CLS diagonal, its CLS-to-token
/// row and token-to-CLS column, and its token-token tile at the true
/// temporal positions; overlapping writes are averaged per cell.
pub fn assemble_global(
    maps: &[Vec<f64>],
    plan: &ForwardPlan,
    m: usize,
) -> Result<GlobalAttention> {
    let layout = &plan.layout;
    let f = layout.f();
    let t = layout.t_len;
    let w = layout.window;
    let n = f + t;
    if maps.len() != f {
        return Err(Error::Contract(format!(
            "{} window maps for {} windows",
            maps.len(),
            f
        )));
    }
    if m >= layout.blocks() {
        return Err(Error::Contract(format!("block {} out of range", m)));
    }
    let mut raw = SquareMat::zeros(n);
    let mut counts = vec![0u32; n * n];
    for (i, map) in maps.iter().enumerate() {
        let (b0, b1) = layout.base_range(i);
        let (k0, k1) = layout.key_range(m, i);
        let kw = k1 - k0;
        let cols = 1 + kw;
        if map.len() != (1 + w) * cols {
            return Err(Error::Contract(format!(
                "window {} map has {} entries, expected {}",
                i,
                map.len(),
                (1 + w) * cols
            )));
        }
        if b1 > t || k1 > t || i >= f {
            return Err(Error::Layout(format!(
                "window {} exceeds the series frame",
                i
            )));
        }
        let mut add = |r: usize, c: usize, v: f64| {
            raw.data[r * n + c] += v;
            counts[r * n + c] += 1;
        };
        add(i, i, map[0]);
        for j in 0..kw {
            add(i, f + k0 + j, map[1 + j]);
        }
        for q in 0..w {
            add(f + b0 + q, i, map[(1 + q) * cols]);
        }
        for q in 0..w {
            for j in 0..kw {
                add(f + b0 + q, f + k0 + j, map[(1 + q) * cols + 1 + j]);
            }
        }
    }
    let mut avg = raw.clone();
    for (v, &c) in avg.data.iter_mut().zip(&counts) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    Ok(GlobalAttention { raw, counts, avg })
}

/// Relevancy accumulation: starting from the identity, apply
/// R <- R + G R for each block's normalized global attention G, in order.
pub fn propagate(globals: &[GlobalAttention], f: usize, t: usize) -> Result<RelevancyMap> {
    let n = f + t;
    let mut mat = SquareMat::identity(n);
    for (m, g) in globals.iter().enumerate() {
        if g.avg.n != n {
            return Err(Error::Contract(format!(
                "block {} frame is {}, expected {}",
                m, g.avg.n, n
            )));
        }
        let delta = g.avg.matmul(&mat);
        mat.add_assign(&delta);
    }
    Ok(RelevancyMap { f, t, mat })
}

/// Mean over the CLS rows of each series-token column.
pub fn importance_weights(r: &RelevancyMap) -> Vec<f64> {
    let n = r.f + r.t;
    debug_assert_eq!(r.mat.n, n);
    let mut w = vec![0.0; r.t];
    for i in 0..r.f {
        for (j, wj) in w.iter_mut().enumerate() {
            *wj += r.mat.data[i * n + r.f + j];
        }
    }
    let inv = 1.0 / r.f as f64;
    for wj in &mut w {
        *wj *= inv;
    }
    w
}

/// Indices of the k largest weights, ties resolved toward earlier time.
pub fn top_k_landmarks(w: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > w.len() {
        return Err(Error::Contract(format!(
            "k={} out of range 1..={}",
            k,
            w.len()
        )));
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| {
        w[b].partial_cmp(&w[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// A full explanation of one model decision.
#[derive(Clone, Debug)]
pub struct Explanation {
    /// The class whose logit was explained.
    pub class: usize,
    pub logits: Vec<f64>,
    pub map: RelevancyMap,
    pub importance: Vec<f64>,
}

/// Run the model once in eval mode with attention capture, take the
/// gradient of one class logit, and distill the relevancy map. With no
/// class given, the predicted (argmax) class is explained.
pub fn explain_series<S: Scalar>(
    model: &Model<S>,
    series: &Array<S>,
    class: Option<usize>,
) -> Result<Explanation> {
    let plan = model.plan(series.dims().0)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &model.params);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let out = forward(
        &mut tape, series, &bound, &model.cfg, &plan, false, &mut rng, true,
    )?;
    let logits: Vec<f64> = tape
        .value(out.logits)
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let class = match class {
        Some(c) if c < logits.len() => c,
        Some(c) => {
            return Err(Error::Contract(format!(
                "class {} out of range for {} logits",
                c,
                logits.len()
            )))
        }
        None => {
            let mut best = 0;
            for (j, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = j;
                }
            }
            best
        }
    };
    let target = tape.slice_cols(out.logits, class, 1)?;
    tape.backward(target)?;

    let records = out
        .records
        .ok_or_else(|| Error::Contract("attention capture was not enabled".into()))?;
    let mut globals = Vec::with_capacity(records.len());
    for (m, recs) in records.iter().enumerate() {
        let mut maps = Vec::with_capacity(recs.len());
        for rec in recs {
            let (rows, cols) = tape.dims(rec.heads[0]);
            let heads: Vec<(Vec<f64>, Vec<f64>)> = rec
                .heads
                .iter()
                .map(|&id| {
                    let a: Vec<f64> = tape.value(id).iter().map(|v| v.to_f64_lossy()).collect();
                    let g: Vec<f64> = match tape.grad(id) {
                        Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
                        None => vec![0.0; rows * cols],
                    };
                    (a, g)
                })
                .collect();
            maps.push(grad_weighted_attention(&heads, rows, cols)?);
        }
        globals.push(assemble_global(&maps, &plan, m)?);
    }
    let map = propagate(&globals, plan.layout.f(), plan.layout.t_len)?;
    let importance = importance_weights(&map);
    Ok(Explanation {
        class,
        logits,
        map,
        importance,
    })
}

/// Write an explanation as delimited text: a `# T=.. F=.. M=..` header,
/// the (F+T) x (F+T) relevancy rows, then one row of T importance weights.
pub fn write_relevancy(path: &Path, expl: &Explanation, blocks: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# T={} F={} M={}", expl.map.t, expl.map.f, blocks)?;
    let n = expl.map.f + expl.map.t;
    for r in 0..n {
        let row: Vec<String> = (0..n)
            .map(|c| format!("{:.5e}", expl.map.mat.at(r, c)))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    let row: Vec<String> = expl
        .importance
        .iter()
        .map(|v| format!("{:.5e}", v))
        .collect();
    writeln!(w, "{}", row.join(","))?;
    w.flush()?;
    Ok(())
}
