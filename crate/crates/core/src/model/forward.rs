use std::f64::consts::{PI, SQRT_2};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Parameters, POSITION_OFFSET};
use crate::error::{Error, Result};
use crate::tokenizer::TokenTriple;

/// Gradients share the layout of the parameters they differentiate.
pub type Gradients = Parameters;

/// Evaluation disables dropout; training draws dropout masks from `rng`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// A batch of token triples.
pub type Batch<'a> = &'a [TokenTriple];

/// Logits `[batch, seq, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Array3<f64>,
}

struct Ctx<'a> {
    macs: u64,
    rng: Option<&'a mut ChaCha8Rng>,
    dropout: f64,
}

impl Ctx<'_> {
    fn mm(&mut self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
        self.macs += (a.nrows() * a.ncols() * b.ncols()) as u64;
        a.dot(&b)
    }

    /// Inverted dropout mask, or `None` when dropout is inactive.
    fn dropout_mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        let p = self.dropout;
        let rng = self.rng.as_mut().filter(|_| p > 0.0)?;
        let keep = 1.0 / (1.0 - p);
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                keep
            }
        }))
    }
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>, eps: f64) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + eps).sqrt();
        row *= *r;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / n;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|o, &d, &x| *o = r * (d - mean_dh - x * mean_dh_xh));
    }
    dx
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    probs_mask: Vec<Option<Array2<f64>>>,
    ctx: Array2<f64>,
    ao_mask: Option<Array2<f64>>,
    ln1: LnCache,
    h1: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    f2_mask: Option<Array2<f64>>,
    ln2: LnCache,
}

struct Encoded {
    ids: Vec<u32>,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    out: Array2<f64>,
}

fn softmax_rows_masked(scores: &mut Array2<f64>, n_keys: usize) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row
            .iter()
            .take(n_keys)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < n_keys {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= sum;
    }
}

/// Runs the encoder over the first `len` positions; keys at or beyond
/// `n_real` are excluded from attention.
fn encode(params: &Parameters, ids: &[u32], n_real: usize, ctx: &mut Ctx) -> Encoded {
    let cfg = &params.config;
    let len = ids.len();
    let (h, heads, dh) = (cfg.hidden, cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::zeros((len, h));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &params.tok_emb.row(id as usize);
        row += &params.pos_emb.row(i + POSITION_OFFSET);
        row += &params.type_emb.row(0);
    }
    let emb_mask = ctx.dropout_mask(len, h);
    apply_mask(&mut x, &emb_mask);

    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let q = ctx.mm(x.view(), layer.w_q.view()) + &layer.b_q;
        let k = ctx.mm(x.view(), layer.w_k.view()) + &layer.b_k;
        let v = ctx.mm(x.view(), layer.w_v.view()) + &layer.b_v;
        let mut attn_ctx = Array2::zeros((len, h));
        let mut probs = Vec::with_capacity(heads);
        let mut probs_mask = Vec::with_capacity(heads);
        for a in 0..heads {
            let cols = s![.., a * dh..(a + 1) * dh];
            let mut p = ctx.mm(q.slice(cols), k.slice(cols).t()) * scale;
            softmax_rows_masked(&mut p, n_real);
            let pm = ctx.dropout_mask(len, len);
            let mut pd = p.clone();
            apply_mask(&mut pd, &pm);
            let ca = ctx.mm(pd.view(), v.slice(cols));
            attn_ctx.slice_mut(cols).assign(&ca);
            probs.push(p);
            probs_mask.push(pm);
        }
        let mut ao = ctx.mm(attn_ctx.view(), layer.w_o.view()) + &layer.b_o;
        let ao_mask = ctx.dropout_mask(len, h);
        apply_mask(&mut ao, &ao_mask);
        let (h1, ln1) = layer_norm(&(&x + &ao), &layer.ln1_g, &layer.ln1_b, cfg.layer_norm_eps);
        let f1 = ctx.mm(h1.view(), layer.w_ff1.view()) + &layer.b_ff1;
        let g = f1.mapv(gelu);
        let mut f2 = ctx.mm(g.view(), layer.w_ff2.view()) + &layer.b_ff2;
        let f2_mask = ctx.dropout_mask(len, h);
        apply_mask(&mut f2, &f2_mask);
        let (out, ln2) = layer_norm(&(&h1 + &f2), &layer.ln2_g, &layer.ln2_b, cfg.layer_norm_eps);
        caches.push(LayerCache {
            x: std::mem::replace(&mut x, out),
            q,
            k,
            v,
            probs,
            probs_mask,
            ctx: attn_ctx,
            ao_mask,
            ln1,
            h1,
            f1,
            g,
            f2_mask,
            ln2,
        });
    }
    Encoded {
        ids: ids.to_vec(),
        emb_mask,
        layers: caches,
        out: x,
    }
}

struct HeadCache {
    rows: Vec<usize>,
    hsel: Array2<f64>,
    t1: Array2<f64>,
    ln: LnCache,
    t3: Array2<f64>,
}

fn head_forward(params: &Parameters, out: &Array2<f64>, rows: &[usize], ctx: &mut Ctx) -> (Array2<f64>, HeadCache) {
    let head = &params.head;
    let hsel = out.select(Axis(0), rows);
    let t1 = ctx.mm(hsel.view(), head.w_dense.view()) + &head.b_dense;
    let t2 = t1.mapv(gelu);
    let (t3, ln) = layer_norm(&t2, &head.ln_g, &head.ln_b, params.config.layer_norm_eps);
    let logits = ctx.mm(t3.view(), params.tok_emb.t()) + &head.out_bias;
    (
        logits,
        HeadCache {
            rows: rows.to_vec(),
            hsel,
            t1,
            ln,
            t3,
        },
    )
}

fn validate_triple(params: &Parameters, t: &TokenTriple) -> Result<usize> {
    let cfg = &params.config;
    let len = t.input_ids.len();
    if t.attention_mask.len() != len || t.labels.len() != len {
        return Err(Error::Shape("input_ids, attention_mask and labels differ in length".into()));
    }
    if len == 0 || len > cfg.max_seq_len() {
        return Err(Error::Shape(format!(
            "sequence length {len} outside 1..={}",
            cfg.max_seq_len()
        )));
    }
    let n_real = t.n_real();
    if n_real == 0 || t.attention_mask[n_real..].iter().any(|&m| m != 0) {
        return Err(Error::Shape("attention mask must be ones followed by zeros".into()));
    }
    if let Some(&bad) = t.input_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::InvalidTokenId(bad));
    }
    for (i, l) in t.labels.iter().enumerate() {
        if let Some(id) = l {
            if *id as usize >= cfg.vocab_size {
                return Err(Error::InvalidTokenId(*id));
            }
            if i >= n_real {
                return Err(Error::Shape(format!("label at padded position {i}")));
            }
        }
    }
    Ok(n_real)
}

/// Logits at every position of every triple, dropout off.
pub fn forward(params: &Parameters, batch: Batch) -> Result<ForwardOutput> {
    let v = params.config.vocab_size;
    let seq = batch.first().map_or(0, TokenTriple::len);
    if batch.iter().any(|t| t.len() != seq) {
        return Err(Error::Shape("triples in a batch must share one length".into()));
    }
    let mut logits = Array3::zeros((batch.len(), seq, v));
    for (b, t) in batch.iter().enumerate() {
        let n_real = validate_triple(params, t)?;
        let mut ctx = Ctx { macs: 0, rng: None, dropout: 0.0 };
        let enc = encode(params, &t.input_ids, n_real, &mut ctx);
        let rows: Vec<usize> = (0..seq).collect();
        let (l, _) = head_forward(params, &enc.out, &rows, &mut ctx);
        logits.index_axis_mut(Axis(0), b).assign(&l);
    }
    Ok(ForwardOutput { logits })
}

/// Multiply-accumulates performed by a full forward pass over `batch`,
/// counted inside the matrix products themselves.
pub fn count_forward_macs(params: &Parameters, batch: Batch) -> Result<u64> {
    let mut total = 0;
    for t in batch {
        let n_real = validate_triple(params, t)?;
        let mut ctx = Ctx { macs: 0, rng: None, dropout: 0.0 };
        let enc = encode(params, &t.input_ids, n_real, &mut ctx);
        let rows: Vec<usize> = (0..t.len()).collect();
        head_forward(params, &enc.out, &rows, &mut ctx);
        total += ctx.macs;
    }
    Ok(total)
}

/// Post-softmax attention weights per layer, `[heads, seq, seq]`.
pub fn attention_weights(params: &Parameters, triple: &TokenTriple) -> Result<Vec<Array3<f64>>> {
    let n_real = validate_triple(params, triple)?;
    let mut ctx = Ctx { macs: 0, rng: None, dropout: 0.0 };
    let enc = encode(params, &triple.input_ids, n_real, &mut ctx);
    let seq = triple.len();
    Ok(enc
        .layers
        .iter()
        .map(|c| {
            let mut a = Array3::zeros((c.probs.len(), seq, seq));
            for (i, p) in c.probs.iter().enumerate() {
                a.index_axis_mut(Axis(0), i).assign(p);
            }
            a
        })
        .collect())
}

/// Mean cross-entropy over labelled positions.
pub fn mlm_loss(output: &ForwardOutput, labels: &[Vec<Option<u32>>]) -> Result<f64> {
    let (b, seq, v) = output.logits.dim();
    if labels.len() != b || labels.iter().any(|l| l.len() != seq) {
        return Err(Error::Shape("labels do not match logits".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (bi, row_labels) in labels.iter().enumerate() {
        for (pos, label) in row_labels.iter().enumerate() {
            let Some(id) = *label else { continue };
            if id as usize >= v {
                return Err(Error::InvalidTokenId(id));
            }
            let row = output.logits.slice(s![bi, pos, ..]);
            total += log_sum_exp(row.iter().copied()) - row[id as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoMaskedPositions);
    }
    Ok(total / count as f64)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Eval-mode logits at `positions` of one triple, computing only its real
/// prefix.
pub(crate) fn predict_at(params: &Parameters, triple: &TokenTriple, positions: &[usize]) -> Result<Array2<f64>> {
    let n_real = validate_triple(params, triple)?;
    if let Some(&p) = positions.iter().find(|&&p| p >= n_real) {
        return Err(Error::Shape(format!("position {p} is padding")));
    }
    let mut ctx = Ctx { macs: 0, rng: None, dropout: 0.0 };
    let enc = encode(params, &triple.input_ids[..n_real], n_real, &mut ctx);
    Ok(head_forward(params, &enc.out, positions, &mut ctx).0)
}

/// Summed masked cross-entropy of a batch; accumulates `scale` times its
/// gradient into `grads`. Returns `(loss_sum, n_labels)`.
///
/// Only each triple's real prefix is encoded: padded keys are excluded from
/// attention, so real-position outputs do not depend on the padding. The
/// head runs once over the masked rows of the whole batch.
pub(crate) fn batch_loss_and_grad(
    params: &Parameters,
    batch: Batch,
    mut rng: Option<&mut ChaCha8Rng>,
    scale: f64,
    grads: &mut Gradients,
) -> Result<(f64, usize)> {
    let h = params.config.hidden;
    let mut encoded = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for triple in batch {
        let n_real = validate_triple(params, triple)?;
        let rows: Vec<usize> = (0..n_real).filter(|&i| triple.labels[i].is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        targets.extend(rows.iter().map(|&i| triple.labels[i].expect("labeled")));
        let mut ctx = Ctx {
            macs: 0,
            dropout: params.config.dropout,
            rng: rng.as_deref_mut(),
        };
        let enc = encode(params, &triple.input_ids[..n_real], n_real, &mut ctx);
        encoded.push((enc, rows));
    }
    if targets.is_empty() {
        return Ok((0.0, 0));
    }
    let mut stacked = Array2::zeros((targets.len(), h));
    let mut k = 0;
    for (enc, rows) in &encoded {
        for &r in rows {
            stacked.row_mut(k).assign(&enc.out.row(r));
            k += 1;
        }
    }
    let mut ctx = Ctx { macs: 0, rng: None, dropout: 0.0 };
    let all: Vec<usize> = (0..targets.len()).collect();
    let (logits, head_cache) = head_forward(params, &stacked, &all, &mut ctx);

    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for (r, &target) in targets.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[target as usize];
        let mut drow = dlogits.row_mut(r);
        Zip::from(&mut drow).and(&row).for_each(|d, &z| *d = (z - lse).exp() * scale);
        drow[target as usize] -= scale;
    }
    let dstacked = head_backward(params, &stacked, &head_cache, &dlogits, grads);
    let mut k = 0;
    for (enc, rows) in &encoded {
        let mut dout = Array2::zeros(enc.out.raw_dim());
        for &r in rows {
            dout.row_mut(r).assign(&dstacked.row(k));
            k += 1;
        }
        encoder_backward(params, enc, dout, grads);
    }
    Ok((loss, targets.len()))
}

fn head_backward(
    params: &Parameters,
    out: &Array2<f64>,
    cache: &HeadCache,
    dlogits: &Array2<f64>,
    grads: &mut Gradients,
) -> Array2<f64> {
    let head = &params.head;
    let g = &mut grads.head;
    g.out_bias += &dlogits.sum_axis(Axis(0));
    general_mat_mul(1.0, &dlogits.t(), &cache.t3, 1.0, &mut grads.tok_emb);
    let dt3 = dlogits.dot(&params.tok_emb);
    let dt2 = layer_norm_back(&dt3, &cache.ln, &head.ln_g, &mut g.ln_g, &mut g.ln_b);
    let dt1 = dt2 * &cache.t1.mapv(gelu_grad);
    g.w_dense += &cache.hsel.t().dot(&dt1);
    g.b_dense += &dt1.sum_axis(Axis(0));
    let dhsel = dt1.dot(&head.w_dense.t());
    let mut dout = Array2::zeros(out.raw_dim());
    for (k, &r) in cache.rows.iter().enumerate() {
        let mut row = dout.row_mut(r);
        row += &dhsel.row(k);
    }
    dout
}

fn encoder_backward(params: &Parameters, enc: &Encoded, mut dout: Array2<f64>, grads: &mut Gradients) {
    let cfg = &params.config;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    for (li, (layer, c)) in params.layers.iter().zip(&enc.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        let dr2 = layer_norm_back(&dout, &c.ln2, &layer.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        let mut df2 = dr2.clone();
        apply_mask(&mut df2, &c.f2_mask);
        g.w_ff2 += &c.g.t().dot(&df2);
        g.b_ff2 += &df2.sum_axis(Axis(0));
        let dgelu = df2.dot(&layer.w_ff2.t());
        let df1 = dgelu * &c.f1.mapv(gelu_grad);
        g.w_ff1 += &c.h1.t().dot(&df1);
        g.b_ff1 += &df1.sum_axis(Axis(0));
        let dh1 = dr2 + df1.dot(&layer.w_ff1.t());

        let dr1 = layer_norm_back(&dh1, &c.ln1, &layer.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
        let mut dao = dr1.clone();
        apply_mask(&mut dao, &c.ao_mask);
        g.w_o += &c.ctx.t().dot(&dao);
        g.b_o += &dao.sum_axis(Axis(0));
        let dctx = dao.dot(&layer.w_o.t());

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for a in 0..heads {
            let cols = s![.., a * dh..(a + 1) * dh];
            let p = &c.probs[a];
            let dca = dctx.slice(cols);
            let mut pd = p.clone();
            apply_mask(&mut pd, &c.probs_mask[a]);
            dv.slice_mut(cols).assign(&pd.t().dot(&dca));
            let mut dp = dca.dot(&c.v.slice(cols).t());
            apply_mask(&mut dp, &c.probs_mask[a]);
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot: f64 = ds_row.iter().zip(p_row).map(|(d, p)| d * p).sum();
                Zip::from(&mut ds_row).and(&p_row).for_each(|d, &p| *d = p * (*d - dot));
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        g.w_q += &c.x.t().dot(&dq);
        g.b_q += &dq.sum_axis(Axis(0));
        g.w_k += &c.x.t().dot(&dk);
        g.b_k += &dk.sum_axis(Axis(0));
        g.w_v += &c.x.t().dot(&dv);
        g.b_v += &dv.sum_axis(Axis(0));
        dout = dr1 + dq.dot(&layer.w_q.t()) + dk.dot(&layer.w_k.t()) + dv.dot(&layer.w_v.t());
    }

    apply_mask(&mut dout, &enc.emb_mask);
    for (i, &id) in enc.ids.iter().enumerate() {
        let d = dout.row(i);
        let mut t = grads.tok_emb.row_mut(id as usize);
        t += &d;
        let mut p = grads.pos_emb.row_mut(i + POSITION_OFFSET);
        p += &d;
    }
    let mut ty = grads.type_emb.row_mut(0);
    ty += &dout.sum_axis(Axis(0));
}

/// Mean masked cross-entropy over the batch and its gradient.
pub fn backward(params: &Parameters, batch: Batch, mode: Mode) -> Result<(f64, Gradients)> {
    let total: usize = batch.iter().map(TokenTriple::n_labels).sum();
    if total == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let mut grads = Parameters::zeros(&params.config);
    let scale = 1.0 / total as f64;
    let mut rng = match mode {
        Mode::Eval => None,
        Mode::Train(r) => Some(r),
    };
    let (loss, _) = batch_loss_and_grad(params, batch, rng.as_deref_mut(), scale, &mut grads)?;
    Ok((loss * scale, grads))
}
