//! Transformer building blocks with explicit forward caches and hand-written
//! reverse-mode backward passes. All math is 64-bit.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in × out]`; `y = x·w + b`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_fn((n_in, n_out), |_| rng.random_range(-bound..bound));
        Self {
            w,
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates weight grads into `grad` (when given) and returns `dx`.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &Array2<f64>,
        grad: Option<&mut Linear>,
    ) -> Array2<f64> {
        if let Some(g) = grad {
            g.w += &x.t().dot(dy);
            g.b += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &LnCache,
        grad: Option<&mut LayerNorm>,
    ) -> Array2<f64> {
        if let Some(g) = grad {
            g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
            g.beta += &dy.sum_axis(Axis(0));
        }
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, dxh, xh, &is| {
                let sum_d = dxh.sum();
                let sum_dx = dxh.dot(&xh);
                Zip::from(&mut out).and(&dxh).and(&xh).for_each(|o, &g, &h| {
                    *o = is / d * (d * g - sum_d - h * sum_dx);
                });
            });
        dx
    }
}

pub fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Sinusoidal position table `[n × d]`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Low-rank factor pair: `ΔW = A·B`, `A: [d × r]`, `B: [r × k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraPair {
    pub fn init(d: usize, k: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).unwrap();
        Self {
            a: Array2::from_shape_fn((d, rank), |_| normal.sample(rng)),
            b: Array2::zeros((rank, k)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub fn delta(&self, scale: f64) -> Array2<f64> {
        self.a.dot(&self.b) * scale
    }
}

/// Adapters attached to one block's projections plus their runtime settings.
#[derive(Clone, Copy, Default)]
pub struct BlockLora<'a> {
    /// Indexed query, key, value, output.
    pub pairs: [Option<&'a LoraPair>; 4],
    pub scale: f64,
}

/// Dropout source for the adapter input path. `None` means eval mode.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

struct LoraCache {
    /// Adapter input after dropout (and inverse-keep scaling).
    input: Option<Array2<f64>>,
    mask: Option<Array2<f64>>,
    /// `input · A`
    u: Array2<f64>,
}

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    lora: [Option<LoraCache>; 4],
}

pub struct BlockCache {
    ln1: LnCache,
    a1: Array2<f64>,
    attn: AttnCache,
    ln2: LnCache,
    a2: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
}

/// Keys and values of already-processed positions, `[t × d]` each.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl KvCache {
    pub fn new(d: usize) -> Self {
        Self {
            k: Array2::zeros((0, d)),
            v: Array2::zeros((0, d)),
        }
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }

    fn append(&mut self, k: &Array2<f64>, v: &Array2<f64>) {
        self.k.append(Axis(0), k.view()).expect("matching width");
        self.v.append(Axis(0), v.view()).expect("matching width");
    }
}

/// Which gradients a backward pass must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradNeeds {
    pub base: bool,
    pub lora: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            q: Linear::init(d, d, rng),
            k: Linear::init(d, d, rng),
            v: Linear::init(d, d, rng),
            o: Linear::init(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(d, d_ff, rng),
            fc2: Linear::init(d_ff, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
            ln2: self.ln2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn projection(&self, idx: usize) -> &Linear {
        match idx {
            0 => &self.q,
            1 => &self.k,
            2 => &self.v,
            _ => &self.o,
        }
    }

    pub fn projection_mut(&mut self, idx: usize) -> &mut Linear {
        match idx {
            0 => &mut self.q,
            1 => &mut self.k,
            2 => &mut self.v,
            _ => &mut self.o,
        }
    }

    fn project(
        &self,
        idx: usize,
        x: &Array2<f64>,
        lora: &BlockLora,
        dropout: &mut Option<Dropout>,
    ) -> (Array2<f64>, Option<LoraCache>) {
        let mut y = self.projection(idx).forward(&x.view());
        let Some(pair) = lora.pairs[idx] else {
            return (y, None);
        };
        let (input, mask) = match dropout {
            Some(dp) if dp.p > 0.0 => {
                let keep = 1.0 - dp.p;
                let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                    if dp.rng.random::<f64>() < dp.p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                });
                (Some(x * &mask), Some(mask))
            }
            _ => (None, None),
        };
        let u = input.as_ref().unwrap_or(x).dot(&pair.a);
        y.scaled_add(lora.scale, &u.dot(&pair.b));
        (y, Some(LoraCache { input, mask, u }))
    }

    fn project_backward(
        &self,
        idx: usize,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        cache: &Option<LoraCache>,
        lora: &BlockLora,
        needs: GradNeeds,
        grad: &mut Option<&mut Block>,
        lora_grad: &mut [Option<&mut LoraPair>; 4],
    ) -> Array2<f64> {
        let g = if needs.base {
            grad.as_deref_mut().map(|b| b.projection_mut(idx))
        } else {
            None
        };
        let mut dx = self.projection(idx).backward(&x.view(), dy, g);
        if let (Some(pair), Some(c)) = (lora.pairs[idx], cache) {
            let du = dy.dot(&pair.b.t()) * lora.scale;
            if needs.lora {
                if let Some(lg) = lora_grad[idx].as_deref_mut() {
                    lg.b.scaled_add(lora.scale, &c.u.t().dot(dy));
                    let input = c.input.as_ref().unwrap_or(x);
                    lg.a += &input.t().dot(&du);
                }
            }
            let mut dinput = du.dot(&pair.a.t());
            if let Some(mask) = &c.mask {
                dinput *= mask;
            }
            dx += &dinput;
        }
        dx
    }

    /// Pre-norm block: `h = x + Attn(LN1 x)`, `out = h + FFN(LN2 h)`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        n_heads: usize,
        causal: bool,
        lora: &BlockLora,
        mut dropout: Option<Dropout>,
    ) -> (Array2<f64>, BlockCache) {
        let (a1, ln1) = self.ln1.forward(x);
        let (q, lq) = self.project(0, &a1, lora, &mut dropout);
        let (k, lk) = self.project(1, &a1, lora, &mut dropout);
        let (v, lv) = self.project(2, &a1, lora, &mut dropout);
        let t = x.nrows();
        let d = x.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            if causal {
                for i in 0..t {
                    scores.slice_mut(s![i, i + 1..]).fill(f64::NEG_INFINITY);
                }
            }
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let (o, lo) = self.project(3, &ctx, lora, &mut dropout);
        let h = x + &o;
        let (a2, ln2) = self.ln2.forward(&h);
        let h1 = self.fc1.forward(&a2.view());
        let g = h1.mapv(gelu);
        let f = self.fc2.forward(&g.view());
        let out = &h + &f;
        let cache = BlockCache {
            ln1,
            a1,
            attn: AttnCache {
                q,
                k,
                v,
                probs,
                ctx,
                lora: [lq, lk, lv, lo],
            },
            ln2,
            a2,
            h1,
            g,
        };
        (out, cache)
    }

    /// Causal eval-mode pass over `x` (new rows) attending to the cached prefix;
    /// appends this step's keys and values to `kv`.
    pub fn forward_cached(
        &self,
        x: &Array2<f64>,
        n_heads: usize,
        lora: &BlockLora,
        kv: &mut KvCache,
    ) -> Array2<f64> {
        let (a1, _) = self.ln1.forward(x);
        let (q, _) = self.project(0, &a1, lora, &mut None);
        let (k, _) = self.project(1, &a1, lora, &mut None);
        let (v, _) = self.project(2, &a1, lora, &mut None);
        kv.append(&k, &v);
        let past = kv.len() - x.nrows();
        let t = x.nrows();
        let d = x.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros((t, d));
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&kv.k.slice(cols).t()) * scale;
            for i in 0..t {
                scores.slice_mut(s![i, past + i + 1..]).fill(f64::NEG_INFINITY);
            }
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&kv.v.slice(cols)));
        }
        let (o, _) = self.project(3, &ctx, lora, &mut None);
        let h = x + &o;
        let (a2, _) = self.ln2.forward(&h);
        let g = self.fc1.forward(&a2.view()).mapv(gelu);
        &h + &self.fc2.forward(&g.view())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        dout: &Array2<f64>,
        cache: &BlockCache,
        n_heads: usize,
        lora: &BlockLora,
        needs: GradNeeds,
        mut grad: Option<&mut Block>,
        mut lora_grad: [Option<&mut LoraPair>; 4],
    ) -> Array2<f64> {
        fn base<'g>(g: &'g mut Option<&mut Block>, on: bool) -> Option<&'g mut Block> {
            if on {
                g.as_deref_mut()
            } else {
                None
            }
        }
        let on = needs.base;

        // FFN branch
        let dg = self.fc2.backward(&cache.g.view(), dout, base(&mut grad, on).map(|b| &mut b.fc2));
        let mut dh1 = dg;
        Zip::from(&mut dh1).and(&cache.h1).for_each(|d, &x| *d *= gelu_grad(x));
        let da2 = self.fc1.backward(&cache.a2.view(), &dh1, base(&mut grad, on).map(|b| &mut b.fc1));
        let mut dh = self.ln2.backward(&da2, &cache.ln2, base(&mut grad, on).map(|b| &mut b.ln2));
        dh += dout;

        // attention branch
        let ac = &cache.attn;
        let dctx = self.project_backward(3, &ac.ctx, &dh, &ac.lora[3], lora, needs, &mut grad, &mut lora_grad);
        let t = dh.nrows();
        let d = dh.ncols();
        let dh_sz = d / n_heads;
        let scale = 1.0 / (dh_sz as f64).sqrt();
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..n_heads {
            let cols = s![.., h * dh_sz..(h + 1) * dh_sz];
            let p = &ac.probs[h];
            let dc = dctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dc));
            let dp = dc.dot(&ac.v.slice(cols).t());
            let mut ds = &dp * p;
            let row_sums = ds.sum_axis(Axis(1));
            Zip::from(ds.rows_mut())
                .and(p.rows())
                .and(&row_sums)
                .for_each(|mut r, pr, &sum| {
                    Zip::from(&mut r).and(&pr).for_each(|x, &pv| *x -= pv * sum);
                });
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&ac.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&ac.q.slice(cols)));
        }
        let mut da1 = self.project_backward(0, &cache.a1, &dq, &ac.lora[0], lora, needs, &mut grad, &mut lora_grad);
        da1 += &self.project_backward(1, &cache.a1, &dk, &ac.lora[1], lora, needs, &mut grad, &mut lora_grad);
        da1 += &self.project_backward(2, &cache.a1, &dv, &ac.lora[2], lora, needs, &mut grad, &mut lora_grad);
        let mut dx = self.ln1.backward(&da1, &cache.ln1, base(&mut grad, on).map(|b| &mut b.ln1));
        dx += &dh;
        dx
    }
}
