//! Encoder-decoder with skip connections over one axial slice.
//!
//! ```text
//! input (N) ─ block ─────────────────────────────── concat ─ block ─ 1x1 ─ softplus
//!               └ pool ─ block ───────── concat ─ block ┘ tconv
//!                          └ pool ─ ... ─ block ┘ tconv
//! ```
//!
//! A block is two 3x3 reflect-padded convolutions, each followed by optional
//! instance normalization and ReLU. Downsampling is 2x2 max pooling,
//! upsampling a 2x2 stride-2 transposed convolution. All parameters live in
//! one flat `f32` store described by [`Plan::entries`].

use serde::{Deserialize, Serialize};

use crate::config::{InputTransform, NetConfig, Normalization};
use crate::layers::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
    norm: Option<(usize, usize)>,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSlot {
    c1: ConvSlot,
    c2: ConvSlot,
}

#[derive(Debug, Clone, Copy)]
struct UpSlot {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

/// Parameter layout derived from a [`NetConfig`].
#[derive(Debug, Clone)]
pub struct Plan {
    enc: Vec<BlockSlot>,
    mid: BlockSlot,
    up: Vec<UpSlot>,
    dec: Vec<BlockSlot>,
    head_w: usize,
    head_b: usize,
    in_channels: usize,
    out_channels: usize,
    depth: usize,
    transform: InputTransform,
    scale: Vec<f32>,
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

struct Builder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let len: usize = shape.iter().product();
        self.entries.push(ParamEntry { name, offset, shape });
        self.total += len;
        offset
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, norm: Normalization) -> ConvSlot {
        let w = self.push(format!("{prefix}.weight"), vec![cout, cin, 3, 3]);
        let b = self.push(format!("{prefix}.bias"), vec![cout]);
        let norm = match norm {
            Normalization::None => None,
            Normalization::Instance => Some((
                self.push(format!("{prefix}.norm.gamma"), vec![cout]),
                self.push(format!("{prefix}.norm.beta"), vec![cout]),
            )),
        };
        ConvSlot { w, b, norm, cin, cout }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, norm: Normalization) -> BlockSlot {
        BlockSlot {
            c1: self.conv(&format!("{prefix}.conv1"), cin, cout, norm),
            c2: self.conv(&format!("{prefix}.conv2"), cout, cout, norm),
        }
    }
}

impl Plan {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut b = Builder {
            entries: Vec::new(),
            total: 0,
        };
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels * cfg.input_transform.channel_factor();
        for level in 0..cfg.depth {
            let w = cfg.width_at(level);
            enc.push(b.block(&format!("enc{level}"), cin, w, cfg.norm));
            cin = w;
        }
        let mid = b.block("mid", cin, cfg.width_at(cfg.depth), cfg.norm);
        let mut up = vec![None; cfg.depth];
        let mut dec = vec![None; cfg.depth];
        for level in (0..cfg.depth).rev() {
            let (wi, wn) = (cfg.width_at(level), cfg.width_at(level + 1));
            let uw = b.push(format!("up{level}.weight"), vec![2, 2, wi, wn]);
            let ub = b.push(format!("up{level}.bias"), vec![wi]);
            up[level] = Some(UpSlot {
                w: uw,
                b: ub,
                cin: wn,
                cout: wi,
            });
            dec[level] = Some(b.block(&format!("dec{level}"), 2 * wi, wi, cfg.norm));
        }
        let head_w = b.push("head.weight".into(), vec![cfg.out_channels, cfg.base_width]);
        let head_b = b.push("head.bias".into(), vec![cfg.out_channels]);
        Plan {
            enc,
            mid,
            up: up.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head_w,
            head_b,
            in_channels: cfg.in_channels,
            out_channels: cfg.out_channels,
            depth: cfg.depth,
            transform: cfg.input_transform,
            scale: cfg.output_scale.clone(),
            entries: b.entries,
            total: b.total,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn base_width(&self) -> usize {
        self.enc[0].c1.cout
    }

    /// Fan-in scaled (He) normal init; head biases start at softplus⁻¹(1).
    pub fn init(&self, rng: &mut impl rand::Rng) -> Vec<f32> {
        use rand_distr::{Distribution, StandardNormal};
        let mut p = vec![0.0f32; self.total];
        for e in &self.entries {
            let span = e.offset..e.offset + e.len();
            let fan_in = match e.name.rsplit('.').next() {
                Some("weight") if e.name.starts_with("up") => e.shape[3],
                Some("weight") if e.name.starts_with("head") => e.shape[1],
                Some("weight") => e.shape[1] * 9,
                _ => 0,
            };
            if fan_in > 0 {
                let gain = if e.name.starts_with("head") { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                for v in &mut p[span] {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = (z * std) as f32;
                }
            } else if e.name.ends_with("gamma") {
                p[span].fill(1.0);
            } else if e.name == "head.bias" {
                p[span].fill((std::f32::consts::E - 1.0).ln());
            }
        }
        p
    }
}

struct ConvCache {
    cols: Vec<f32>,
    out: Vec<f32>,
    norm: Option<(Vec<f32>, Vec<f32>)>,
}

struct BlockCache {
    c1: ConvCache,
    c2: ConvCache,
    h: usize,
    w: usize,
}

/// Intermediate activations of one forward pass, consumed by [`Plan::backward`].
pub struct Cache {
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    enc: Vec<BlockCache>,
    pool: Vec<Vec<u32>>,
    mid: BlockCache,
    up_in: Vec<Vec<f32>>,
    dec: Vec<BlockCache>,
    z: Vec<f32>,
}

fn conv_forward(p: &[f32], s: &ConvSlot, x: &[f32], h: usize, w: usize) -> ConvCache {
    let hw = h * w;
    let (mut out, cols) = conv3_forward(
        x,
        s.cin,
        h,
        w,
        &p[s.w..s.w + s.cout * s.cin * 9],
        &p[s.b..s.b + s.cout],
    );
    let norm = s.norm.map(|(g, b)| {
        instance_norm_forward(&mut out, s.cout, hw, &p[g..g + s.cout], &p[b..b + s.cout])
    });
    relu_inplace(&mut out);
    ConvCache { cols, out, norm }
}

fn conv_backward(p: &[f32], g: &mut [f32], s: &ConvSlot, c: &ConvCache, mut d: Vec<f32>, h: usize, w: usize, need_input: bool) -> Option<Vec<f32>> {
    relu_backward(&mut d, &c.out);
    if let (Some((gi, bi)), Some((xhat, inv))) = (s.norm, c.norm.as_ref()) {
        let (gslice, rest) = (&p[gi..gi + s.cout], s.cout);
        let mut dgamma = vec![0.0f32; rest];
        let mut dbeta = vec![0.0f32; rest];
        instance_norm_backward(&mut d, s.cout, h * w, xhat, inv, gslice, &mut dgamma, &mut dbeta);
        for k in 0..s.cout {
            g[gi + k] += dgamma[k];
            g[bi + k] += dbeta[k];
        }
    }
    let wlen = s.cout * s.cin * 9;
    let (gw, gb) = split_two(g, s.w, wlen, s.b, s.cout);
    conv3_backward(&d, &c.cols, s.cin, h, w, &p[s.w..s.w + wlen], gw, gb, need_input)
}

/// Two disjoint mutable windows into the gradient store.
fn split_two(g: &mut [f32], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [f32], &mut [f32]) {
    if a < b {
        let (lo, hi) = g.split_at_mut(b);
        (&mut lo[a..a + alen], &mut hi[..blen])
    } else {
        let (lo, hi) = g.split_at_mut(a);
        let bs = &mut lo[b..b + blen];
        (&mut hi[..alen], bs)
    }
}

fn block_forward(p: &[f32], s: &BlockSlot, x: &[f32], h: usize, w: usize) -> BlockCache {
    let c1 = conv_forward(p, &s.c1, x, h, w);
    let c2 = conv_forward(p, &s.c2, &c1.out, h, w);
    BlockCache { c1, c2, h, w }
}

fn block_backward(p: &[f32], g: &mut [f32], s: &BlockSlot, c: BlockCache, d: Vec<f32>, need_input: bool) -> Option<Vec<f32>> {
    let d1 = conv_backward(p, g, &s.c2, &c.c2, d, c.h, c.w, true).unwrap();
    conv_backward(p, g, &s.c1, &c.c1, d1, c.h, c.w, need_input)
}

/// Reflect-pad bottom/right so both sides are multiples of `m`.
fn pad_input(x: &[f32], c: usize, h: usize, w: usize, m: usize) -> (Vec<f32>, usize, usize) {
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return (x.to_vec(), h, w);
    }
    let mut out = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for xx in 0..pw {
                out[ch * ph * pw + y * pw + xx] = x[ch * h * w + sy * w + reflect(xx as isize, w)];
            }
        }
    }
    (out, ph, pw)
}

impl Plan {
    /// Forward pass on a `C x H x W` slice. Returns the `out x H x W`
    /// prediction and the activations needed for backpropagation.
    pub fn forward(&self, p: &[f32], input: &[f32], h: usize, w: usize) -> (Vec<f32>, Cache) {
        assert_eq!(p.len(), self.total, "parameter store does not match plan");
        assert_eq!(input.len(), self.in_channels * h * w, "input shape");
        let x = self.transform.apply(input);
        let cin = self.in_channels * self.transform.channel_factor();
        let (x, ph, pw) = pad_input(&x, cin, h, w, 1 << self.depth);

        let mut enc = Vec::with_capacity(self.depth);
        let mut pool = Vec::with_capacity(self.depth);
        let (mut ch, mut cw) = (ph, pw);
        let mut cur = x;
        for s in &self.enc {
            let bc = block_forward(p, s, &cur, ch, cw);
            let (pooled, arg) = maxpool_forward(&bc.c2.out, s.c2.cout, ch, cw);
            enc.push(bc);
            pool.push(arg);
            cur = pooled;
            ch /= 2;
            cw /= 2;
        }
        let mid = block_forward(p, &self.mid, &cur, ch, cw);

        let mut dec: Vec<Option<BlockCache>> = (0..self.depth).map(|_| None).collect();
        let mut up_in: Vec<Vec<f32>> = vec![Vec::new(); self.depth];
        let mut below = &mid.c2.out;
        for level in (0..self.depth).rev() {
            let u = &self.up[level];
            let upsampled = tconv_forward(
                below,
                u.cin,
                ch,
                cw,
                &p[u.w..u.w + 4 * u.cout * u.cin],
                &p[u.b..u.b + u.cout],
            );
            up_in[level] = below.clone();
            ch *= 2;
            cw *= 2;
            let skip = &enc[level].c2.out;
            let mut cat = Vec::with_capacity(skip.len() + upsampled.len());
            cat.extend_from_slice(skip);
            cat.extend_from_slice(&upsampled);
            dec[level] = Some(block_forward(p, &self.dec[level], &cat, ch, cw));
            below = &dec[level].as_ref().unwrap().c2.out;
        }
        let dec: Vec<BlockCache> = dec.into_iter().map(Option::unwrap).collect();

        let phw = ph * pw;
        let mut z = vec![0.0f32; self.out_channels * phw];
        for (o, b) in p[self.head_b..self.head_b + self.out_channels].iter().enumerate() {
            z[o * phw..(o + 1) * phw].fill(*b);
        }
        let bw = self.base_width();
        gemm(
            self.out_channels,
            bw,
            phw,
            &p[self.head_w..self.head_w + self.out_channels * bw],
            false,
            &dec[0].c2.out,
            false,
            1.0,
            &mut z,
        );

        let mut out = vec![0.0f32; self.out_channels * h * w];
        for o in 0..self.out_channels {
            for y in 0..h {
                for xx in 0..w {
                    out[o * h * w + y * w + xx] = softplus(z[o * phw + y * pw + xx]) * self.scale[o];
                }
            }
        }
        let cache = Cache {
            h,
            w,
            ph,
            pw,
            enc,
            pool,
            mid,
            up_in,
            dec,
            z,
        };
        (out, cache)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, p: &[f32], input: &[f32], h: usize, w: usize) -> Vec<f32> {
        self.forward(p, input, h, w).0
    }

    /// Accumulate `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, p: &[f32], cache: Cache, dout: &[f32], grads: &mut [f32]) {
        assert_eq!(grads.len(), self.total);
        let Cache {
            h,
            w,
            ph,
            pw,
            enc,
            pool,
            mid,
            mut up_in,
            dec,
            z,
        } = cache;
        let phw = ph * pw;
        let mut dz = vec![0.0f32; self.out_channels * phw];
        for o in 0..self.out_channels {
            for y in 0..h {
                for xx in 0..w {
                    let k = o * phw + y * pw + xx;
                    dz[k] = dout[o * h * w + y * w + xx] * self.scale[o] * sigmoid(z[k]);
                }
            }
        }
        let bw = self.base_width();
        let oc = self.out_channels;
        for (o, g) in grads[self.head_b..self.head_b + oc].iter_mut().enumerate() {
            *g += dz[o * phw..(o + 1) * phw].iter().sum::<f32>();
        }
        let d0 = &dec[0].c2.out;
        gemm(oc, phw, bw, &dz, false, d0, true, 1.0, &mut grads[self.head_w..self.head_w + oc * bw]);
        let mut d = vec![0.0f32; bw * phw];
        gemm(bw, oc, phw, &p[self.head_w..self.head_w + oc * bw], true, &dz, false, 0.0, &mut d);

        // decoder: shallow to deep, each tconv hands its input gradient to
        // the next deeper decoder output (or the bottleneck)
        let mut skip_grads: Vec<Vec<f32>> = vec![Vec::new(); self.depth];
        let (mut ch, mut cw) = (ph, pw);
        for (level, bc) in dec.into_iter().enumerate() {
            let dcat = block_backward(p, grads, &self.dec[level], bc, d, true).unwrap();
            let wi = self.dec[level].c1.cout;
            let (dskip, dup) = dcat.split_at(wi * ch * cw);
            skip_grads[level] = dskip.to_vec();
            let u = &self.up[level];
            let wlen = 4 * u.cout * u.cin;
            let (gw, gb) = split_two(grads, u.w, wlen, u.b, u.cout);
            let input = std::mem::take(&mut up_in[level]);
            ch /= 2;
            cw /= 2;
            d = tconv_backward(dup, &input, u.cin, ch, cw, &p[u.w..u.w + wlen], gw, gb);
        }
        d = block_backward(p, grads, &self.mid, mid, d, true).unwrap();
        for (level, bc) in enc.into_iter().enumerate().rev() {
            let mut dblock = maxpool_backward(&d, &pool[level], bc.c2.out.len());
            for (a, b) in dblock.iter_mut().zip(&skip_grads[level]) {
                *a += *b;
            }
            match block_backward(p, grads, &self.enc[level], bc, dblock, level > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(norm: Normalization) -> NetConfig {
        NetConfig {
            depth: 1,
            base_width: 4,
            norm,
            ..NetConfig::default()
        }
    }

    #[test]
    fn parameter_count_matches_hand_tally() {
        // depth 1, width 4, 10 -> 2 channels, no normalization
        let enc = (10 * 4 * 9 + 4) + (4 * 4 * 9 + 4);
        let mid = (4 * 8 * 9 + 8) + (8 * 8 * 9 + 8);
        let up = 2 * 2 * 4 * 8 + 4;
        let dec = (8 * 4 * 9 + 4) + (4 * 4 * 9 + 4);
        let head = 2 * 4 + 2;
        assert_eq!(enc + mid + up + dec + head, 1974);
        assert_eq!(Plan::new(&tiny(Normalization::None)).total, 1974);
        // instance norm adds gamma and beta for each of the six convs
        let with_norm = Plan::new(&tiny(Normalization::Instance)).total;
        assert_eq!(with_norm, 1974 + 2 * (4 + 4 + 8 + 8 + 4 + 4));
    }

    #[test]
    fn entries_tile_the_store() {
        let plan = Plan::new(&NetConfig::default());
        let mut next = 0;
        for e in &plan.entries {
            assert_eq!(e.offset, next, "{}", e.name);
            next += e.len();
        }
        assert_eq!(next, plan.total);
    }

    #[test]
    fn output_shape_and_positivity_on_odd_sizes() {
        let cfg = NetConfig {
            depth: 2,
            base_width: 4,
            ..NetConfig::default()
        };
        let plan = Plan::new(&cfg);
        let p = plan.init(&mut r2map_core::seed::rng(1));
        let (h, w) = (13, 10);
        let x: Vec<f32> = (0..10 * h * w).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let y = plan.predict(&p, &x, h, w);
        assert_eq!(y.len(), 2 * h * w);
        assert!(y.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    fn fd_check(norm: Normalization) {
        use rand_distr::{Distribution, Uniform};
        let cfg = tiny(norm);
        let plan = Plan::new(&cfg);
        let mut rng = r2map_core::seed::rng(7);
        let p = plan.init(&mut rng);
        let (h, w) = (6, 6);
        let u = Uniform::new(0.05f32, 1.0).unwrap();
        let x: Vec<f32> = (0..10 * h * w).map(|_| u.sample(&mut rng)).collect();
        let t: Vec<f32> = (0..2 * h * w).map(|_| u.sample(&mut rng)).collect();
        let loss = |p: &[f32]| -> f64 {
            let y = plan.predict(p, &x, h, w);
            y.iter().zip(&t).map(|(a, b)| 0.5 * ((*a - *b) as f64).powi(2)).sum()
        };
        let central = |i: usize, step: f32| -> f64 {
            let mut pp = p.clone();
            pp[i] += step;
            let lp = loss(&pp);
            pp[i] -= 2.0 * step;
            (lp - loss(&pp)) / (2.0 * step as f64)
        };
        let (y, cache) = plan.forward(&p, &x, h, w);
        let dy: Vec<f32> = y.iter().zip(&t).map(|(a, b)| a - b).collect();
        let mut g = vec![0.0f32; plan.total];
        plan.backward(&p, cache, &dy, &mut g);

        // ReLU and max-pool kinks make a few coordinates non-differentiable at
        // the probe scale; those show up as step-size dependence and are skipped.
        let mut checked = 0;
        for k in 0..25 {
            let i = (k * 7919 + 3) % plan.total;
            let coarse = central(i, 2e-3);
            let fine = central(i, 1e-3);
            if (coarse - fine).abs() > 1e-2 * fine.abs().max(1e-1) {
                continue;
            }
            let an = g[i] as f64;
            let err = (fine - an).abs();
            assert!(
                err < 1e-2 * fine.abs().max(an.abs()) + 2e-3,
                "param {i} ({norm:?}): analytic {an}, numeric {fine}"
            );
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} smooth coordinates");
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(Normalization::None);
    }

    #[test]
    fn gradients_match_finite_differences_with_instance_norm() {
        fd_check(Normalization::Instance);
    }
}
