//! Small layer library on top of candle tensors.
//!
//! Parameters live in an ordered [`ParamStore`] and are initialized from a
//! seeded ChaCha stream, so a model is a pure function of its config.

use std::collections::BTreeMap;

use candle_core::{bail, CpuStorage, CustomOp1, DType, Device, Layout, Result, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng,
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            bail!("duplicate parameter {name}");
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.add(name, shape, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(candle_core::Error::wrap)?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.add(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    /// Variables in name order.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Dense layer; weight stored as `(in, out)`.
#[derive(Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    /// PyTorch's default `nn.Linear` init.
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_bound(ps, name, fan_in, fan_out, bound)
    }

    pub fn xavier(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = ps.uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound)?;
        let b = ps.constant(&format!("{name}.bias"), &[fan_out], 0.0)?;
        Ok(Self { w, b })
    }

    pub fn with_bound(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
    ) -> Result<Self> {
        let w = ps.uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound)?;
        let b = ps.uniform(
            &format!("{name}.bias"),
            &[fan_out],
            1.0 / (fan_in as f64).sqrt(),
        )?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().unwrap();
        let rows = x.elem_count() / fan_in.max(1);
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(1)?;
        y.reshape(out)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// Group normalization over a channels-last `(B, H, W, C)` map.
#[derive(Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            candle_core::bail!("{channels} channels do not split into {groups} groups");
        }
        Ok(Self {
            groups,
            gamma: ps.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = x.reshape((b, h * w, self.groups, c / self.groups))?;
        let mean = g.mean_keepdim(3)?.mean_keepdim(1)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        gc.broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .reshape((b, h, w, c))?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// Stack of linear layers with ReLU in between.
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::xavier(ps, &format!("{name}.q"), d, d)?,
            k: Linear::xavier(ps, &format!("{name}.k"), d, d)?,
            v: Linear::xavier(ps, &format!("{name}.v"), d, d)?,
            o: Linear::xavier(ps, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        x.reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `query (B, Lq, d)`, `key`/`value (B, Lk, d)`; `key_bias` is an additive
    /// `(B, 1, 1, Lk)` mask.
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let q = (self.split(&self.q.forward(query)?)? * scale)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let mut scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        self.o.forward(&out)
    }
}

#[derive(Clone, Copy, Debug)]
struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Im2Col {
    fn out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Calls `f(src_offset, col_offset)` for every in-bounds tap.
    fn for_each_tap(&self, b: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out(h), self.out(w));
        let mut o = 0;
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                f(((bi * h + iy as usize) * w + ix as usize) * c, o);
                            }
                            o += c;
                        }
                    }
                }
            }
        }
    }
}

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [f32]> {
    let v = match s {
        CpuStorage::F32(v) => v,
        _ => bail!("im2col supports f32 only"),
    };
    match l.contiguous_offsets() {
        Some((a, e)) => Ok(&v[a..e]),
        None => bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = l.shape().dims4()?;
        let x = f32_slice(s, l)?;
        let (ho, wo) = (self.out(h), self.out(w));
        let mut out = vec![0f32; b * ho * wo * self.k * self.k * c];
        self.for_each_tap(b, h, w, c, |src, dst| {
            out[dst..dst + c].copy_from_slice(&x[src..src + c])
        });
        Ok((CpuStorage::F32(out), Shape::from((b, ho, wo, self.k * self.k * c))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (_, h, w, _) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1_no_bwd(&Col2Im { op: *self, h, w })?;
        Ok(Some(g))
    }
}

/// Adjoint of [`Im2Col`]: scatter-adds column gradients back onto the input grid.
struct Col2Im {
    op: Im2Col,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, _, _, kkc) = l.shape().dims4()?;
        let c = kkc / (self.op.k * self.op.k);
        let g = f32_slice(s, l)?;
        let mut out = vec![0f32; b * self.h * self.w * c];
        self.op.for_each_tap(b, self.h, self.w, c, |dst, src| {
            for j in 0..c {
                out[dst + j] += g[src + j];
            }
        });
        Ok((CpuStorage::F32(out), Shape::from((b, self.h, self.w, c))))
    }
}

/// Channels-last 2D convolution as im2col followed by a dense layer.
#[derive(Clone)]
pub struct Conv2d {
    lin: Linear,
    op: Im2Col,
}

impl Conv2d {
    /// He-uniform init for a ReLU stack.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = k * k * c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = ps.uniform(&format!("{name}.weight"), &[fan_in, c_out], bound)?;
        let b = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            lin: Linear { w, b },
            op: Im2Col { k, stride, pad: k / 2 },
        })
    }

    pub fn output_size(&self, n: usize) -> usize {
        self.op.out(n)
    }

    /// `x (B, H, W, C)` to `(B, H', W', C_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cols = x.contiguous()?.apply_op1(self.op)?;
        self.lin.forward(&cols)
    }
}

/// Additive attention bias `(B, 1, 1, L)`: 0 for valid keys, a large negative
/// value for padding.
pub fn padding_bias(valid: &[usize], len: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; valid.len() * len];
    for (b, &n) in valid.iter().enumerate() {
        for j in n..len {
            data[b * len + j] = -1e9;
        }
    }
    Tensor::from_vec(data, (valid.len(), 1, 1, len), device)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        ParamStore::new(ChaCha8Rng::seed_from_u64(0))
    }

    /// Direct convolution on nested loops.
    fn naive_conv(x: &[f32], b: usize, h: usize, w: usize, c: usize, wt: &[f32], co: usize, k: usize, s: usize) -> Vec<f32> {
        let p = k / 2;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0f32; b * ho * wo * co];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..co {
                        let mut acc = 0f32;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xi = ((bi * h + iy as usize) * w + ix as usize) * c + ci;
                                    let wi = ((ky * k + kx) * c + ci) * co + o;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                        out[((bi * ho + oy) * wo + ox) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() -> Result<()> {
        let mut ps = store();
        let conv = Conv2d::new(&mut ps, "c", 3, 5, 3, 2)?;
        let x: Vec<f32> = (0..2 * 7 * 6 * 3).map(|i| ((i * 37 % 11) as f32) / 11.0 - 0.5).collect();
        let xt = Tensor::from_vec(x.clone(), (2, 7, 6, 3), &Device::Cpu)?;
        let y = conv.forward(&xt)?;
        assert_eq!(y.dims(), &[2, 4, 3, 5]);
        let wt = conv.lin.w.flatten_all()?.to_vec1::<f32>()?;
        let expect = naive_conv(&x, 2, 7, 6, 3, &wt, 5, 3, 2);
        let got = y.flatten_all()?.to_vec1::<f32>()?;
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5);
        }
        Ok(())
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() -> Result<()> {
        // <im2col(x), g> == <x, col2im(g)>
        let op = Im2Col { k: 3, stride: 2, pad: 1 };
        let x = Tensor::from_vec((0..5 * 5 * 2).map(|i| (i as f32 * 0.37).sin()).collect::<Vec<_>>(), (1, 5, 5, 2), &Device::Cpu)?;
        let cols = x.apply_op1(op)?;
        let g = Tensor::from_vec(
            (0..cols.elem_count()).map(|i| (i as f32 * 0.11).cos()).collect::<Vec<_>>(),
            cols.shape(),
            &Device::Cpu,
        )?;
        let lhs = scalar_f64(&(cols * &g)?.sum_all()?)?;
        let back = g.apply_op1_no_bwd(&Col2Im { op, h: 5, w: 5 })?;
        let rhs = scalar_f64(&(x * back)?.sum_all()?)?;
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} {rhs}");
        Ok(())
    }

    #[test]
    fn conv_gradient_flows_to_input() -> Result<()> {
        let mut ps = store();
        let conv = Conv2d::new(&mut ps, "c", 1, 2, 3, 1)?;
        let x = Var::from_tensor(&Tensor::ones((1, 4, 4, 1), DType::F32, &Device::Cpu)?)?;
        let loss = conv.forward(x.as_tensor())?.sum_all()?;
        let grads = loss.backward()?;
        let g = grads.get(x.as_tensor()).unwrap().flatten_all()?.to_vec1::<f32>()?;
        let wsum: Vec<f32> = conv.lin.w.sum(1)?.to_vec1()?;
        // interior pixel sees all nine taps
        let center: f32 = wsum.iter().sum();
        assert!((g[5] - center).abs() < 1e-5);
        Ok(())
    }

    #[test]
    fn init_is_seeded() -> Result<()> {
        let mut a = store();
        let mut b = store();
        let la = Linear::new(&mut a, "l", 4, 3)?;
        let lb = Linear::new(&mut b, "l", 4, 3)?;
        assert_eq!(la.w.to_vec2::<f32>()?, lb.w.to_vec2::<f32>()?);
        assert!(a.uniform("l.weight", &[1], 1.0).is_err());
        Ok(())
    }

    #[test]
    fn attention_ignores_padded_keys() -> Result<()> {
        let mut ps = store();
        let mha = MultiHeadAttention::new(&mut ps, "a", 8, 2)?;
        let dev = Device::Cpu;
        let q = Tensor::from_vec((0..16).map(|i| i as f32 * 0.1).collect::<Vec<_>>(), (1, 2, 8), &dev)?;
        let k1 = Tensor::from_vec((0..24).map(|i| (i as f32).sin()).collect::<Vec<_>>(), (1, 3, 8), &dev)?;
        let mut k2 = k1.flatten_all()?.to_vec1::<f32>()?;
        for v in &mut k2[16..] {
            *v = 100.0;
        }
        let k2 = Tensor::from_vec(k2, (1, 3, 8), &dev)?;
        let bias = padding_bias(&[2], 3, &dev)?;
        let a = mha.forward(&q, &k1, &k1, Some(&bias))?.flatten_all()?.to_vec1::<f32>()?;
        let b = mha.forward(&q, &k2, &k2, Some(&bias))?.flatten_all()?.to_vec1::<f32>()?;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
        Ok(())
    }

    #[test]
    fn group_norm_matches_direct_statistics() {
        let mut ps = store();
        let gn = GroupNorm::new(&mut ps, "gn", 6, 3).unwrap();
        let (b, h, w, c) = (2, 3, 4, 6);
        let x: Vec<f32> = (0..b * h * w * c).map(|i| ((i * 37 % 101) as f32 * 0.13).sin() * 3.0 + i as f32 * 0.01).collect();
        let t = Tensor::from_vec(x.clone(), (b, h, w, c), &Device::Cpu).unwrap();
        let y: Vec<f32> = gn.forward(&t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for bi in 0..b {
            for g in 0..3 {
                let idx: Vec<usize> = (0..h * w)
                    .flat_map(|p| (0..2).map(move |k| (bi * h * w + p) * c + g * 2 + k))
                    .collect();
                let n = idx.len() as f64;
                let mean = idx.iter().map(|&i| x[i] as f64).sum::<f64>() / n;
                let var = idx.iter().map(|&i| (x[i] as f64 - mean).powi(2)).sum::<f64>() / n;
                for &i in &idx {
                    let want = (x[i] as f64 - mean) / (var + 1e-5).sqrt();
                    assert!((y[i] as f64 - want).abs() < 1e-4, "{} vs {want}", y[i]);
                }
            }
        }
        assert!(GroupNorm::new(&mut ps, "bad", 6, 4).is_err());
    }
}
