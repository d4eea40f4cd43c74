use super::{DenoiserConfig, ModelKind};
use crate::nn::{
    silu, silu_backward, timestep_embedding, upsample2, upsample2_backward, AttentionCache, Conv2d,
    GroupNorm, GroupNormCache, Linear, ParamLayout, ParamSet, Scalar, SpatialAttention, Tensor,
};

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<T> {
    x: Tensor<T>,
    norm1: GroupNormCache<T>,
    n1: Tensor<T>,
    a1: Tensor<T>,
    norm2: GroupNormCache<T>,
    n2: Tensor<T>,
    a2: Tensor<T>,
}

impl ResBlock {
    fn new(lay: &mut ParamLayout, name: &str, cin: usize, cout: usize, time_dim: Option<usize>, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(lay, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(lay, &format!("{name}.conv1"), cin, cout, 3, 1, false),
            time_proj: time_dim.map(|d| Linear::new(lay, &format!("{name}.time_proj"), d, cout)),
            norm2: GroupNorm::new(lay, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(lay, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| Conv2d::new(lay, &format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>, temb_act: Option<&Tensor<T>>) -> (Tensor<T>, ResCache<T>) {
        let (n1, norm1) = self.norm1.forward(p, &x);
        let a1 = silu(&n1);
        let mut h = self.conv1.forward(p, &a1);
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb_act) {
            let e = proj.forward(p, temb);
            let (n, c, hh, ww) = h.dims4();
            for i in 0..n {
                let hi = h.item_mut(i);
                for ch in 0..c {
                    let bias = e.item(i)[ch];
                    for v in &mut hi[ch * hh * ww..(ch + 1) * hh * ww] {
                        *v = *v + bias;
                    }
                }
            }
        }
        let (n2, norm2) = self.norm2.forward(p, &h);
        let a2 = silu(&n2);
        let mut out = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(skip) => out.add_assign(&skip.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (out, ResCache { x, norm1, n1, a1, norm2, n2, a2 })
    }

    /// Returns the input gradient; time-embedding gradients go to `dtemb`.
    fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        c: &ResCache<T>,
        gy: &Tensor<T>,
        temb_act: Option<&Tensor<T>>,
        dtemb: Option<&mut Tensor<T>>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let dskip = match &self.skip {
            Some(skip) => skip.backward(p, &c.x, gy, g),
            None => gy.clone(),
        };
        let da2 = self.conv2.backward(p, &c.a2, gy, g);
        let dn2 = silu_backward(&c.n2, &da2);
        let dh = self.norm2.backward(p, &c.norm2, &dn2, g);
        if let (Some(proj), Some(temb), Some(dtemb)) = (&self.time_proj, temb_act, dtemb) {
            let (n, ch, hh, ww) = dh.dims4();
            let mut de = Tensor::zeros(&[n, ch]);
            for i in 0..n {
                let di = dh.item(i);
                for k in 0..ch {
                    de.item_mut(i)[k] = di[k * hh * ww..(k + 1) * hh * ww].iter().copied().sum();
                }
            }
            dtemb.add_assign(&proj.backward(p, temb, &de, g));
        }
        let da1 = self.conv1.backward(p, &c.a1, &dh, g);
        let dn1 = silu_backward(&c.n1, &da1);
        let mut dx = self.norm1.backward(p, &c.norm1, &dn1, g);
        dx.add_assign(&dskip);
        dx
    }
}

#[derive(Debug, Clone)]
struct Block {
    res: ResBlock,
    attn: Option<SpatialAttention>,
}

struct BlockCache<T> {
    res: ResCache<T>,
    attn: Option<AttentionCache<T>>,
}

impl Block {
    fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>, temb: Option<&Tensor<T>>) -> (Tensor<T>, BlockCache<T>) {
        let (h, res) = self.res.forward(p, x, temb);
        match &self.attn {
            Some(attn) => {
                let (h, ac) = attn.forward(p, &h);
                (h, BlockCache { res, attn: Some(ac) })
            }
            None => (h, BlockCache { res, attn: None }),
        }
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        c: &BlockCache<T>,
        gy: Tensor<T>,
        temb: Option<&Tensor<T>>,
        dtemb: Option<&mut Tensor<T>>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let gy = match (&self.attn, &c.attn) {
            (Some(attn), Some(ac)) => attn.backward(p, ac, &gy, g),
            _ => gy,
        };
        self.res.backward(p, &c.res, &gy, temb, dtemb, g)
    }
}

#[derive(Debug, Clone)]
struct TimeMlp {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

struct TimeCache<T> {
    emb: Tensor<T>,
    h1: Tensor<T>,
    a1: Tensor<T>,
    temb: Tensor<T>,
    temb_act: Tensor<T>,
}

#[derive(Debug, Clone)]
struct DownLevel {
    blocks: Vec<Block>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Conv2d,
    blocks: Vec<Block>,
}

/// Encoder/decoder with residual blocks, skip concatenation and
/// multi-head self-attention at the configured levels.
#[derive(Debug, Clone)]
pub(crate) struct UNet {
    conv_in: Conv2d,
    time: Option<TimeMlp>,
    down: Vec<DownLevel>,
    mid: [Block; 2],
    /// Deepest level first.
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

pub(crate) struct UNetCache<T> {
    time: Option<TimeCache<T>>,
    down: Vec<(Vec<BlockCache<T>>, Tensor<T>)>,
    mid: Vec<BlockCache<T>>,
    up: Vec<(Tensor<T>, Vec<BlockCache<T>>)>,
    out_norm: GroupNormCache<T>,
    out_n: Tensor<T>,
    out_a: Tensor<T>,
    input: Tensor<T>,
}

impl UNet {
    pub(crate) fn build(cfg: &DenoiserConfig, lay: &mut ParamLayout) -> Self {
        let g = cfg.groups;
        let width = |l: usize| cfg.base_width * cfg.channel_mult[l];
        let attn_at = |l: usize| cfg.attention_levels.contains(&l);
        let time_dim = (cfg.kind == ModelKind::Diffusion).then_some(cfg.time_embed_dim);
        let conv_in = Conv2d::new(lay, "conv_in", cfg.in_channels(), width(0), 3, 1, false);
        let time = time_dim.map(|d| TimeMlp {
            dim: d,
            fc1: Linear::new(lay, "time.fc1", d, d),
            fc2: Linear::new(lay, "time.fc2", d, d),
        });
        let block = |lay: &mut ParamLayout, name: String, cin: usize, cout: usize, level: usize| Block {
            res: ResBlock::new(lay, &name, cin, cout, time_dim, g),
            attn: attn_at(level).then(|| SpatialAttention::new(lay, &format!("{name}.attn"), cout, cfg.attention_heads, g)),
        };

        let mut down = Vec::with_capacity(cfg.depth);
        let mut cur = width(0);
        for l in 0..cfg.depth {
            let mut blocks = Vec::with_capacity(cfg.res_blocks_per_level);
            for r in 0..cfg.res_blocks_per_level {
                blocks.push(block(lay, format!("down.{l}.block.{r}"), cur, width(l), l));
                cur = width(l);
            }
            let dconv = Conv2d::new(lay, &format!("down.{l}.downsample"), cur, cur, 3, 2, false);
            down.push(DownLevel { blocks, down: dconv });
        }

        let d = cfg.depth;
        let mid = [
            block(lay, "mid.block.0".into(), cur, width(d), d),
            block(lay, "mid.block.1".into(), width(d), width(d), usize::MAX),
        ];
        cur = width(d);

        let mut up = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            let upc = Conv2d::new(lay, &format!("up.{l}.upsample"), cur, cur, 3, 1, false);
            let mut blocks = Vec::with_capacity(cfg.res_blocks_per_level);
            for r in 0..cfg.res_blocks_per_level {
                blocks.push(block(lay, format!("up.{l}.block.{r}"), cur + width(l), width(l), l));
                cur = width(l);
            }
            up.push(UpLevel { up: upc, blocks });
        }

        Self {
            conv_in,
            time,
            down,
            mid,
            up,
            out_norm: GroupNorm::new(lay, "out.norm", cur, g),
            out_conv: Conv2d::new(lay, "out.conv", cur, cfg.out_channels, 3, 1, true),
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        x: &Tensor<T>,
        t: Option<&[usize]>,
    ) -> (Tensor<T>, UNetCache<T>) {
        let time = match (&self.time, t) {
            (Some(mlp), Some(t)) => {
                let emb = timestep_embedding::<T>(t, mlp.dim);
                let h1 = mlp.fc1.forward(p, &emb);
                let a1 = silu(&h1);
                let temb = mlp.fc2.forward(p, &a1);
                let temb_act = silu(&temb);
                Some(TimeCache { emb, h1, a1, temb, temb_act })
            }
            (None, None) => None,
            _ => panic!("timestep conditioning does not match the model kind"),
        };
        let temb = time.as_ref().map(|c| &c.temb_act);

        let mut h = self.conv_in.forward(p, x);
        let mut skips = Vec::new();
        let mut down = Vec::with_capacity(self.down.len());
        for level in &self.down {
            let mut caches = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let (out, c) = b.forward(p, h, temb);
                skips.push(out.clone());
                caches.push(c);
                h = out;
            }
            let next = level.down.forward(p, &h);
            down.push((caches, h));
            h = next;
        }
        let mut mid = Vec::with_capacity(2);
        for b in &self.mid {
            let (out, c) = b.forward(p, h, temb);
            mid.push(c);
            h = out;
        }
        let mut up = Vec::with_capacity(self.up.len());
        for level in &self.up {
            let ups = upsample2(&h);
            h = level.up.forward(p, &ups);
            let mut caches = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let skip = skips.pop().expect("skip stack underflow");
                let (out, c) = b.forward(p, Tensor::concat_channels(&h, &skip), temb);
                caches.push(c);
                h = out;
            }
            up.push((ups, caches));
        }
        let (out_n, out_norm) = self.out_norm.forward(p, &h);
        let out_a = silu(&out_n);
        let y = self.out_conv.forward(p, &out_a);
        let cache = UNetCache {
            time,
            down,
            mid,
            up,
            out_norm,
            out_n,
            out_a,
            input: x.clone(),
        };
        (y, cache)
    }

    pub(crate) fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        cache: &UNetCache<T>,
        gy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) {
        let temb = cache.time.as_ref().map(|c| &c.temb_act);
        let mut dtemb = cache.time.as_ref().map(|c| Tensor::zeros(c.temb_act.shape()));

        let da = self.out_conv.backward(p, &cache.out_a, gy, g);
        let dn = silu_backward(&cache.out_n, &da);
        let mut dh = self.out_norm.backward(p, &cache.out_norm, &dn, g);

        // Walking the decoder backwards visits skips in encoder push order.
        let mut dskips: Vec<Tensor<T>> = Vec::new();
        for (level, (ups, caches)) in self.up.iter().zip(&cache.up).rev() {
            for (b, c) in level.blocks.iter().zip(caches).rev() {
                let dcat = b.backward(p, c, dh, temb, dtemb.as_mut(), g);
                let skip_width = b.res.conv1.cout;
                let (dmain, dskip) = dcat.split_channels(dcat.dims4().1 - skip_width);
                dskips.push(dskip);
                dh = dmain;
            }
            let dups = level.up.backward(p, ups, &dh, g);
            dh = upsample2_backward(&dups);
        }

        for (b, c) in self.mid.iter().zip(&cache.mid).rev() {
            dh = b.backward(p, c, dh, temb, dtemb.as_mut(), g);
        }
        for (level, (caches, pre_down)) in self.down.iter().zip(&cache.down).rev() {
            dh = level.down.backward(p, pre_down, &dh, g);
            for (b, c) in level.blocks.iter().zip(caches).rev() {
                dh.add_assign(&dskips.pop().expect("skip gradient underflow"));
                dh = b.backward(p, c, dh, temb, dtemb.as_mut(), g);
            }
        }
        debug_assert!(dskips.is_empty());
        self.conv_in.backward(p, &cache.input, &dh, g);

        if let (Some(mlp), Some(tc), Some(dtemb)) = (&self.time, &cache.time, dtemb) {
            let dt = silu_backward(&tc.temb, &dtemb);
            let da1 = mlp.fc2.backward(p, &tc.a1, &dt, g);
            let dh1 = silu_backward(&tc.h1, &da1);
            mlp.fc1.backward(p, &tc.emb, &dh1, g);
        }
    }
}
