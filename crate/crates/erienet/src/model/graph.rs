//! Single definition of the network compute graph.
//!
//! `erienet_graph` is written once against the [`Fabric`] trait and
//! instantiated three ways: [`PlanFabric`] with a seed allocates
//! parameters, [`PlanFabric`] without one propagates shapes and counts
//! params/FLOPs per layer, and [`RunFabric`] executes on an autodiff
//! tape. Build, manifest, and forward therefore cannot drift apart.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BnStats, Scalar, Shape, Tape, Tensor, Var};

use super::{BlockVariant, Guidance, ModelConfig, ScaleCfg};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

/// Abstract operations the graph is written against. `H` is a tensor
/// handle: a [`Shape`] during planning, a [`Var`] during execution.
pub trait Fabric {
    type H: Copy;

    fn conv(
        &mut self,
        name: &str,
        x: Self::H,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self::H>;
    /// Depthwise 3x3 (stride, pad 1) followed by a pointwise 1x1.
    fn dsconv(&mut self, name: &str, x: Self::H, cout: usize, stride: usize) -> Result<Self::H>;
    /// Multiply by a learnable scalar (the per-branch mask, init 1.0).
    fn scalar_mask(&mut self, name: &str, x: Self::H) -> Result<Self::H>;
    fn norm(&mut self, name: &str, x: Self::H, kind: NormKind, affine: bool) -> Result<Self::H>;
    /// Two zero-init 3x3 heads over `trunk` produce gamma/beta maps;
    /// out = (1 + gamma) * xhat + beta.
    fn san(&mut self, name: &str, xhat: Self::H, trunk: Self::H) -> Result<Self::H>;
    /// Efficient channel attention: sigmoid(conv1d(GAP(x))) gates x.
    fn eca(&mut self, name: &str, x: Self::H, k: usize) -> Result<Self::H>;
    fn relu(&mut self, x: Self::H) -> Result<Self::H>;
    fn add(&mut self, a: Self::H, b: Self::H) -> Result<Self::H>;
    fn concat(&mut self, xs: &[Self::H]) -> Result<Self::H>;
    fn avg_pool(&mut self, x: Self::H, factor: usize) -> Result<Self::H>;
    fn upsample2x(&mut self, x: Self::H) -> Result<Self::H>;
    fn pixel_shuffle2(&mut self, x: Self::H) -> Result<Self::H>;
    fn scale_const(&mut self, x: Self::H, c: f64) -> Result<Self::H>;
    fn clamp01(&mut self, x: Self::H) -> Result<Self::H>;
}

/// One dense block in any of its ablation variants. `x` must carry
/// `sc.width` channels; `san_trunk` is the shared green-guidance trunk
/// (scale-16 only under gcg schemes).
pub fn block_graph<F: Fabric>(
    f: &mut F,
    prefix: &str,
    cfg: &ModelConfig,
    sc: &ScaleCfg,
    x: F::H,
    san_trunk: Option<F::H>,
) -> Result<F::H> {
    if cfg.block_variant == BlockVariant::Rb {
        let a = f.conv(&format!("{prefix}.conv0"), x, sc.width, 3, 1, 1)?;
        let a = f.relu(a)?;
        let a = f.conv(&format!("{prefix}.conv1"), a, sc.width, 3, 1, 1)?;
        let y = f.add(x, a)?;
        return f.relu(y);
    }
    let bottleneck = cfg.block_variant == BlockVariant::RdbStar;
    let residual = matches!(
        cfg.block_variant,
        BlockVariant::Rdb | BlockVariant::RdbStar | BlockVariant::Crdb
    );
    let attention = cfg.block_variant == BlockVariant::Crdb;

    let mut parts: Vec<F::H> = vec![x];
    for j in 0..sc.depth {
        let cat = if parts.len() == 1 { x } else { f.concat(&parts)? };
        let kind = if cfg.guidance == Guidance::GcgLn && san_trunk.is_some() {
            NormKind::Layer
        } else {
            NormKind::Batch
        };
        // SAN replaces the affine pair; plain norms keep their own.
        let affine = san_trunk.is_none();
        let mut h = f.norm(&format!("{prefix}.dense{j}.norm"), cat, kind, affine)?;
        if let Some(trunk) = san_trunk {
            h = f.san(&format!("{prefix}.dense{j}.san"), h, trunk)?;
        }
        let mut h = f.relu(h)?;
        if bottleneck {
            h = f.conv(&format!("{prefix}.dense{j}.bottleneck"), h, sc.growth, 1, 1, 0)?;
            h = f.relu(h)?;
        }
        let y = f.conv(&format!("{prefix}.dense{j}.conv"), h, sc.growth, 3, 1, 1)?;
        parts.push(y);
    }
    let cat = f.concat(&parts)?;
    let mut fused = f.conv(&format!("{prefix}.fuse"), cat, sc.width, 1, 1, 0)?;
    if attention {
        fused = f.eca(&format!("{prefix}.eca"), fused, cfg.eca_kernel)?;
    }
    if residual {
        f.add(x, fused)
    } else {
        Ok(fused)
    }
}

/// The whole network, from the packed 4-channel input (H/2 x W/2) and
/// the green pair to the 3 x H x W output (clamped when `train` is off).
pub fn erienet_graph<F: Fabric>(
    f: &mut F,
    cfg: &ModelConfig,
    train: bool,
    packed: F::H,
    green: F::H,
) -> Result<F::H> {
    let gcg = cfg.guidance != Guidance::NoneBn;
    let trunk = if gcg {
        // Green pair pooled from packed (H/2) to scale-16 (H/16) size.
        let g = f.avg_pool(green, 8)?;
        let t = f.conv("gcg.trunk", g, cfg.san_hidden, 3, 1, 1)?;
        Some(f.relu(t)?)
    } else {
        None
    };

    let mut scales = cfg.scales.clone();
    scales.sort_unstable_by(|a, b| b.cmp(a)); // coarse to fine

    let mut feats: Vec<(usize, F::H, usize)> = Vec::new();
    for &s in &scales {
        let sc = cfg.scale_cfg(s);
        // Packed input sits at mosaic scale 2; each stride-2 DS-conv
        // stage halves resolution until scale s is reached.
        let stages = (s / 2).trailing_zeros() as usize;
        let mut x = packed;
        for i in 0..stages {
            x = f.dsconv(&format!("branch{s}.down{i}"), x, sc.width, 2)?;
            x = f.relu(x)?;
        }
        x = f.scalar_mask(&format!("branch{s}.mask"), x)?;
        let san_trunk = if s == 16 { trunk } else { None };
        let blocks = if s == 16 { cfg.parallel_crdbs_at_16 } else { 1 };
        let outs: Vec<F::H> = (0..blocks)
            .map(|b| block_graph(f, &format!("branch{s}.crdb{b}"), cfg, sc, x, san_trunk))
            .collect::<Result<_>>()?;
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = f.add(acc, o)?;
        }
        if blocks > 1 {
            acc = f.scale_const(acc, 1.0 / blocks as f64)?;
        }
        feats.push((s, acc, sc.width));
    }

    // Progressive fusion toward the packed resolution (scale 2).
    let (mut cur_scale, mut cur, _) = feats[0];
    for &(s, feat, w) in &feats[1..] {
        while cur_scale > s {
            cur = f.upsample2x(cur)?;
            cur_scale /= 2;
        }
        let cat = f.concat(&[cur, feat])?;
        cur = f.conv(&format!("fuse{s}"), cat, w, 3, 1, 1)?;
        cur = f.relu(cur)?;
    }
    while cur_scale > 2 {
        cur = f.upsample2x(cur)?;
        cur_scale /= 2;
    }

    // Reconstruction head: 1x1 skip from the packed input, one residual
    // block, projection to 12 channels, sub-pixel upscale to H x W.
    // The head always runs at the finest-scale width so its cost does
    // not depend on which coarser branches are enabled.
    let head_w = cfg.scale4.width;
    cur = f.conv("head.proj", cur, head_w, 1, 1, 0)?;
    let skip = f.conv("head.skip", packed, head_w, 1, 1, 0)?;
    let mut h = f.add(cur, skip)?;
    let r = f.conv("head.res.conv0", h, head_w, 3, 1, 1)?;
    let r = f.relu(r)?;
    let r = f.conv("head.res.conv1", r, head_w, 3, 1, 1)?;
    h = f.add(h, r)?;
    h = f.relu(h)?;
    let t = f.conv("head.out", h, 12, 3, 1, 1)?;
    let img = f.pixel_shuffle2(t)?;
    if train {
        Ok(img)
    } else {
        f.clamp01(img)
    }
}

// ---------------------------------------------------------------------
// Planning fabric: shape propagation, manifest, parameter allocation.
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LayerEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub params: u64,
    pub flops: u64,
}

enum Init {
    Kaiming { fan_in: usize },
    Zero,
    One,
}

pub struct PlanFabric<T: Scalar> {
    seed: Option<u64>,
    pub entries: Vec<LayerEntry>,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub stats: BTreeMap<String, BnStats<T>>,
    anon: usize,
}

impl<T: Scalar> PlanFabric<T> {
    /// With a seed, allocates parameters while planning; without one,
    /// only the manifest is produced.
    pub fn new(seed: Option<u64>) -> Self {
        PlanFabric {
            seed,
            entries: Vec::new(),
            tensors: BTreeMap::new(),
            stats: BTreeMap::new(),
            anon: 0,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    fn rec(&mut self, name: String, kind: &str, input: Shape, out: Shape, params: u64, flops: u64) {
        self.entries.push(LayerEntry {
            name,
            kind: kind.into(),
            in_shape: input,
            out_shape: out,
            params,
            flops,
        });
    }

    fn anon_name(&mut self, kind: &str) -> String {
        self.anon += 1;
        format!("{}#{}", kind, self.anon)
    }

    fn alloc(&mut self, name: String, shape: Shape, init: Init) {
        let Some(seed) = self.seed else { return };
        let t = match init {
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, &mut Rng::for_label(seed, &name))
            }
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::full(shape, 1.0),
        };
        let prev = self.tensors.insert(name, t);
        debug_assert!(prev.is_none(), "duplicate parameter name");
    }

    fn conv_plan(
        &mut self,
        name: &str,
        x: Shape,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Result<Shape> {
        let [b, cin, h, w] = x;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {h}x{w} smaller than kernel {k}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let out = [b, cout, oh, ow];
        let params = (cout * cin * k * k + cout) as u64;
        let flops = (2 * k * k * cin * cout * oh * ow + oh * ow * cout) as u64;
        self.alloc(format!("{name}.weight"), [cout, cin, k, k], init);
        self.alloc(format!("{name}.bias"), [1, cout, 1, 1], Init::Zero);
        self.rec(name.into(), "conv", x, out, params, flops);
        Ok(out)
    }
}

fn elems(s: Shape) -> u64 {
    (s[0] * s[1] * s[2] * s[3]) as u64
}

impl<T: Scalar> Fabric for PlanFabric<T> {
    type H = Shape;

    fn conv(
        &mut self,
        name: &str,
        x: Shape,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Shape> {
        let fan_in = x[1] * k * k;
        self.conv_plan(name, x, cout, k, stride, pad, Init::Kaiming { fan_in })
    }

    fn dsconv(&mut self, name: &str, x: Shape, cout: usize, stride: usize) -> Result<Shape> {
        let [b, cin, h, w] = x;
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (w + 2 - 3) / stride + 1;
        let mid = [b, cin, oh, ow];
        let dw_params = (cin * 9 + cin) as u64;
        let dw_flops = (2 * 9 * cin * oh * ow + cin * oh * ow) as u64;
        self.alloc(format!("{name}.dw.weight"), [cin, 1, 3, 3], Init::Kaiming { fan_in: 9 });
        self.alloc(format!("{name}.dw.bias"), [1, cin, 1, 1], Init::Zero);
        self.rec(format!("{name}.dw"), "depthwise_conv", x, mid, dw_params, dw_flops);
        self.conv_plan(
            &format!("{name}.pw"),
            mid,
            cout,
            1,
            1,
            0,
            Init::Kaiming { fan_in: cin },
        )
    }

    fn scalar_mask(&mut self, name: &str, x: Shape) -> Result<Shape> {
        self.alloc(name.into(), [1, 1, 1, 1], Init::One);
        self.rec(name.into(), "scalar_mask", x, x, 1, elems(x));
        Ok(x)
    }

    fn norm(&mut self, name: &str, x: Shape, kind: NormKind, affine: bool) -> Result<Shape> {
        let c = x[1];
        let mut params = 0u64;
        let mut flops = 2 * elems(x);
        if affine {
            self.alloc(format!("{name}.gamma"), [1, c, 1, 1], Init::One);
            self.alloc(format!("{name}.beta"), [1, c, 1, 1], Init::Zero);
            params = 2 * c as u64;
            flops += 2 * elems(x);
        }
        if kind == NormKind::Batch && self.seed.is_some() {
            self.stats.insert(name.into(), BnStats::identity(name, c));
        }
        let label = match kind {
            NormKind::Batch => "batch_norm",
            NormKind::Layer => "layer_norm",
        };
        self.rec(name.into(), label, x, x, params, flops);
        Ok(x)
    }

    fn san(&mut self, name: &str, xhat: Shape, trunk: Shape) -> Result<Shape> {
        if trunk[2] != xhat[2] || trunk[3] != xhat[3] {
            return Err(Error::shape(
                "san",
                format!("trunk spatial {:?} != feature spatial {:?}", trunk, xhat),
            ));
        }
        let c = xhat[1];
        for head in ["gamma", "beta"] {
            self.conv_plan(&format!("{name}.{head}"), trunk, c, 3, 1, 1, Init::Zero)?;
        }
        // (1 + gamma) * xhat + beta: one add, one mul, one add per element.
        self.rec(format!("{name}.modulate"), "san_modulate", xhat, xhat, 0, 3 * elems(xhat));
        Ok(xhat)
    }

    fn eca(&mut self, name: &str, x: Shape, k: usize) -> Result<Shape> {
        if k % 2 == 0 {
            return Err(Error::invalid("eca", format!("kernel size {k} must be odd")));
        }
        let c = x[1] as u64;
        self.alloc(format!("{name}.weight"), [1, 1, 1, k], Init::Kaiming { fan_in: k });
        // GAP + 1-D conv over channels + sigmoid + broadcast gate.
        let flops = elems(x) + 2 * k as u64 * c + c + elems(x);
        self.rec(name.into(), "eca", x, x, k as u64, flops);
        Ok(x)
    }

    fn relu(&mut self, x: Shape) -> Result<Shape> {
        let name = self.anon_name("relu");
        self.rec(name, "relu", x, x, 0, elems(x));
        Ok(x)
    }

    fn add(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        if a != b {
            return Err(Error::shape("add", format!("{a:?} vs {b:?}")));
        }
        let name = self.anon_name("add");
        self.rec(name, "add", a, a, 0, elems(a));
        Ok(a)
    }

    fn concat(&mut self, xs: &[Shape]) -> Result<Shape> {
        let first = xs[0];
        let mut c = 0;
        for s in xs {
            if (s[0], s[2], s[3]) != (first[0], first[2], first[3]) {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            c += s[1];
        }
        let out = [first[0], c, first[2], first[3]];
        let name = self.anon_name("concat");
        self.rec(name, "concat", first, out, 0, 0);
        Ok(out)
    }

    fn avg_pool(&mut self, x: Shape, factor: usize) -> Result<Shape> {
        if x[2] % factor != 0 || x[3] % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("spatial {:?} not divisible by {factor}", x),
            ));
        }
        let out = [x[0], x[1], x[2] / factor, x[3] / factor];
        let name = self.anon_name("avg_pool");
        self.rec(name, "avg_pool", x, out, 0, elems(x));
        Ok(out)
    }

    fn upsample2x(&mut self, x: Shape) -> Result<Shape> {
        let out = [x[0], x[1], 2 * x[2], 2 * x[3]];
        let name = self.anon_name("upsample2x");
        self.rec(name, "bilinear_upsample2x", x, out, 0, 8 * elems(out));
        Ok(out)
    }

    fn pixel_shuffle2(&mut self, x: Shape) -> Result<Shape> {
        if x[1] % 4 != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("channels {} not divisible by 4", x[1]),
            ));
        }
        let out = [x[0], x[1] / 4, 2 * x[2], 2 * x[3]];
        let name = self.anon_name("pixel_shuffle");
        self.rec(name, "pixel_shuffle", x, out, 0, 0);
        Ok(out)
    }

    fn scale_const(&mut self, x: Shape, _c: f64) -> Result<Shape> {
        let name = self.anon_name("scale");
        self.rec(name, "scale_const", x, x, 0, elems(x));
        Ok(x)
    }

    fn clamp01(&mut self, x: Shape) -> Result<Shape> {
        let name = self.anon_name("clamp");
        self.rec(name, "clamp01", x, x, 0, elems(x));
        Ok(x)
    }
}

// ---------------------------------------------------------------------
// Execution fabric: runs the graph on a tape against stored parameters.
// ---------------------------------------------------------------------

pub struct RunFabric<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub tensors: &'a BTreeMap<String, Tensor<T>>,
    pub stats: &'a mut BTreeMap<String, BnStats<T>>,
    pub train: bool,
    /// Leaf var per parameter touched by the forward, for gradient lookup.
    pub vars: BTreeMap<String, Var>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl<'a, T: Scalar> RunFabric<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        tensors: &'a BTreeMap<String, Tensor<T>>,
        stats: &'a mut BTreeMap<String, BnStats<T>>,
        train: bool,
    ) -> Self {
        RunFabric { tape, tensors, stats, train, vars: BTreeMap::new() }
    }

    fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.into()))?;
        let v = self.tape.leaf(t.clone(), self.train);
        self.vars.insert(name.into(), v);
        Ok(v)
    }
}

impl<T: Scalar> Fabric for RunFabric<'_, T> {
    type H = Var;

    fn conv(
        &mut self,
        name: &str,
        x: Var,
        _cout: usize,
        _k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn dsconv(&mut self, name: &str, x: Var, _cout: usize, stride: usize) -> Result<Var> {
        let dw = self.var(&format!("{name}.dw.weight"))?;
        let db = self.var(&format!("{name}.dw.bias"))?;
        let pw = self.var(&format!("{name}.pw.weight"))?;
        let pb = self.var(&format!("{name}.pw.bias"))?;
        self.tape.depthwise_separable_conv(x, dw, Some(db), pw, Some(pb), stride, 1)
    }

    fn scalar_mask(&mut self, name: &str, x: Var) -> Result<Var> {
        let m = self.var(name)?;
        self.tape.mul(x, m)
    }

    fn norm(&mut self, name: &str, x: Var, kind: NormKind, affine: bool) -> Result<Var> {
        let (gamma, beta) = if affine {
            (
                Some(self.var(&format!("{name}.gamma"))?),
                Some(self.var(&format!("{name}.beta"))?),
            )
        } else {
            (None, None)
        };
        match kind {
            NormKind::Layer => self.tape.layer_norm(x, gamma, beta, BN_EPS),
            NormKind::Batch => {
                let c = self.tape.shape(x)[1];
                let stats = self
                    .stats
                    .entry(name.into())
                    .or_insert_with(|| BnStats::identity(name, c));
                self.tape.batch_norm(x, gamma, beta, stats, self.train, BN_EPS, BN_MOMENTUM)
            }
        }
    }

    fn san(&mut self, name: &str, xhat: Var, trunk: Var) -> Result<Var> {
        let xs = self.tape.shape(xhat);
        let ts = self.tape.shape(trunk);
        if ts[2] != xs[2] || ts[3] != xs[3] {
            return Err(Error::shape(
                "san",
                format!("trunk spatial {ts:?} != feature spatial {xs:?}"),
            ));
        }
        let gw = self.var(&format!("{name}.gamma.weight"))?;
        let gb = self.var(&format!("{name}.gamma.bias"))?;
        let bw = self.var(&format!("{name}.beta.weight"))?;
        let bb = self.var(&format!("{name}.beta.bias"))?;
        let gamma = self.tape.conv2d(trunk, gw, Some(gb), 1, 1)?;
        let beta = self.tape.conv2d(trunk, bw, Some(bb), 1, 1)?;
        let scaled = self.tape.mul(xhat, gamma)?;
        let with_x = self.tape.add(xhat, scaled)?;
        self.tape.add(with_x, beta)
    }

    fn eca(&mut self, name: &str, x: Var, _k: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let pooled = self.tape.global_avg_pool(x);
        let conv = self.tape.conv1d_channels(pooled, w)?;
        let gate = self.tape.sigmoid(conv);
        self.tape.mul(x, gate)
    }

    fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.relu(x))
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.add(a, b)
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.tape.concat_channels(xs)
    }

    fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.tape.avg_pool(x, factor)
    }

    fn upsample2x(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.bilinear_upsample2x(x))
    }

    fn pixel_shuffle2(&mut self, x: Var) -> Result<Var> {
        self.tape.pixel_shuffle(x, 2)
    }

    fn scale_const(&mut self, x: Var, c: f64) -> Result<Var> {
        Ok(self.tape.mul_const(x, c))
    }

    fn clamp01(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.clamp01(x))
    }
}
