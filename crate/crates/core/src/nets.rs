//! Network architectures: per-modality prototype/attribute encoders, the
//! shared decoder with adaptive instance normalization, per-modality
//! discriminators, and the retrieval feature pathway.

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::graph::{Graph, Var};
use crate::params::{bind, he_uniform, Binding, ParamGroup, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{CodeBundle, PairBatch};

const LEAKY_SLOPE: f64 = 0.2;

/// Convolution layer handle: weights `[kh, kw, cin, cout]`, bias `[cout]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn register<S: Scalar>(
        set: &mut ParamSet<S>,
        group: ParamGroup,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = set.register(&format!("{name}.w"), group, he_uniform(vec![k, k, cin, cout], rng));
        let b = set.register(&format!("{name}.b"), group, Tensor::zeros(vec![cout]));
        ConvLayer { w, b, stride, pad }
    }

    fn zeroed<S: Scalar>(
        set: &mut ParamSet<S>,
        group: ParamGroup,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = set.register(&format!("{name}.w"), group, Tensor::zeros(vec![k, k, cin, cout]));
        let b = set.register(&format!("{name}.b"), group, Tensor::zeros(vec![cout]));
        ConvLayer { w, b, stride, pad }
    }

    fn apply<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: Var) -> Var {
        g.conv2d(x, bind.var(self.w), bind.var(self.b), self.stride, self.pad)
    }
}

/// Learned per-channel affine applied after instance normalization.
#[derive(Debug, Clone, Copy)]
pub struct NormAffine {
    gamma: ParamId,
    beta: ParamId,
}

impl NormAffine {
    fn register<S: Scalar>(
        set: &mut ParamSet<S>,
        group: ParamGroup,
        name: &str,
        c: usize,
    ) -> Self {
        let gamma = set.register(&format!("{name}.gamma"), group, Tensor::full(vec![c], S::one()));
        let beta = set.register(&format!("{name}.beta"), group, Tensor::zeros(vec![c]));
        NormAffine { gamma, beta }
    }

    fn apply<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: Var) -> Var {
        let n = g.instance_norm(x);
        g.channel_affine_c(n, bind.var(self.gamma), bind.var(self.beta))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseLayer {
    w: ParamId,
    b: ParamId,
}

impl DenseLayer {
    fn register<S: Scalar>(
        set: &mut ParamSet<S>,
        group: ParamGroup,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = set.register(&format!("{name}.w"), group, he_uniform(vec![din, dout], rng));
        let b = set.register(&format!("{name}.b"), group, Tensor::zeros(vec![dout]));
        DenseLayer { w, b }
    }

    fn zeroed<S: Scalar>(
        set: &mut ParamSet<S>,
        group: ParamGroup,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = set.register(&format!("{name}.w"), group, Tensor::zeros(vec![din, dout]));
        let b = set.register(&format!("{name}.b"), group, Tensor::zeros(vec![dout]));
        DenseLayer { w, b }
    }

    fn apply<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: Var) -> Var {
        g.linear(x, bind.var(self.w), bind.var(self.b))
    }
}

/// Normalized residual block used by the prototype encoders.
#[derive(Debug, Clone, Copy)]
struct ResBlockEnc {
    conv1: ConvLayer,
    n1: NormAffine,
    conv2: ConvLayer,
    n2: NormAffine,
}

impl ResBlockEnc {
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: Var) -> Var {
        let a = self.conv1.apply(g, bind, x);
        let a = self.n1.apply(g, bind, a);
        let a = g.relu(a);
        let a = self.conv2.apply(g, bind, a);
        let a = self.n2.apply(g, bind, a);
        g.add(x, a)
    }
}

/// Prototype encoder: two stride-2 stages then residual refinement, keeping a
/// spatial identity map at 1/4 resolution.
pub struct ProtoEncoder {
    stem1: ConvLayer,
    sn1: NormAffine,
    stem2: ConvLayer,
    sn2: NormAffine,
    res: [ResBlockEnc; 2],
}

impl ProtoEncoder {
    fn build<S: Scalar>(
        set: &mut ParamSet<S>,
        cfg: &RunConfig,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gp = ParamGroup::Generation;
        let (sw, cp, mid) = (cfg.stem_width, cfg.proto_channels, cfg.res_mid);
        let stem1 = ConvLayer::register(set, gp, &format!("{name}.stem1"), 3, 3, sw, 2, 1, rng);
        let sn1 = NormAffine::register(set, gp, &format!("{name}.norm1"), sw);
        let stem2 = ConvLayer::register(set, gp, &format!("{name}.stem2"), 3, sw, cp, 2, 1, rng);
        let sn2 = NormAffine::register(set, gp, &format!("{name}.norm2"), cp);
        let res = [1, 2].map(|i| ResBlockEnc {
            conv1: ConvLayer::register(set, gp, &format!("{name}.res{i}.conv1"), 3, cp, mid, 1, 1, rng),
            n1: NormAffine::register(set, gp, &format!("{name}.res{i}.norm1"), mid),
            conv2: ConvLayer::register(set, gp, &format!("{name}.res{i}.conv2"), 3, mid, cp, 1, 1, rng),
            n2: NormAffine::register(set, gp, &format!("{name}.res{i}.norm2"), cp),
        });
        ProtoEncoder { stem1, sn1, stem2, sn2, res }
    }

    /// `[B, H, W, 3]` -> `[B, H/4, W/4, proto_channels]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: Var) -> Var {
        let a = self.stem1.apply(g, bind, x);
        let a = self.sn1.apply(g, bind, a);
        let a = g.relu(a);
        let a = self.stem2.apply(g, bind, a);
        let a = self.sn2.apply(g, bind, a);
        let mut a = g.relu(a);
        for r in &self.res {
            a = r.forward(g, bind, a);
        }
        a
    }
}

/// Attribute encoder: small unnormalized conv stack (normalization would throw
/// away the illumination statistics it must capture) pooled to one vector.
pub struct AttrEncoder {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    fc: DenseLayer,
}

impl AttrEncoder {
    fn build<S: Scalar>(
        set: &mut ParamSet<S>,
        cfg: &RunConfig,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gp = ParamGroup::Generation;
        let aw = cfg.attr_width;
        AttrEncoder {
            conv1: ConvLayer::register(set, gp, &format!("{name}.conv1"), 3, 3, aw, 2, 1, rng),
            conv2: ConvLayer::register(set, gp, &format!("{name}.conv2"), 3, aw, 2 * aw, 2, 1, rng),
            conv3: ConvLayer::register(set, gp, &format!("{name}.conv3"), 3, 2 * aw, 2 * aw, 2, 1, rng),
            fc: DenseLayer::register(set, gp, &format!("{name}.fc"), 2 * aw, cfg.dim_attr(), rng),
        }
    }

    /// `[B, H, W, 3]` -> `[B, d_s + d_c + d_p]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: Var) -> Var {
        let a = self.conv1.apply(g, bind, x);
        let a = g.relu(a);
        let a = self.conv2.apply(g, bind, a);
        let a = g.relu(a);
        let a = self.conv3.apply(g, bind, a);
        let a = g.relu(a);
        let a = g.global_avg_pool(a);
        self.fc.apply(g, bind, a)
    }
}

/// Residual block whose normalizations take per-sample scale/shift from the
/// attribute pathway.
#[derive(Debug, Clone, Copy)]
struct ResBlockAda {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

/// Shared decoder: residual blocks at prototype resolution, then two
/// upsampling stages back to image size. Every normalization site is driven by
/// the attribute code through a small MLP. The attribute reaches pixels only
/// through these per-channel affines: a spatial side door (e.g. broadcasting
/// codes as feature maps) would let the generation objective smuggle identity
/// around the prototype and starve the retrieval features.
pub struct Decoder {
    res: [ResBlockAda; 2],
    shrink: ConvLayer,
    up: ConvLayer,
    last: ConvLayer,
    mlp1: DenseLayer,
    mlp2: DenseLayer,
    /// Channel count at each adaptive-normalization site, in forward order.
    ada_channels: Vec<usize>,
}

impl Decoder {
    fn build<S: Scalar>(set: &mut ParamSet<S>, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        let gp = ParamGroup::Generation;
        let (cp, mid, dw) = (cfg.proto_channels, cfg.res_mid, cfg.dec_width);
        let half = (dw / 2).max(1);
        let res = [1, 2].map(|i| ResBlockAda {
            conv1: ConvLayer::register(set, gp, &format!("dec.res{i}.conv1"), 3, cp, mid, 1, 1, rng),
            conv2: ConvLayer::register(set, gp, &format!("dec.res{i}.conv2"), 3, mid, cp, 1, 1, rng),
        });
        let shrink = ConvLayer::register(set, gp, "dec.shrink", 1, cp, dw, 1, 0, rng);
        let up = ConvLayer::register(set, gp, "dec.up", 3, dw, half, 1, 1, rng);
        let last = ConvLayer::register(set, gp, "dec.last", 3, half, 3, 1, 1, rng);
        let ada_channels = vec![mid, cp, mid, cp, dw, half];
        let ada_total: usize = ada_channels.iter().map(|c| 2 * c).sum();
        let hidden = 2 * cfg.dim_attr();
        let mlp1 = DenseLayer::register(set, gp, "dec.mlp1", cfg.dim_attr(), hidden, rng);
        // Zero-init so every adaptive site starts as the identity transform.
        let mlp2 = DenseLayer::zeroed(set, gp, "dec.mlp2", hidden, ada_total);
        Decoder { res, shrink, up, last, mlp1, mlp2, ada_channels }
    }

    /// Decodes stacked jobs: `p: [B, h, w, cp]` with a matching attribute
    /// matrix `[B, d_s + d_c + d_p]` into images `[B, H, W, 3]` in `[-1, 1]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, p: Var, attr: Var) -> Var {
        let hidden = self.mlp1.apply(g, bind, attr);
        let hidden = g.relu(hidden);
        let ada = self.mlp2.apply(g, bind, hidden);
        // Per-site [scale || shift] slices, laid out in forward order.
        let mut offset = 0;
        let mut site = |g: &mut Graph<S>, x: Var, idx: usize| -> Var {
            let c = self.ada_channels[idx];
            let scale = g.slice_cols(ada, offset, c);
            let shift = g.slice_cols(ada, offset + c, c);
            offset += 2 * c;
            let n = g.instance_norm(x);
            g.channel_affine_bc(n, scale, shift)
        };

        let mut a = p;
        for (i, r) in self.res.iter().enumerate() {
            let y = r.conv1.apply(g, bind, a);
            let y = site(g, y, 2 * i);
            let y = g.relu(y);
            let y = r.conv2.apply(g, bind, y);
            let y = site(g, y, 2 * i + 1);
            a = g.add(a, y);
        }
        let a2 = self.shrink.apply(g, bind, a);
        let a2 = site(g, a2, 4);
        let a2 = g.relu(a2);
        let a2 = g.upsample2x(a2);
        let a3 = self.up.apply(g, bind, a2);
        let a3 = site(g, a3, 5);
        let a3 = g.relu(a3);
        let a3 = g.upsample2x(a3);
        let out = self.last.apply(g, bind, a3);
        g.tanh(out)
    }
}

/// Per-modality discriminator: stride-2 conv stack with either a pooled
/// global probability head or a patch head averaged over positions.
pub struct Discriminator {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    /// Global head (absent in patch mode).
    fc: Option<DenseLayer>,
    /// Patch head: 1x1 conv to a probability map (absent in global mode).
    patch: Option<ConvLayer>,
}

impl Discriminator {
    fn build<S: Scalar>(
        set: &mut ParamSet<S>,
        cfg: &RunConfig,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gp = ParamGroup::Discriminator;
        let dwi = cfg.dis_width;
        let conv1 = ConvLayer::register(set, gp, &format!("{name}.conv1"), 3, 3, dwi, 2, 1, rng);
        let conv2 = ConvLayer::register(set, gp, &format!("{name}.conv2"), 3, dwi, 2 * dwi, 2, 1, rng);
        let conv3 =
            ConvLayer::register(set, gp, &format!("{name}.conv3"), 3, 2 * dwi, 4 * dwi, 2, 1, rng);
        // The head starts at zero so every probability begins at exactly 0.5.
        let (fc, patch) = if cfg.patch_dis {
            (None, Some(ConvLayer::zeroed(set, gp, &format!("{name}.patch"), 1, 4 * dwi, 1, 1, 0)))
        } else {
            (Some(DenseLayer::zeroed(set, gp, &format!("{name}.fc"), 4 * dwi, 1)), None)
        };
        Discriminator { conv1, conv2, conv3, fc, patch }
    }

    /// `[B, H, W, 3]` -> `[B, 1]` probability that the input is real.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: Var) -> Var {
        let slope = S::of(LEAKY_SLOPE);
        let a = self.conv1.apply(g, bind, x);
        let a = g.leaky_relu(a, slope);
        let a = self.conv2.apply(g, bind, a);
        let a = g.leaky_relu(a, slope);
        let a = self.conv3.apply(g, bind, a);
        let a = g.leaky_relu(a, slope);
        match (&self.fc, &self.patch) {
            (Some(fc), None) => {
                let pooled = g.global_avg_pool(a);
                let logit = fc.apply(g, bind, pooled);
                g.sigmoid(logit)
            }
            (None, Some(patch)) => {
                let map = patch.apply(g, bind, a);
                let probs = g.sigmoid(map);
                // Mean probability over patch positions -> [B, 1].
                g.global_avg_pool(probs)
            }
            _ => unreachable!("exactly one discriminator head"),
        }
    }
}

/// Retrieval feature pathway: prototype embedder, learned mixing weight,
/// feature head, identity classifier.
pub struct FeaturePath {
    conv1: ConvLayer,
    conv2: ConvLayer,
    embed: DenseLayer,
    head: DenseLayer,
    classifier: DenseLayer,
    /// Mixing weight in `[0, 1]`, clamped after every optimizer step.
    pub alpha: ParamId,
}

impl FeaturePath {
    fn build<S: Scalar>(
        set: &mut ParamSet<S>,
        cfg: &RunConfig,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gp = ParamGroup::Feature;
        let (cp, ew) = (cfg.proto_channels, cfg.embed_width);
        let conv1 = ConvLayer::register(set, gp, "feat.conv1", 3, cp, ew, 2, 1, rng);
        let conv2 = ConvLayer::register(set, gp, "feat.conv2", 3, ew, ew, 2, 1, rng);
        let embed = DenseLayer::register(set, gp, "feat.embed", ew, cfg.dim_proto_embed, rng);
        let head_in = match cfg.feature_mode {
            crate::config::FeatureMode::Combined => cfg.dim_proto_embed + cfg.dim_style,
            crate::config::FeatureMode::Proto => cfg.dim_proto_embed,
            crate::config::FeatureMode::Attr => cfg.dim_style,
        };
        let head = DenseLayer::register(set, gp, "feat.head", head_in, cfg.dim_feature, rng);
        let classifier =
            DenseLayer::register(set, gp, "feat.classifier", cfg.dim_feature, n_classes, rng);
        let alpha =
            set.register("feat.alpha", gp, Tensor::full(vec![1], S::of(cfg.alpha_init)));
        FeaturePath { conv1, conv2, embed, head, classifier, alpha }
    }

    /// Embeds prototype maps `[B, h, w, cp]` to vectors `[B, dim_proto_embed]`.
    pub fn embed_prototype<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, p: Var) -> Var {
        let a = self.conv1.apply(g, bind, p);
        let a = g.relu(a);
        let a = self.conv2.apply(g, bind, a);
        let a = g.relu(a);
        let a = g.global_avg_pool(a);
        self.embed.apply(g, bind, a)
    }

    /// Combines the embedded prototype with the style code according to the
    /// feature mode, then maps through the head FC to the retrieval feature.
    pub fn feature<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        mode: crate::config::FeatureMode,
        p_embed: Var,
        style: Var,
    ) -> Var {
        let comb = match mode {
            crate::config::FeatureMode::Combined => {
                let alpha = bind.var(self.alpha);
                let alpha_s = g.mean_all(alpha); // [1] -> scalar node
                let one_minus = g.one_minus(alpha_s);
                let pw = g.mul_by_scalar(p_embed, alpha_s);
                let sw = g.mul_by_scalar(style, one_minus);
                g.concat_cols(&[pw, sw])
            }
            crate::config::FeatureMode::Proto => p_embed,
            crate::config::FeatureMode::Attr => style,
        };
        self.head.apply(g, bind, comb)
    }

    /// Identity logits `[B, n_classes]` for training.
    pub fn classify<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, f: Var) -> Var {
        self.classifier.apply(g, bind, f)
    }
}

/// All generation-side parameters (encoders, decoder, feature pathway) plus
/// the architecture handles to run them.
pub struct GeneratorParams<S: Scalar> {
    pub set: ParamSet<S>,
    pub proto_enc: [ProtoEncoder; 2],
    pub attr_enc: [AttrEncoder; 2],
    pub decoder: Decoder,
    pub feat: FeaturePath,
    pub n_classes: usize,
}

impl<S: Scalar> GeneratorParams<S> {
    /// Builds and initializes every generation-side network. Parameter
    /// registration order is fixed, so serialization is stable.
    pub fn new(cfg: &RunConfig, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(n_classes >= 1, "need at least one identity class");
        let mut set = ParamSet::new();
        let proto_enc = [
            ProtoEncoder::build(&mut set, cfg, "proto_enc1", rng),
            ProtoEncoder::build(&mut set, cfg, "proto_enc2", rng),
        ];
        let attr_enc = [
            AttrEncoder::build(&mut set, cfg, "attr_enc1", rng),
            AttrEncoder::build(&mut set, cfg, "attr_enc2", rng),
        ];
        let decoder = Decoder::build(&mut set, cfg, rng);
        let feat = FeaturePath::build(&mut set, cfg, n_classes, rng);
        GeneratorParams { set, proto_enc, attr_enc, decoder, feat, n_classes }
    }
}

/// Both discriminators.
pub struct DiscriminatorParams<S: Scalar> {
    pub set: ParamSet<S>,
    pub dis: [Discriminator; 2],
}

impl<S: Scalar> DiscriminatorParams<S> {
    pub fn new(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut set = ParamSet::new();
        let dis = [
            Discriminator::build(&mut set, cfg, "dis1", rng),
            Discriminator::build(&mut set, cfg, "dis2", rng),
        ];
        DiscriminatorParams { set, dis }
    }
}

/// Splits a full attribute matrix `[B, d_s + d_c + d_p]` into its three codes.
pub fn split_attribute<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &RunConfig,
    attr: Var,
) -> (Var, Var, Var) {
    let style = g.slice_cols(attr, 0, cfg.dim_style);
    let illum = g.slice_cols(attr, cfg.dim_style, cfg.dim_illum);
    let pose = g.slice_cols(attr, cfg.dim_style + cfg.dim_illum, cfg.dim_pose);
    (style, illum, pose)
}

/// Graph handles produced by one generation forward pass over a pair batch.
/// Modality index 0 is visible, 1 is infrared.
pub struct GenNodes {
    /// Source images `[B, H, W, 3]`.
    pub x: [Var; 2],
    pub proto: [Var; 2],
    /// Full attribute vectors `[B, d_s + d_c + d_p]`.
    pub attr: [Var; 2],
    pub style: [Var; 2],
    pub illum: [Var; 2],
    pub pose: [Var; 2],
    /// Identity-excluded concatenation `[illum; pose]` per modality.
    pub excluded: [Var; 2],
    /// Same-modality reconstruction of each source.
    pub self_recon: [Var; 2],
    /// `cross_from[m]`: identity of modality `m` rendered with the other
    /// modality's excluded factors (lives in domain `1 - m`).
    pub cross_from: [Var; 2],
    /// `illum_fake_in[m]`: the other identity's image moved into domain `m` by
    /// swapping only the illumination code (pose kept from the source).
    pub illum_fake_in: [Var; 2],
    /// Codes re-encoded from the cross-translated images.
    pub hat_proto: [Var; 2],
    pub hat_style: [Var; 2],
    /// `hat_ex[m]`: excluded code of modality `m` recovered from the
    /// translation that carried it.
    pub hat_ex: [Var; 2],
    /// Round-trip reconstruction of each source from re-encoded codes.
    pub cycle: [Var; 2],
}

/// Runs the full generation pipeline on stacked modality batches. All six
/// first-stage decodes go through the decoder as one stacked job, then the
/// two cycle decodes as a second stacked job.
pub fn forward_generation_nodes<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &RunConfig,
    gen: &GeneratorParams<S>,
    binding: &Binding,
    x_visible: Var,
    x_infrared: Var,
) -> GenNodes {
    let x = [x_visible, x_infrared];
    let b = g.value(x[0]).shape()[0];
    assert_eq!(g.value(x[1]).shape()[0], b, "modality batches must match");

    let mut proto = [x[0]; 2];
    let mut attr = [x[0]; 2];
    let mut style = [x[0]; 2];
    let mut illum = [x[0]; 2];
    let mut pose = [x[0]; 2];
    let mut excluded = [x[0]; 2];
    for m in 0..2 {
        proto[m] = gen.proto_enc[m].forward(g, binding, x[m]);
        attr[m] = gen.attr_enc[m].forward(g, binding, x[m]);
        let (s, c, p) = split_attribute(g, cfg, attr[m]);
        style[m] = s;
        illum[m] = c;
        pose[m] = p;
        excluded[m] = g.concat_cols(&[c, p]);
    }

    // First-stage decode jobs, fixed order:
    //   0: self-recon visible         (p0, s0, c0, p0)
    //   1: self-recon infrared        (p1, s1, c1, p1)
    //   2: cross_from[0] = vis->ir    (p0, s0, c1, p1)
    //   3: cross_from[1] = ir->vis    (p1, s1, c0, p0)
    //   4: illum fake in domain 0     (p1, s1, c0, p1)
    //   5: illum fake in domain 1     (p0, s0, c1, p0)
    let job_protos = [proto[0], proto[1], proto[0], proto[1], proto[1], proto[0]];
    let job_attrs: Vec<Var> = [
        (style[0], illum[0], pose[0]),
        (style[1], illum[1], pose[1]),
        (style[0], illum[1], pose[1]),
        (style[1], illum[0], pose[0]),
        (style[1], illum[0], pose[1]),
        (style[0], illum[1], pose[0]),
    ]
    .iter()
    .map(|&(s, c, p)| g.concat_cols(&[s, c, p]))
    .collect();

    let p_stack = g.concat_rows(&job_protos);
    let a_stack = g.concat_rows(&job_attrs);
    let decoded = gen.decoder.forward(g, binding, p_stack, a_stack);
    let job = |g: &mut Graph<S>, i: usize| g.slice_rows(decoded, i * b, b);
    let self_recon = [job(g, 0), job(g, 1)];
    let cross_from = [job(g, 2), job(g, 3)];
    let illum_fake_in = [job(g, 4), job(g, 5)];

    // Re-encode each translation with the encoders of the domain it landed in.
    // cross_from[0] lives in domain 1, cross_from[1] in domain 0.
    let reenc_proto = [
        gen.proto_enc[1].forward(g, binding, cross_from[0]),
        gen.proto_enc[0].forward(g, binding, cross_from[1]),
    ];
    let reenc_attr = [
        gen.attr_enc[1].forward(g, binding, cross_from[0]),
        gen.attr_enc[0].forward(g, binding, cross_from[1]),
    ];
    let mut hat_proto = [x[0]; 2];
    let mut hat_style = [x[0]; 2];
    let mut hat_ex = [x[0]; 2];
    for m in 0..2 {
        // reenc[m] encodes cross_from[m]: carries identity m, excluded 1-m.
        hat_proto[m] = reenc_proto[m];
        let (s, c, p) = split_attribute(g, cfg, reenc_attr[m]);
        hat_style[m] = s;
        // The excluded code of modality m was carried by cross_from[1-m].
        let (_, c_other, p_other) = split_attribute(g, cfg, reenc_attr[1 - m]);
        let _ = (c, p);
        hat_ex[m] = g.concat_cols(&[c_other, p_other]);
    }

    // Cycle decodes: rebuild each source from re-encoded codes only.
    let cyc_attrs: Vec<Var> = (0..2)
        .map(|m| {
            let c = g.slice_cols(hat_ex[m], 0, cfg.dim_illum);
            let p = g.slice_cols(hat_ex[m], cfg.dim_illum, cfg.dim_pose);
            g.concat_cols(&[hat_style[m], c, p])
        })
        .collect();
    let cp_stack = g.concat_rows(&[hat_proto[0], hat_proto[1]]);
    let ca_stack = g.concat_rows(&[cyc_attrs[0], cyc_attrs[1]]);
    let cycled = gen.decoder.forward(g, binding, cp_stack, ca_stack);
    let cycle = [g.slice_rows(cycled, 0, b), g.slice_rows(cycled, b, b)];

    GenNodes {
        x,
        proto,
        attr,
        style,
        illum,
        pose,
        excluded,
        self_recon,
        cross_from,
        illum_fake_in,
        hat_proto,
        hat_style,
        hat_ex,
        cycle,
    }
}

/// Value-level record of one generation pass over a pair batch: per-modality
/// code bundles, every generated image family, and re-encoded (hat) bundles.
pub struct GenerationRecord<S> {
    pub labels: Vec<usize>,
    /// `bundles[m][i]`: codes of pair `i` in modality `m`.
    pub bundles: [Vec<CodeBundle<S>>; 2],
    pub self_recon: [Vec<Tensor<S>>; 2],
    pub cross_from: [Vec<Tensor<S>>; 2],
    pub illum_fake_in: [Vec<Tensor<S>>; 2],
    /// Re-encoded codes: prototype/style recovered from `cross_from[m]`,
    /// excluded recovered from `cross_from[1-m]`.
    pub hat_bundles: [Vec<CodeBundle<S>>; 2],
    pub cycle: [Vec<Tensor<S>>; 2],
}

impl<S: Scalar> GenerationRecord<S> {
    pub fn batch_len(&self) -> usize {
        self.labels.len()
    }
}

fn unstack_rows<S: Scalar>(t: &Tensor<S>) -> Vec<Tensor<S>> {
    let s = t.shape();
    let rows = s[0];
    let row: usize = s[1..].iter().product();
    (0..rows)
        .map(|r| Tensor::new(s[1..].to_vec(), t.data()[r * row..(r + 1) * row].to_vec()))
        .collect()
}

fn bundles_from<S: Scalar>(
    cfg: &RunConfig,
    proto: &Tensor<S>,
    style: &Tensor<S>,
    illum: &Tensor<S>,
    pose: &Tensor<S>,
) -> Vec<CodeBundle<S>> {
    let protos = unstack_rows(proto);
    let styles = unstack_rows(style);
    let illums = unstack_rows(illum);
    let poses = unstack_rows(pose);
    let _ = cfg;
    protos
        .into_iter()
        .zip(styles)
        .zip(illums)
        .zip(poses)
        .map(|(((prototype, style), illum), pose)| CodeBundle { prototype, style, illum, pose })
        .collect()
}

/// Runs the generation pipeline as pure values (no gradients) and collects a
/// [`GenerationRecord`]. The loss functions over records mirror the training
/// graph exactly.
pub fn forward_generation<S: Scalar>(
    cfg: &RunConfig,
    gen: &GeneratorParams<S>,
    batch: &PairBatch<S>,
) -> GenerationRecord<S> {
    let mut g = Graph::new();
    let binding = bind(&mut g, &gen.set, false);
    let xv = g.constant(batch.stacked(crate::types::Modality::Visible));
    let xi = g.constant(batch.stacked(crate::types::Modality::Infrared));
    let nodes = forward_generation_nodes(&mut g, cfg, gen, &binding, xv, xi);

    let bundle_of = |g: &Graph<S>, m: usize| {
        bundles_from(
            cfg,
            g.value(nodes.proto[m]),
            g.value(nodes.style[m]),
            g.value(nodes.illum[m]),
            g.value(nodes.pose[m]),
        )
    };
    let hat_bundle_of = |g: &mut Graph<S>, m: usize| {
        let c = g.slice_cols(nodes.hat_ex[m], 0, cfg.dim_illum);
        let p = g.slice_cols(nodes.hat_ex[m], cfg.dim_illum, cfg.dim_pose);
        bundles_from(
            cfg,
            g.value(nodes.hat_proto[m]),
            g.value(nodes.hat_style[m]),
            g.value(c),
            g.value(p),
        )
    };

    let bundles = [bundle_of(&g, 0), bundle_of(&g, 1)];
    let hat_bundles = [hat_bundle_of(&mut g, 0), hat_bundle_of(&mut g, 1)];
    GenerationRecord {
        labels: batch.labels(),
        bundles,
        self_recon: [
            unstack_rows(g.value(nodes.self_recon[0])),
            unstack_rows(g.value(nodes.self_recon[1])),
        ],
        cross_from: [
            unstack_rows(g.value(nodes.cross_from[0])),
            unstack_rows(g.value(nodes.cross_from[1])),
        ],
        illum_fake_in: [
            unstack_rows(g.value(nodes.illum_fake_in[0])),
            unstack_rows(g.value(nodes.illum_fake_in[1])),
        ],
        hat_bundles,
        cycle: [unstack_rows(g.value(nodes.cycle[0])), unstack_rows(g.value(nodes.cycle[1]))],
    }
}

/// Decodes one image from explicit codes (generation/interpolation tooling).
pub fn decode_single<S: Scalar>(
    cfg: &RunConfig,
    gen: &GeneratorParams<S>,
    prototype: &Tensor<S>,
    style: &Tensor<S>,
    illum: &Tensor<S>,
    pose: &Tensor<S>,
) -> Tensor<S> {
    let mut g = Graph::new();
    let binding = bind(&mut g, &gen.set, false);
    let mut pshape = vec![1];
    pshape.extend_from_slice(prototype.shape());
    let p = g.constant(Tensor::new(pshape, prototype.data().to_vec()));
    let mut a = Vec::new();
    a.extend_from_slice(style.data());
    a.extend_from_slice(illum.data());
    a.extend_from_slice(pose.data());
    let alen = a.len();
    assert_eq!(alen, cfg.dim_attr(), "attribute length mismatch");
    let attr = g.constant(Tensor::new(vec![1, alen], a));
    let out = gen.decoder.forward(&mut g, &binding, p, attr);
    let v = g.value(out);
    Tensor::new(v.shape()[1..].to_vec(), v.data().to_vec())
}

/// Encodes one image into its code bundle with the encoders of `modality`.
pub fn encode_single<S: Scalar>(
    cfg: &RunConfig,
    gen: &GeneratorParams<S>,
    image: &Tensor<S>,
    modality: crate::types::Modality,
) -> CodeBundle<S> {
    let m = modality.index();
    let mut g = Graph::new();
    let binding = bind(&mut g, &gen.set, false);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = g.constant(Tensor::new(shape, image.data().to_vec()));
    let proto = gen.proto_enc[m].forward(&mut g, &binding, x);
    let attr = gen.attr_enc[m].forward(&mut g, &binding, x);
    let (s, c, p) = split_attribute(&mut g, cfg, attr);
    let take = |g: &Graph<S>, v: Var, drop_batch: bool| {
        let t = g.value(v);
        if drop_batch {
            Tensor::new(t.shape()[1..].to_vec(), t.data().to_vec())
        } else {
            t.clone()
        }
    };
    CodeBundle {
        prototype: take(&g, proto, true),
        style: take(&g, s, true),
        illum: take(&g, c, true),
        pose: take(&g, p, true),
    }
}

/// Linear interpolation of the identity-excluded codes of two bundles:
/// `t = 0` gives `a`'s excluded factors, `t = 1` gives `b`'s. The identity
/// half always comes from `a`.
pub fn interpolate_excluded<S: Scalar>(
    a: &CodeBundle<S>,
    b: &CodeBundle<S>,
    t: f64,
) -> Result<CodeBundle<S>, String> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(format!("interpolation factor {t} outside [0, 1]"));
    }
    if a.illum.shape() != b.illum.shape() || a.pose.shape() != b.pose.shape() {
        return Err("excluded-code shapes differ between bundles".to_string());
    }
    let tv = S::of(t);
    let one_m = S::one() - tv;
    // Two-coefficient form so both endpoints reproduce the inputs exactly.
    let lerp = |x: &Tensor<S>, y: &Tensor<S>| {
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&xa, &xb)| one_m * xa + tv * xb)
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    };
    Ok(CodeBundle {
        prototype: a.prototype.clone(),
        style: a.style.clone(),
        illum: lerp(&a.illum, &b.illum),
        pose: lerp(&a.pose, &b.pose),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{IdentityPair, Modality};
    use rand::SeedableRng;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.image_height = 16;
        cfg.image_width = 8;
        cfg.dim_style = 3;
        cfg.dim_illum = 2;
        cfg.dim_pose = 2;
        cfg.proto_channels = 6;
        cfg.dim_proto_embed = 5;
        cfg.dim_feature = 4;
        cfg.stem_width = 4;
        cfg.attr_width = 3;
        cfg.dis_width = 3;
        cfg.res_mid = 4;
        cfg.dec_width = 4;
        cfg.embed_width = 4;
        cfg.validate().unwrap();
        cfg
    }

    fn ramp_image(cfg: &RunConfig, scale: f64) -> Tensor<f64> {
        let n = cfg.image_height * cfg.image_width * 3;
        let data: Vec<f64> = (0..n).map(|i| ((i % 17) as f64 / 8.5 - 1.0) * scale).collect();
        Tensor::new(vec![cfg.image_height, cfg.image_width, 3], data)
    }

    fn tiny_batch(cfg: &RunConfig) -> PairBatch<f64> {
        PairBatch::new(vec![
            IdentityPair { label: 0, visible: ramp_image(cfg, 1.0), infrared: ramp_image(cfg, 0.5) },
            IdentityPair { label: 1, visible: ramp_image(cfg, -0.7), infrared: ramp_image(cfg, 0.3) },
        ])
        .unwrap()
    }

    #[test]
    fn prototype_shape_is_quarter_resolution() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = GeneratorParams::<f64>::new(&cfg, 4, &mut rng);
        let batch = tiny_batch(&cfg);
        let rec = forward_generation(&cfg, &gen, &batch);
        assert_eq!(rec.bundles[0][0].prototype.shape(), &[4, 2, 6]);
        assert_eq!(rec.bundles[0][0].style.shape(), &[3]);
        assert_eq!(rec.bundles[1][1].id_excluded().shape(), &[4]);
        assert_eq!(rec.self_recon[0][0].shape(), &[16, 8, 3]);
        assert_eq!(rec.cycle[1][1].shape(), &[16, 8, 3]);
    }

    #[test]
    fn decoder_output_is_bounded_by_tanh() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gen = GeneratorParams::<f64>::new(&cfg, 4, &mut rng);
        let rec = forward_generation(&cfg, &gen, &tiny_batch(&cfg));
        for img in rec.cross_from.iter().flatten() {
            assert!(img.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn discriminator_starts_at_exactly_half() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dis = DiscriminatorParams::<f64>::new(&cfg, &mut rng);
        let mut g = Graph::new();
        let binding = bind(&mut g, &dis.set, false);
        let x = g.constant(Tensor::full(vec![2, 16, 8, 3], 0.3));
        let p = dis.dis[0].forward(&mut g, &binding, x);
        for &v in g.value(p).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn patch_discriminator_also_starts_at_half() {
        let mut cfg = tiny_cfg();
        cfg.patch_dis = true;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dis = DiscriminatorParams::<f64>::new(&cfg, &mut rng);
        let mut g = Graph::new();
        let binding = bind(&mut g, &dis.set, false);
        let x = g.constant(Tensor::full(vec![1, 16, 8, 3], -0.2));
        let p = dis.dis[1].forward(&mut g, &binding, x);
        assert_eq!(g.value(p).shape(), &[1, 1]);
        assert_eq!(g.value(p).item(), 0.5);
    }

    fn seed_param(gen: &mut GeneratorParams<f64>, name: &str) {
        let id = gen
            .set
            .ids()
            .find(|&id| gen.set.name(id) == name)
            .expect("parameter exists");
        for (i, v) in gen.set.value_mut(id).data_mut().iter_mut().enumerate() {
            *v = 0.03 * ((i % 11) as f64 - 5.0);
        }
    }

    #[test]
    fn attribute_pathway_starts_as_identity_then_reacts_once_seeded() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gen = GeneratorParams::<f64>::new(&cfg, 4, &mut rng);
        let img = ramp_image(&cfg, 0.8);
        let bundle = encode_single(&cfg, &gen, &img, Modality::Visible);

        let base = decode_single(&cfg, &gen, &bundle.prototype, &bundle.style, &bundle.illum, &bundle.pose);
        let same = decode_single(&cfg, &gen, &bundle.prototype, &bundle.style, &bundle.illum, &bundle.pose);
        assert_eq!(base, same, "identical codes must decode identically");

        let mut pose2 = bundle.pose.clone();
        pose2.data_mut()[0] += 0.5;
        let moved = decode_single(&cfg, &gen, &bundle.prototype, &bundle.style, &bundle.illum, &pose2);
        // The attribute MLP head is zero-initialized, so every adaptive site
        // starts as plain instance norm: codes cannot move pixels yet.
        assert_eq!(base, moved, "attribute pathway must start as the identity");

        // Once that head has weights, the pose code must reach the pixels.
        seed_param(&mut gen, "dec.mlp2.w");
        let base = decode_single(&cfg, &gen, &bundle.prototype, &bundle.style, &bundle.illum, &bundle.pose);
        let moved = decode_single(&cfg, &gen, &bundle.prototype, &bundle.style, &bundle.illum, &pose2);
        assert_ne!(base, moved, "pose perturbation must change output pixels");
    }

    #[test]
    fn interpolate_excluded_endpoints_and_range() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = GeneratorParams::<f64>::new(&cfg, 4, &mut rng);
        let a = encode_single(&cfg, &gen, &ramp_image(&cfg, 1.0), Modality::Visible);
        let b = encode_single(&cfg, &gen, &ramp_image(&cfg, -1.0), Modality::Infrared);
        let at0 = interpolate_excluded(&a, &b, 0.0).unwrap();
        assert_eq!(at0.illum, a.illum);
        assert_eq!(at0.pose, a.pose);
        let at1 = interpolate_excluded(&a, &b, 1.0).unwrap();
        assert_eq!(at1.illum, b.illum);
        assert_eq!(at1.pose, b.pose);
        // Identity half always comes from `a`.
        assert_eq!(at1.prototype, a.prototype);
        assert_eq!(at1.style, a.style);
        assert!(interpolate_excluded(&a, &b, 1.5).is_err());
        assert!(interpolate_excluded(&a, &b, -0.1).is_err());
    }

    #[test]
    fn generation_record_shapes_are_consistent() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = GeneratorParams::<f64>::new(&cfg, 4, &mut rng);
        let rec = forward_generation(&cfg, &gen, &tiny_batch(&cfg));
        assert_eq!(rec.batch_len(), 2);
        for m in 0..2 {
            assert_eq!(rec.bundles[m].len(), 2);
            assert_eq!(rec.hat_bundles[m].len(), 2);
            assert_eq!(rec.illum_fake_in[m].len(), 2);
            for (b, h) in rec.bundles[m].iter().zip(&rec.hat_bundles[m]) {
                assert_eq!(b.style.shape(), h.style.shape());
                assert_eq!(b.id_excluded().shape(), h.id_excluded().shape());
                assert_eq!(b.prototype.shape(), h.prototype.shape());
            }
        }
    }
}
