//! Learnable neural-texture pyramid, screen-space feature pyramids for depth
//! and normal maps, the per-modality aggregator and the 9-channel
//! early-fusion baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Conv2dSpec, DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::imaging::GBuffer;

/// Network-ready views of one G-buffer, planar `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    pub uv: Tensor,
    pub mask: Tensor,
    /// `(d - near) / (far - near)`, zero where uncovered.
    pub depth: Tensor,
    /// Decoded camera-space normal, zero where uncovered.
    pub normal: Tensor,
}

impl ViewMaps {
    pub fn from_gbuffer(gb: &GBuffer) -> Self {
        let (w, h) = (gb.width(), gb.height());
        let n = w * h;
        let mut uv = vec![0.0; 2 * n];
        let mut mask = vec![0.0; n];
        let mut depth = vec![0.0; n];
        let mut normal = vec![0.0; 3 * n];
        let span = gb.far - gb.near;
        for y in 0..h {
            for x in 0..w {
                if !gb.covered(x, y) {
                    continue;
                }
                let p = y * w + x;
                mask[p] = 1.0;
                uv[p] = gb.uv.get(x, y, 0);
                uv[n + p] = gb.uv.get(x, y, 1);
                depth[p] = ((gb.depth.get(x, y, 0) - gb.near) / span).clamp(0.0, 1.0);
                let nv = gb.decoded_normal(x, y);
                for c in 0..3 {
                    normal[c * n + p] = nv[c];
                }
            }
        }
        let t = |c: usize, d: Vec<f64>| Tensor::new(&[c, h, w], d).expect("consistent dims");
        ViewMaps {
            uv: t(2, uv),
            mask: t(1, mask),
            depth: t(1, depth),
            normal: t(3, normal),
        }
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    /// The mask repeated over `channels`.
    pub fn mask_channels(&self, channels: usize) -> Tensor {
        let m = self.mask.data();
        let mut d = Vec::with_capacity(channels * m.len());
        for _ in 0..channels {
            d.extend_from_slice(m);
        }
        Tensor::new(&[channels, self.height(), self.width()], d).expect("consistent dims")
    }
}

/// Mipmap-like pyramid of learnable textures; level `l` is `[C, R / 2^l, R / 2^l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralTexture {
    pub levels: Vec<ParamId>,
    pub channels: usize,
    pub resolution: usize,
}

impl NeuralTexture {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        resolution: usize,
        levels: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if levels == 0 || channels == 0 || resolution == 0 || resolution % (1 << (levels - 1)) != 0 {
            return Err(DiffError::InvalidArgument(format!(
                "texture of resolution {resolution} cannot hold {levels} levels"
            )));
        }
        let ids = (0..levels)
            .map(|l| {
                let r = resolution >> l;
                store.add(format!("{name}.level{l}"), Tensor::randn(&[channels, r, r], init_std, rng))
            })
            .collect();
        Ok(NeuralTexture {
            levels: ids,
            channels,
            resolution,
        })
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> Vec<Var> {
        self.levels.iter().map(|&id| g.param(store, id)).collect()
    }
}

/// Sum of bilinear lookups into every level at the same uv coordinates.
pub fn sample_hierarchical(g: &mut Graph, levels: &[Var], uv: Var, mask: Var) -> Result<Var, DiffError> {
    let (first, rest) = levels
        .split_first()
        .ok_or_else(|| DiffError::InvalidArgument("texture without levels".into()))?;
    let mut acc = g.bilinear_sample(*first, uv, mask)?;
    for &lvl in rest {
        let s = g.bilinear_sample(lvl, uv, mask)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// 3x3 convolution parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        ConvLayer {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let k = store.value(self.weight).shape()[2];
        g.conv2d(x, w, b, Conv2dSpec::same(k))
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

/// One 3x3 convolution per pyramid level, mapping a `k`-channel map to `C` features.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidEncoder {
    pub levels: Vec<ConvLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PyramidEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        levels: usize,
        rng: &mut R,
    ) -> Self {
        PyramidEncoder {
            levels: (0..levels)
                .map(|l| ConvLayer::new(store, &format!("{name}.level{l}"), in_channels, out_channels, 3, rng))
                .collect(),
            in_channels,
            out_channels,
        }
    }
}

/// Screen-space feature pyramid: average-pool the map `L - 1` times, convolve
/// each level, upsample back to full resolution and sum. Uncovered pixels are zero.
pub fn encode_pyramid(
    g: &mut Graph,
    store: &ParamStore,
    map: Var,
    enc: &PyramidEncoder,
    mask: &Tensor,
) -> Result<Var, DiffError> {
    let mut level_in = map;
    let mut total: Option<Var> = None;
    for (l, conv) in enc.levels.iter().enumerate() {
        if l > 0 {
            level_in = g.avg_down2(level_in)?;
        }
        let mut f = conv.apply(g, store, level_in)?;
        for _ in 0..l {
            f = g.bilinear_up2(f)?;
        }
        total = Some(match total {
            None => f,
            Some(t) => g.add(t, f)?,
        });
    }
    let total = total.ok_or_else(|| DiffError::InvalidArgument("encoder without levels".into()))?;
    let m = masked(mask, enc.out_channels)?;
    let m = g.constant(m);
    g.mul(total, m)
}

fn masked(mask: &Tensor, channels: usize) -> Result<Tensor, DiffError> {
    let (_, h, w) = mask.chw()?;
    let mut d = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        d.extend_from_slice(mask.data());
    }
    Tensor::new(&[channels, h, w], d)
}

/// Two 3x3 convolutions, `3C -> C -> C`, relu in between.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorNet {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub channels: usize,
}

impl AggregatorNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        AggregatorNet {
            conv1: ConvLayer::new(store, &format!("{name}.conv1"), 3 * channels, channels, 3, rng),
            conv2: ConvLayer::new(store, &format!("{name}.conv2"), channels, channels, 3, rng),
            channels,
        }
    }
}

/// Fuses the per-modality textures into the spatial neural texture.
pub fn aggregate(
    g: &mut Graph,
    store: &ParamStore,
    tex_d: Var,
    tex_n: Var,
    tex_u: Var,
    net: &AggregatorNet,
) -> Result<Var, DiffError> {
    let s = g.shape(tex_u).to_vec();
    for v in [tex_d, tex_n] {
        if g.shape(v) != s.as_slice() {
            return Err(DiffError::ShapeMismatch {
                op: "aggregate",
                expected: s,
                got: g.shape(v).to_vec(),
            });
        }
    }
    let x = g.concat(&[tex_d, tex_n, tex_u])?;
    let h = net.conv1.apply(g, store, x)?;
    let h = g.relu(h)?;
    net.conv2.apply(g, store, h)
}

/// Early-fusion input `(u, v, mask, d, d, d, nx, ny, nz)`; zero where uncovered.
pub fn vanilla_fuse(maps: &ViewMaps) -> Tensor {
    let (h, w) = (maps.height(), maps.width());
    let n = h * w;
    let mut d = Vec::with_capacity(9 * n);
    d.extend_from_slice(maps.uv.data());
    d.extend_from_slice(maps.mask.data());
    for _ in 0..3 {
        d.extend_from_slice(maps.depth.data());
    }
    d.extend_from_slice(maps.normal.data());
    // uv is already zero off the mask, depth and normal likewise
    Tensor::new(&[9, h, w], d).expect("consistent dims")
}

/// Which modalities reach the renderer and how they are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorMode {
    /// Per-modality textures fused by the aggregator network.
    Proposed,
    /// Neural texture plus a feature pyramid over the 9-channel early fusion, no aggregator.
    Vanilla9,
    /// Neural texture only, no aggregator.
    #[serde(alias = "no_aggregator")]
    UvOnly,
    /// Aggregator over uv and depth; the normal slot is zero.
    #[serde(alias = "uv+depth")]
    UvDepth,
    /// Aggregator over uv and normal; the depth slot is zero.
    #[serde(alias = "uv+normal")]
    UvNormal,
}

impl AggregatorMode {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorMode::Proposed => "proposed",
            AggregatorMode::Vanilla9 => "vanilla9",
            AggregatorMode::UvOnly => "uv_only",
            AggregatorMode::UvDepth => "uv_depth",
            AggregatorMode::UvNormal => "uv_normal",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_pixels_sample_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let tex = NeuralTexture::new(&mut store, "t", 4, 8, 3, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let lv = tex.vars(&mut g, &store);
        let uv = g.constant(Tensor::uniform(&[2, 4, 4], 0.0, 1.0, &mut rng));
        let mut m = Tensor::full(&[1, 4, 4], 1.0);
        m.data_mut()[5] = 0.0;
        let mask = g.constant(m);
        let out = sample_hierarchical(&mut g, &lv, uv, mask).unwrap();
        for c in 0..4 {
            assert_eq!(g.value(out).data()[c * 16 + 5], 0.0);
        }
    }

    #[test]
    fn bad_pyramid_depth_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(NeuralTexture::new(&mut store, "t", 4, 12, 4, 0.01, &mut rng).is_err());
    }

    #[test]
    fn mode_aliases_parse() {
        let m: AggregatorMode = serde_json::from_str("\"uv+depth\"").unwrap();
        assert_eq!(m, AggregatorMode::UvDepth);
        let m: AggregatorMode = serde_json::from_str("\"no_aggregator\"").unwrap();
        assert_eq!(m, AggregatorMode::UvOnly);
    }
}
