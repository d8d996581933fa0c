//! Spherical-harmonics view conditioning, the U-Net renderer and the full
//! deferred neural rendering model.

mod sh;

pub use sh::{apply_view_dependence, constant_sh_map, sh_basis, sh_map, view_dir_map, ShBasis, SH_FIRST_CHANNEL};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::imaging::{GBuffer, Image};
use crate::scene::Camera;
use crate::texture::{
    aggregate, encode_pyramid, sample_hierarchical, vanilla_fuse, AggregatorMode, AggregatorNet, ConvLayer,
    NeuralTexture, PyramidEncoder, ViewMaps,
};

/// U-Net weights: `D` down blocks, `D` up blocks with skips, 3-channel head.
#[derive(Clone, Debug, PartialEq)]
pub struct RendererParams {
    pub down: Vec<ConvLayer>,
    pub up: Vec<ConvLayer>,
    pub head: ConvLayer,
}

impl RendererParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(DiffError::InvalidArgument(format!("bad renderer widths {widths:?}")));
        }
        let mut down = Vec::with_capacity(widths.len());
        let mut cin = in_channels;
        for (d, &w) in widths.iter().enumerate() {
            down.push(ConvLayer::new(store, &format!("{name}.down{d}"), cin, w, 3, rng));
            cin = w;
        }
        let mut up = Vec::with_capacity(widths.len());
        for d in (0..widths.len()).rev() {
            let out = widths[d.max(1) - 1];
            up.push(ConvLayer::new(store, &format!("{name}.up{d}"), cin + widths[d], out, 3, rng));
            cin = out;
        }
        let head = ConvLayer::new(store, &format!("{name}.head"), cin, 3, 3, rng);
        Ok(RendererParams { down, up, head })
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    /// `[C, H, W]` feature image to a `[3, H, W]` image in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut cur = x;
        for conv in &self.down {
            let h = conv.apply(g, store, cur)?;
            let h = g.relu(h)?;
            skips.push(h);
            cur = g.avg_down2(h)?;
        }
        for conv in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = g.bilinear_up2(cur)?;
            let cat = g.concat(&[u, skip])?;
            let h = conv.apply(g, store, cat)?;
            cur = g.relu(h)?;
        }
        let out = self.head.apply(g, store, cur)?;
        let t = g.tanh(out)?;
        let t = g.offset(t, 1.0)?;
        g.scale(t, 0.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnrConfig {
    /// Neural texture channels `C`; at least 12 for SH conditioning.
    pub channels: usize,
    pub levels: usize,
    pub tex_resolution: usize,
    pub widths: Vec<usize>,
    pub init_std: f64,
    pub mode: AggregatorMode,
}

impl Default for DnrConfig {
    fn default() -> Self {
        DnrConfig {
            channels: 16,
            levels: 4,
            tex_resolution: 128,
            widths: vec![16, 32, 64],
            init_std: 0.01,
            mode: AggregatorMode::Proposed,
        }
    }
}

/// Everything the renderer needs about one view apart from parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewInput {
    pub maps: ViewMaps,
    /// Per-pixel world-space ray directions `[3, H, W]`.
    pub dirs: Tensor,
}

impl ViewInput {
    pub fn new(gbuffer: &GBuffer, camera: &Camera) -> Self {
        ViewInput {
            maps: ViewMaps::from_gbuffer(gbuffer),
            dirs: view_dir_map(camera),
        }
    }
}

pub struct Forward {
    /// `[3, H, W]` prediction in `[0, 1]`.
    pub image: Var,
    /// Spatial neural texture `[C, H, W]` before view conditioning.
    pub texture: Var,
}

/// Neural texture, modality encoders, aggregator and renderer in one parameter store.
#[derive(Clone, Debug)]
pub struct DnrModel {
    pub config: DnrConfig,
    pub store: ParamStore,
    pub texture: NeuralTexture,
    pub enc_depth: Option<PyramidEncoder>,
    pub enc_normal: Option<PyramidEncoder>,
    pub enc_fused: Option<PyramidEncoder>,
    pub aggregator: Option<AggregatorNet>,
    pub renderer: RendererParams,
}

impl DnrModel {
    pub fn new<R: Rng + ?Sized>(config: &DnrConfig, rng: &mut R) -> Result<Self, DiffError> {
        let c = config.channels;
        if c < SH_FIRST_CHANNEL + 9 {
            return Err(DiffError::InvalidArgument(format!("need at least 12 texture channels, got {c}")));
        }
        let mut store = ParamStore::new();
        let texture = NeuralTexture::new(
            &mut store,
            "texture",
            c,
            config.tex_resolution,
            config.levels,
            config.init_std,
            rng,
        )?;
        let l = config.levels;
        let mode = config.mode;
        let uses_depth = matches!(mode, AggregatorMode::Proposed | AggregatorMode::UvDepth);
        let uses_normal = matches!(mode, AggregatorMode::Proposed | AggregatorMode::UvNormal);
        let enc_depth = uses_depth.then(|| PyramidEncoder::new(&mut store, "enc_depth", 1, c, l, rng));
        let enc_normal = uses_normal.then(|| PyramidEncoder::new(&mut store, "enc_normal", 3, c, l, rng));
        let enc_fused =
            (mode == AggregatorMode::Vanilla9).then(|| PyramidEncoder::new(&mut store, "enc_fused", 9, c, l, rng));
        let aggregator = (uses_depth || uses_normal).then(|| AggregatorNet::new(&mut store, "aggregator", c, rng));
        let renderer = RendererParams::new(&mut store, "renderer", c, &config.widths, rng)?;
        Ok(DnrModel {
            config: config.clone(),
            store,
            texture,
            enc_depth,
            enc_normal,
            enc_fused,
            aggregator,
            renderer,
        })
    }

    /// Spatial neural texture for one view.
    pub fn spatial_texture(&self, g: &mut Graph, input: &ViewInput) -> Result<Var, DiffError> {
        let maps = &input.maps;
        let uv = g.constant(maps.uv.clone());
        let mask = g.constant(maps.mask.clone());
        let levels = self.texture.vars(g, &self.store);
        let tex_u = sample_hierarchical(g, &levels, uv, mask)?;
        let c = self.config.channels;
        let (h, w) = (maps.height(), maps.width());
        let encode = |g: &mut Graph, enc: &Option<PyramidEncoder>, map: &Tensor| -> Result<Var, DiffError> {
            match enc {
                Some(e) => {
                    let m = g.constant(map.clone());
                    encode_pyramid(g, &self.store, m, e, &maps.mask)
                }
                None => Ok(g.constant(Tensor::zeros(&[c, h, w]))),
            }
        };
        match self.config.mode {
            AggregatorMode::UvOnly => Ok(tex_u),
            AggregatorMode::Vanilla9 => {
                let fused = vanilla_fuse(maps);
                let f = encode(g, &self.enc_fused, &fused)?;
                g.add(tex_u, f)
            }
            _ => {
                let tex_d = encode(g, &self.enc_depth, &maps.depth)?;
                let tex_n = encode(g, &self.enc_normal, &maps.normal)?;
                let net = self.aggregator.as_ref().expect("aggregating modes own an aggregator");
                aggregate(g, &self.store, tex_d, tex_n, tex_u, net)
            }
        }
    }

    /// Sample or encode, aggregate, SH-modulate and run the U-Net.
    pub fn forward(&self, g: &mut Graph, input: &ViewInput) -> Result<Forward, DiffError> {
        let texture = self.spatial_texture(g, input)?;
        let sh = sh_map(&input.dirs)?;
        let conditioned = apply_view_dependence(g, texture, &sh)?;
        let image = self.renderer.forward(g, &self.store, conditioned)?;
        Ok(Forward { image, texture })
    }

    pub fn render(&self, input: &ViewInput) -> Result<Tensor, DiffError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, input)?;
        Ok(g.value(f.image).clone())
    }

    /// Parameter ids of the neural texture levels.
    pub fn texture_levels(&self) -> &[crate::diff::ParamId] {
        &self.texture.levels
    }
}

/// Renders one view to an [`Image`].
pub fn render_view(model: &DnrModel, gbuffer: &GBuffer, camera: &Camera) -> Result<Image, DiffError> {
    let t = model.render(&ViewInput::new(gbuffer, camera))?;
    Image::from_tensor(&t).map_err(|e| DiffError::InvalidArgument(e.to_string()))
}
