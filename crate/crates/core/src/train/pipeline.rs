use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{augment, Checkpoint, EpisodeRow, EvalRow, RewardMode, SelectorKind, Step1Row, Step2Row, TrainConfig, TrainError};
use crate::diff::{Adam, DiffError, Graph, Tensor};
use crate::imaging::{Dataset, ViewSample};
use crate::loss::{mse, mse_loss, psnr, ssim_metric, step2_loss, FeatureExtractor};
use crate::render::{DnrModel, ViewInput};
use crate::scene::Vec3;
use crate::select::{
    baseline_farthest, baseline_random, greedy_rollout, pool_observation, probe_mse, rl_loss, run_episode,
    QFunction, SelectionEnv,
};

// independent random streams of one run
const STREAM_MODEL: u64 = 0;
const STREAM_SELECTOR: u64 = 1;
const STREAM_EPISODES: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_FINE: u64 = 4;
const STREAM_BASELINE: u64 = 5;

pub fn new_run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One view with renderer inputs and both ground truths as `[3, H, W]`.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub label: String,
    pub eye: Vec3,
    pub input: ViewInput,
    pub rasterized: Tensor,
    pub ray_traced: Tensor,
}

impl TrainView {
    pub fn from_sample(s: &ViewSample) -> Result<Self, TrainError> {
        let gb = &s.gbuffer;
        let (w, h) = (gb.width(), gb.height());
        for (name, img) in [("rasterized", &s.rasterized), ("ray-traced", &s.ray_traced)] {
            if img.width() != w || img.height() != h || img.channels() != 3 {
                return Err(TrainError::Data(format!(
                    "view {}: {name} image is {}x{}x{}, expected {w}x{h}x3",
                    s.label,
                    img.width(),
                    img.height(),
                    img.channels()
                )));
            }
        }
        if gb.coverage() == 0 {
            return Err(TrainError::Data(format!("view {} does not see the object", s.label)));
        }
        Ok(TrainView {
            label: s.label.clone(),
            eye: s.camera.eye(),
            input: ViewInput::new(gb, &s.camera),
            rasterized: s.rasterized.to_tensor(),
            ray_traced: s.ray_traced.to_tensor(),
        })
    }
}

/// Candidate pool (the train split), probe views for the reward and held-out test views.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub pool: Vec<TrainView>,
    pub probe: Vec<TrainView>,
    pub test: Vec<TrainView>,
    probe_pairs: Vec<(ViewInput, Tensor)>,
}

impl TrainData {
    pub fn new(pool: Vec<TrainView>, probe: Vec<TrainView>, test: Vec<TrainView>) -> Result<Self, TrainError> {
        if pool.len() < 2 || probe.is_empty() {
            return Err(TrainError::Data(format!(
                "need at least 2 candidate views and 1 probe view, got {} and {}",
                pool.len(),
                probe.len()
            )));
        }
        let size = |v: &TrainView| (v.input.maps.height(), v.input.maps.width());
        let first = size(&pool[0]);
        if let Some(v) = pool.iter().chain(&probe).chain(&test).find(|v| size(v) != first) {
            return Err(TrainError::Data(format!("view {} has a different resolution", v.label)));
        }
        let probe_pairs = probe.iter().map(|v| (v.input.clone(), v.rasterized.clone())).collect();
        Ok(TrainData {
            pool,
            probe,
            test,
            probe_pairs,
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self, TrainError> {
        let conv = |s: &[ViewSample]| s.iter().map(TrainView::from_sample).collect::<Result<Vec<_>, _>>();
        Self::new(conv(&ds.train)?, conv(&ds.probe)?, conv(&ds.test)?)
    }

    pub fn eyes(&self) -> Vec<Vec3> {
        self.pool.iter().map(|v| v.eye).collect()
    }

    /// Probe inputs with their rasterized ground truth.
    pub fn probes(&self) -> &[(ViewInput, Tensor)] {
        &self.probe_pairs
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.pool[0].input.maps.height(), self.pool[0].input.maps.width())
    }
}

/// One gradient step of the coarse objective on a single view; returns the MSE.
fn coarse_step(
    model: &mut DnrModel,
    adam: &mut Adam,
    view: &TrainView,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DiffError> {
    let aug;
    let (input, gt) = if cfg.augment {
        let (i, g, _) = augment(&view.input, &view.rasterized, rng);
        aug = (i, g);
        (&aug.0, &aug.1)
    } else {
        (&view.input, &view.rasterized)
    };
    let mut g = Graph::new();
    let f = model.forward(&mut g, input)?;
    let gt = g.constant(gt.clone());
    let l = mse_loss(&mut g, f.image, gt)?;
    let value = g.value(l).item();
    let weighted = g.scale(l, cfg.weights.dnr_c)?;
    g.backward(weighted, &mut model.store)?;
    adam.step(&mut model.store, cfg.lr_step1)?;
    Ok(value)
}

/// Coarse DNR training environment seen by the selector: every step runs
/// `inner_iters` updates cycling over the selected views, then scores the probes.
pub struct CoarseEnv<'a> {
    pub model: DnrModel,
    pub adam: Adam,
    data: &'a TrainData,
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
    /// Coarse losses since the last [`CoarseEnv::take_losses`].
    losses: Vec<f64>,
    pub iters: u64,
    last_psnr: f64,
}

impl<'a> CoarseEnv<'a> {
    pub fn new(model: DnrModel, data: &'a TrainData, cfg: &'a TrainConfig, rng: ChaCha8Rng) -> Self {
        let adam = Adam::for_store(&model.store);
        CoarseEnv {
            model,
            adam,
            data,
            cfg,
            rng,
            losses: Vec::new(),
            iters: 0,
            last_psnr: f64::NAN,
        }
    }

    pub fn take_losses(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.losses)
    }

    fn probe_psnr(&self) -> Result<f64, DiffError> {
        let m = probe_mse(&self.model, self.data.probes())?;
        Ok(10.0 * (1.0 / m.max(1e-20)).log10())
    }
}

impl SelectionEnv for CoarseEnv<'_> {
    fn num_views(&self) -> usize {
        self.data.pool.len()
    }

    fn step(&mut self, selected: &[usize]) -> Result<f64, DiffError> {
        if selected.is_empty() {
            return Err(DiffError::InvalidArgument("step without a selected view".into()));
        }
        if selected.len() == 1 && self.cfg.reward == RewardMode::NegPsnrGain {
            self.last_psnr = self.probe_psnr()?;
        }
        for k in 0..self.cfg.inner_iters {
            let view = &self.data.pool[selected[k % selected.len()]];
            let l = coarse_step(&mut self.model, &mut self.adam, view, self.cfg, &mut self.rng)?;
            self.losses.push(l);
            self.iters += 1;
        }
        match self.cfg.reward {
            RewardMode::NegLoss => Ok(-probe_mse(&self.model, self.data.probes())?),
            RewardMode::NegPsnrGain => {
                let p = self.probe_psnr()?;
                let r = (p - self.last_psnr) / 10.0;
                self.last_psnr = p;
                Ok(r)
            }
        }
    }

    fn observe(&self, latest: Option<usize>) -> Result<Tensor, DiffError> {
        let s = self.cfg.q.obs_size;
        let Some(v) = latest else {
            return Ok(Tensor::zeros(&[self.cfg.model.channels, s, s]));
        };
        let mut g = Graph::new();
        let t = self.model.spatial_texture(&mut g, &self.data.pool[v].input)?;
        pool_observation(g.value(t), s)
    }
}

#[derive(Clone, Debug)]
pub struct Step1Result {
    pub model: DnrModel,
    pub adam_model: Adam,
    /// Trained selector; `None` for the baseline selectors.
    pub selector: Option<QFunction>,
    pub adam_selector: Option<Adam>,
    pub selected: Vec<usize>,
    pub rows: Vec<Step1Row>,
    pub episodes: Vec<EpisodeRow>,
    pub iters: u64,
}

impl Step1Result {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            model: self.model.clone(),
            selector: self.selector.clone(),
            adam_model: Some(self.adam_model.clone()),
            adam_selector: self.adam_selector.clone(),
            selected: self.selected.clone(),
            counters: [self.rows.len() as u64, 0, self.iters],
        }
    }
}

/// Coarse stage: one selector episode per epoch with inner DNR training, selector
/// updates after each episode, then the final selection of `m` views.
pub fn step1_train(data: &TrainData, cfg: &TrainConfig) -> Result<Step1Result, TrainError> {
    cfg.validate()?;
    let n = data.pool.len();
    if cfg.m >= n {
        return Err(TrainError::Config(format!("m = {} must be below the pool size {n}", cfg.m)));
    }
    let (h, w) = data.resolution();
    let s = cfg.q.obs_size;
    if h % s != 0 || w % s != 0 {
        return Err(TrainError::Config(format!("q.obs_size {s} does not divide the {h}x{w} views")));
    }
    let rl = cfg.selector == SelectorKind::Rl;
    let model = DnrModel::new(&cfg.model, &mut new_run_rng(cfg.seed, STREAM_MODEL))?;
    let initial = cfg.reset_per_episode.then(|| model.clone());
    let eyes = data.eyes();
    let mut q = QFunction::new(&cfg.q, &eyes, cfg.model.channels, &mut new_run_rng(cfg.seed, STREAM_SELECTOR))?;
    let mut target = q.clone();
    let mut adam_q = Adam::for_store(&q.store);
    let mut env = CoarseEnv::new(model, data, cfg, new_run_rng(cfg.seed, STREAM_AUGMENT));
    let mut ep_rng = new_run_rng(cfg.seed, STREAM_EPISODES);
    let mut rows = Vec::with_capacity(cfg.epochs_step1);
    let mut episodes = Vec::with_capacity(cfg.epochs_step1 * cfg.m);

    for ep in 0..cfg.epochs_step1 {
        if let (Some(init), true) = (&initial, ep > 0) {
            env.model = init.clone();
            env.adam = Adam::for_store(&env.model.store);
        }
        let epsilon = if rl { cfg.epsilon.at(ep, cfg.epochs_step1) } else { 1.0 };
        let episode = run_episode(&mut env, &q, cfg.m, epsilon, &mut ep_rng)?;
        let losses = env.take_losses();

        let mut rl_losses = Vec::new();
        if rl && !episode.transitions.is_empty() {
            for _ in 0..cfg.rl_updates {
                let mut g = Graph::new();
                let l = rl_loss(&mut g, &q, &target, &episode.transitions, cfg.q.gamma)?;
                rl_losses.push(g.value(l).item());
                let weighted = g.scale(l, cfg.weights.rl)?;
                g.backward(weighted, &mut q.store)?;
                adam_q.step(&mut q.store, cfg.lr_rl)?;
            }
        }
        if (ep + 1) % cfg.target_refresh == 0 {
            target = q.clone();
        }
        for (step, (&action, &reward)) in episode.selected.iter().zip(&episode.rewards).enumerate() {
            episodes.push(EpisodeRow {
                episode: ep,
                step,
                action,
                reward,
                epsilon,
                q_max: step.checked_sub(1).map(|k| episode.q_max[k]),
            });
        }
        rows.push(Step1Row {
            epoch: ep,
            dnr_c: losses.iter().sum::<f64>() / losses.len() as f64,
            rl: (!rl_losses.is_empty()).then(|| rl_losses.iter().sum::<f64>() / rl_losses.len() as f64),
            reward_sum: episode.rewards.iter().sum(),
            epsilon,
            selected: episode.selected,
        });
    }

    let selected = match cfg.selector {
        SelectorKind::Rl => {
            let first = ep_rng.random_range(0..n);
            greedy_rollout(&env, &q, cfg.m, first)?
        }
        SelectorKind::Random => baseline_random(n, cfg.m, &mut new_run_rng(cfg.seed, STREAM_BASELINE))?,
        SelectorKind::Farthest => baseline_farthest(&eyes, cfg.m)?,
    };
    Ok(Step1Result {
        iters: env.iters,
        model: env.model,
        adam_model: env.adam,
        selector: rl.then_some(q),
        adam_selector: rl.then_some(adam_q),
        selected,
        rows,
        episodes,
    })
}

/// Fine stage on the ray-traced images of the checkpoint's selected views,
/// with a fresh optimizer at `lr_step2`. The selector is carried over untouched.
pub fn step2_finetune(
    coarse: &Checkpoint,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<Step2Row>), TrainError> {
    if coarse.selected.is_empty() {
        return Err(TrainError::Data("no selected views to fine-tune on".into()));
    }
    if let Some(&v) = coarse.selected.iter().find(|&&v| v >= data.pool.len()) {
        return Err(TrainError::Data(format!("selected view {v} has no ray-traced image")));
    }
    if cfg.epochs_step2 == 0 {
        return Ok((coarse.clone(), Vec::new()));
    }
    let mut model = coarse.model.clone();
    let mut adam = Adam::for_store(&model.store);
    let fx = FeatureExtractor::new(cfg.perceptual_seed);
    let lambdas = cfg.weights.step2();
    let mut rng = new_run_rng(cfg.seed, STREAM_FINE);
    let mut rows = Vec::with_capacity(cfg.epochs_step2);
    let mut order = coarse.selected.clone();
    let mut iters = 0u64;

    for epoch in 0..cfg.epochs_step2 {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        let mut total = 0.0;
        for &v in &order {
            let view = &data.pool[v];
            let (input, gt) = if cfg.augment {
                let (i, g, _) = augment(&view.input, &view.ray_traced, &mut rng);
                (i, g)
            } else {
                (view.input.clone(), view.ray_traced.clone())
            };
            let mut g = Graph::new();
            let f = model.forward(&mut g, &input)?;
            let gt = g.constant(gt);
            let levels = model.texture.vars(&mut g, &model.store);
            let l = step2_loss(&mut g, f.image, gt, &levels, &cfg.weights, &fx)?;
            total += g.value(l.total).item();
            for (k, (&t, lambda)) in l.terms.iter().zip(lambdas).enumerate() {
                sums[k] += lambda * g.value(t).item();
            }
            g.backward(l.total, &mut model.store)?;
            adam.step(&mut model.store, cfg.lr_step2)?;
            iters += 1;
        }
        let k = order.len() as f64;
        rows.push(Step2Row {
            epoch,
            total: total / k,
            terms: sums.map(|s| s / k),
        });
    }
    let [c1, c2, c3] = coarse.counters;
    Ok((
        Checkpoint {
            config: cfg.clone(),
            model,
            selector: coarse.selector.clone(),
            adam_model: Some(adam),
            adam_selector: coarse.adam_selector.clone(),
            selected: coarse.selected.clone(),
            counters: [c1, c2 + cfg.epochs_step2 as u64, c3 + iters],
        },
        rows,
    ))
}

/// PSNR and SSIM of `render` against each view's ray-traced image.
pub fn evaluate_with<F>(views: &[TrainView], render: F) -> Result<Vec<EvalRow>, TrainError>
where
    F: Fn(&TrainView) -> Result<Tensor, DiffError>,
{
    views
        .iter()
        .map(|v| {
            let pred = render(v)?;
            Ok(EvalRow {
                view: v.label.clone(),
                psnr: psnr(&pred, &v.ray_traced),
                ssim: ssim_metric(&pred, &v.ray_traced)?,
            })
        })
        .collect()
}

pub fn evaluate(model: &DnrModel, views: &[TrainView]) -> Result<Vec<EvalRow>, TrainError> {
    evaluate_with(views, |v| model.render(&v.input))
}

/// Mean squared error of the model on one view's ray-traced image.
pub fn view_mse(model: &DnrModel, view: &TrainView) -> Result<f64, TrainError> {
    Ok(mse(&model.render(&view.input)?, &view.ray_traced))
}
