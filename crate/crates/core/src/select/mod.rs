//! Q-learning view selector: state encoding, the Q network and a tabular
//! stand-in, epsilon-greedy choice, TD targets, the summed squared TD loss,
//! episode rollout and the random / farthest-point baselines.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::loss::mse;
use crate::render::{sh_basis, DnrModel, ViewInput};
use crate::scene::Vec3;
use crate::texture::ConvLayer;

/// Selected views so far plus a snapshot of the spatial neural texture.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorState {
    pub selected: Vec<usize>,
    /// Pooled spatial texture `[C, s, s]` of the latest selected view; zeros before the first.
    pub observation: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<S> {
    pub state: S,
    pub action: usize,
    pub reward: f64,
    pub next: S,
    pub terminal: bool,
}

/// Anything that scores (state, action) pairs with a differentiable value.
pub trait QEstimator<S> {
    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    /// Actions still available in `s`, ascending.
    fn available(&self, s: &S) -> Vec<usize>;

    /// Scalar `[1]` value node for `(s, a)`.
    fn q_var(&self, g: &mut Graph, s: &S, a: usize) -> Result<Var, DiffError>;

    fn q(&self, s: &S, a: usize) -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let v = self.q_var(&mut g, s, a)?;
        Ok(g.value(v).item())
    }
}

/// Positive affine transform `a * Q + b` of another estimator.
pub struct AffineQ<'a, Q> {
    pub inner: &'a Q,
    pub scale: f64,
    pub shift: f64,
}

impl<S, Q: QEstimator<S>> QEstimator<S> for AffineQ<'_, Q> {
    fn store(&self) -> &ParamStore {
        self.inner.store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        unreachable!("affine wrapper is read-only")
    }

    fn available(&self, s: &S) -> Vec<usize> {
        self.inner.available(s)
    }

    fn q_var(&self, g: &mut Graph, s: &S, a: usize) -> Result<Var, DiffError> {
        let v = self.inner.q_var(g, s, a)?;
        let v = g.scale(v, self.scale)?;
        g.offset(v, self.shift)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    /// Fraction of all episodes over which epsilon decays linearly.
    pub decay_fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            decay_fraction: 0.8,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<(), DiffError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.start) && unit(self.end) && self.start >= self.end && self.decay_fraction > 0.0) {
            return Err(DiffError::InvalidArgument(format!("bad epsilon schedule {self:?}")));
        }
        Ok(())
    }

    pub fn at(&self, episode: usize, episodes: usize) -> f64 {
        let horizon = (self.decay_fraction * episodes as f64).max(1.0);
        let t = episode as f64 / horizon;
        if t >= 1.0 {
            self.end
        } else {
            self.start + (self.end - self.start) * t
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub embed: usize,
    pub hidden: usize,
    pub gamma: f64,
    /// Side of the pooled observation grid.
    pub obs_size: usize,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            embed: 16,
            hidden: 32,
            gamma: 0.9,
            obs_size: 16,
        }
    }
}

/// Camera embeddings, a small convolutional observation encoder and a
/// two-layer value head over `[mean selected embedding, observation, action embedding]`.
#[derive(Clone, Debug)]
pub struct QFunction {
    pub store: ParamStore,
    pub embedding: ParamId,
    pub obs1: ConvLayer,
    pub obs2: ConvLayer,
    pub head1: (ParamId, ParamId),
    pub head2: (ParamId, ParamId),
    pub views: usize,
    pub config: QConfig,
}

impl QFunction {
    /// Embedding rows start from the SH basis of each camera's viewing
    /// direction, scaled down, followed by small noise.
    pub fn new<R: Rng + ?Sized>(
        cfg: &QConfig,
        eyes: &[Vec3],
        obs_channels: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let (n, e, h) = (eyes.len(), cfg.embed, cfg.hidden);
        if n < 2 || e == 0 || h == 0 || cfg.obs_size == 0 || cfg.obs_size % 2 != 0 {
            return Err(DiffError::InvalidArgument(format!("bad selector config {cfg:?} for {n} views")));
        }
        let mut emb = Tensor::randn(&[n, e], 0.01, rng);
        for (i, eye) in eyes.iter().enumerate() {
            let dir = eye.try_normalize(1e-12).unwrap_or(Vec3::z());
            let b = sh_basis(&dir)?;
            for (k, v) in b.0.iter().skip(1).take(e).enumerate() {
                emb.data_mut()[i * e + k] += 0.5 * v;
            }
        }
        let mut store = ParamStore::new();
        let embedding = store.add("q.embedding", emb);
        let obs1 = ConvLayer::new(&mut store, "q.obs1", obs_channels, e, 3, rng);
        let obs2 = ConvLayer::new(&mut store, "q.obs2", e, e, 3, rng);
        let lin = |store: &mut ParamStore, name: &str, o: usize, i: usize, rng: &mut R| {
            let w = store.add(format!("{name}.weight"), Tensor::randn(&[o, i], (1.0 / i as f64).sqrt(), rng));
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[o]));
            (w, b)
        };
        let head1 = lin(&mut store, "q.head1", h, 3 * e, rng);
        let head2 = lin(&mut store, "q.head2", 1, h, rng);
        Ok(QFunction {
            store,
            embedding,
            obs1,
            obs2,
            head1,
            head2,
            views: n,
            config: cfg.clone(),
        })
    }

    pub fn empty_state(&self, obs_channels: usize) -> SelectorState {
        let s = self.config.obs_size;
        SelectorState {
            selected: Vec::new(),
            observation: Tensor::zeros(&[obs_channels, s, s]),
        }
    }
}

/// `[mean of selected embedding rows, encoded observation]`, length `2E`.
pub fn encode_state(g: &mut Graph, q: &QFunction, state: &SelectorState) -> Result<Var, DiffError> {
    let table = g.param(&q.store, q.embedding);
    let cam = g.gather_mean(table, &state.selected)?;
    let obs = g.constant(state.observation.clone());
    let h = q.obs1.apply(g, &q.store, obs)?;
    let h = g.relu(h)?;
    let h = g.avg_down2(h)?;
    let h = q.obs2.apply(g, &q.store, h)?;
    let h = g.relu(h)?;
    let o = g.mean_spatial(h)?;
    g.concat(&[cam, o])
}

impl QEstimator<SelectorState> for QFunction {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn available(&self, s: &SelectorState) -> Vec<usize> {
        (0..self.views).filter(|v| !s.selected.contains(v)).collect()
    }

    fn q_var(&self, g: &mut Graph, s: &SelectorState, a: usize) -> Result<Var, DiffError> {
        if a >= self.views || s.selected.contains(&a) {
            return Err(DiffError::InvalidArgument(format!("action {a} is not available")));
        }
        let feat = encode_state(g, self, s)?;
        let table = g.param(&self.store, self.embedding);
        let act = g.gather_mean(table, &[a])?;
        let x = g.concat(&[feat, act])?;
        let (w1, b1) = (g.param(&self.store, self.head1.0), g.param(&self.store, self.head1.1));
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h)?;
        let (w2, b2) = (g.param(&self.store, self.head2.0), g.param(&self.store, self.head2.1));
        g.linear(h, w2, b2)
    }
}

pub fn q_value(q: &QFunction, state: &SelectorState, action: usize) -> Result<f64, DiffError> {
    q.q(state, action)
}

/// Lookup-table Q over `states x actions`; states are plain indices and every
/// action is always available.
#[derive(Clone, Debug)]
pub struct QTable {
    pub store: ParamStore,
    pub table: ParamId,
    pub states: usize,
    pub actions: usize,
}

impl QTable {
    pub fn new(states: usize, actions: usize) -> Self {
        let mut store = ParamStore::new();
        let table = store.add("q.table", Tensor::zeros(&[states * actions, 1]));
        QTable {
            store,
            table,
            states,
            actions,
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.store.value(self.table).data()[s * self.actions + a]
    }
}

impl QEstimator<usize> for QTable {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn available(&self, _s: &usize) -> Vec<usize> {
        (0..self.actions).collect()
    }

    fn q_var(&self, g: &mut Graph, s: &usize, a: usize) -> Result<Var, DiffError> {
        let t = g.param(&self.store, self.table);
        g.gather_mean(t, &[s * self.actions + a])
    }
}

/// Argmax over the available actions, lowest id on ties, with the values.
pub fn greedy<S, Q: QEstimator<S>>(q: &Q, state: &S) -> Result<Option<(usize, f64)>, DiffError> {
    let mut best: Option<(usize, f64)> = None;
    for a in q.available(state) {
        let v = q.q(state, a)?;
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((a, v));
        }
    }
    Ok(best)
}

/// Epsilon-greedy: one uniform draw decides exploration, a second picks the
/// random action.
pub fn choose_action<S, Q: QEstimator<S>, R: Rng + ?Sized>(
    q: &Q,
    state: &S,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize, DiffError> {
    let avail = q.available(state);
    if avail.is_empty() {
        return Err(DiffError::InvalidArgument("no views left to choose".into()));
    }
    if rng.random::<f64>() < epsilon {
        return Ok(avail[rng.random_range(0..avail.len())]);
    }
    Ok(greedy(q, state)?.expect("non-empty").0)
}

/// `r` for terminal transitions, otherwise `r + gamma * max_a Q_target(s', a)`.
pub fn td_target<S, Q: QEstimator<S>>(tr: &Transition<S>, gamma: f64, target: &Q) -> Result<f64, DiffError> {
    if tr.terminal {
        return Ok(tr.reward);
    }
    let best = greedy(target, &tr.next)?.map_or(0.0, |(_, v)| v);
    Ok(tr.reward + gamma * best)
}

/// Sum over transitions of `(Q(s, a) - target)^2`; targets are constants
/// computed from the frozen `target` estimator.
pub fn rl_loss<S, Q: QEstimator<S>>(
    g: &mut Graph,
    q: &Q,
    target: &Q,
    transitions: &[Transition<S>],
    gamma: f64,
) -> Result<Var, DiffError> {
    if transitions.is_empty() {
        return Err(DiffError::InvalidArgument("rl_loss over no transitions".into()));
    }
    let mut total: Option<Var> = None;
    for tr in transitions {
        let y = td_target(tr, gamma, target)?;
        let pred = q.q_var(g, &tr.state, tr.action)?;
        let e = g.offset(pred, -y)?;
        let e = g.square(e)?;
        let e = g.sum(e)?;
        total = Some(match total {
            None => e,
            Some(t) => g.add(t, e)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// What the selector acts on: trains on a view subset and reports rewards.
pub trait SelectionEnv {
    fn num_views(&self) -> usize;

    /// Train on `selected` and return the reward for the newest selection.
    fn step(&mut self, selected: &[usize]) -> Result<f64, DiffError>;

    /// Observation for a state whose latest selection is `latest`.
    fn observe(&self, latest: Option<usize>) -> Result<Tensor, DiffError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub selected: Vec<usize>,
    pub transitions: Vec<Transition<SelectorState>>,
    pub rewards: Vec<f64>,
    /// Greedy value estimate at each decision.
    pub q_max: Vec<f64>,
}

/// Random first view, then `m - 1` epsilon-greedy selections with training
/// and a reward after every selection.
pub fn run_episode<E: SelectionEnv, R: Rng + ?Sized>(
    env: &mut E,
    q: &QFunction,
    m: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Episode, DiffError> {
    let n = env.num_views();
    if m == 0 || m >= n || n != q.views {
        return Err(DiffError::InvalidArgument(format!("episode of {m} views from a pool of {n}")));
    }
    let first = rng.random_range(0..n);
    let mut selected = vec![first];
    let mut rewards = vec![env.step(&selected)?];
    let mut state = SelectorState {
        selected: selected.clone(),
        observation: env.observe(Some(first))?,
    };
    let mut transitions = Vec::with_capacity(m - 1);
    let mut q_max = Vec::with_capacity(m - 1);
    while selected.len() < m {
        q_max.push(greedy(q, &state)?.map_or(f64::NAN, |(_, v)| v));
        let a = choose_action(q, &state, epsilon, rng)?;
        selected.push(a);
        let r = env.step(&selected)?;
        rewards.push(r);
        let next = SelectorState {
            selected: selected.clone(),
            observation: env.observe(Some(a))?,
        };
        transitions.push(Transition {
            state,
            action: a,
            reward: r,
            next: next.clone(),
            terminal: selected.len() == m,
        });
        state = next;
    }
    Ok(Episode {
        selected,
        transitions,
        rewards,
        q_max,
    })
}

/// Greedy rollout from a fixed first view without training in between.
pub fn greedy_rollout<E: SelectionEnv>(env: &E, q: &QFunction, m: usize, first: usize) -> Result<Vec<usize>, DiffError> {
    if m == 0 || m >= q.views || first >= q.views {
        return Err(DiffError::InvalidArgument(format!("rollout of {m} views from {}", q.views)));
    }
    let mut state = SelectorState {
        selected: vec![first],
        observation: env.observe(Some(first))?,
    };
    while state.selected.len() < m {
        let (a, _) = greedy(q, &state)?.expect("views remain");
        state.selected.push(a);
        state.observation = env.observe(Some(a))?;
    }
    Ok(state.selected)
}

/// Negative mean probe MSE of the current model.
pub fn reward(model: &DnrModel, probes: &[(ViewInput, Tensor)]) -> Result<f64, DiffError> {
    Ok(-probe_mse(model, probes)?)
}

pub fn probe_mse(model: &DnrModel, probes: &[(ViewInput, Tensor)]) -> Result<f64, DiffError> {
    if probes.is_empty() {
        return Err(DiffError::InvalidArgument("empty probe set".into()));
    }
    let mut total = 0.0;
    for (input, gt) in probes {
        total += mse(&model.render(input)?, gt);
    }
    Ok(total / probes.len() as f64)
}

pub fn baseline_random<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>, DiffError> {
    if m > n {
        return Err(DiffError::InvalidArgument(format!("cannot pick {m} of {n} views")));
    }
    Ok(sample(rng, n, m).into_vec())
}

/// Greedy farthest-point sampling on camera centres, starting from view 0.
pub fn baseline_farthest(eyes: &[Vec3], m: usize) -> Result<Vec<usize>, DiffError> {
    let n = eyes.len();
    if m > n {
        return Err(DiffError::InvalidArgument(format!("cannot pick {m} of {n} views")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![0];
    let mut dist: Vec<f64> = eyes.iter().map(|e| (e - eyes[0]).norm()).collect();
    while chosen.len() < m {
        let mut best = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, d)| dist[i] > d) {
                best = Some((i, dist[i]));
            }
        }
        let (i, _) = best.expect("views remain");
        chosen.push(i);
        for (k, d) in dist.iter_mut().enumerate() {
            *d = d.min((eyes[k] - eyes[i]).norm());
        }
    }
    Ok(chosen)
}

/// Average-pools a `[C, H, W]` texture down to `[C, size, size]`.
pub fn pool_observation(t: &Tensor, size: usize) -> Result<Tensor, DiffError> {
    let (c, h, w) = t.chw()?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(DiffError::InvalidArgument(format!("cannot pool {h}x{w} to {size}x{size}")));
    }
    let (fy, fx) = (h / size, w / size);
    let inv = 1.0 / (fy * fx) as f64;
    let src = t.data();
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * size * size + (y / fy) * size + x / fx] += src[ch * h * w + y * w + x] * inv;
            }
        }
    }
    Tensor::new(&[c, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn farthest_on_ring_picks_antipode() {
        let eyes: Vec<Vec3> = (0..4)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64;
                Vec3::new(a.sin(), 0.0, a.cos())
            })
            .collect();
        assert_eq!(baseline_farthest(&eyes, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.at(0, 100), 1.0);
        assert!((s.at(40, 100) - 0.525).abs() < 1e-12);
        assert_eq!(s.at(80, 100), 0.05);
        assert_eq!(s.at(99, 100), 0.05);
    }

    #[test]
    fn pooling_averages_blocks() {
        let t = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_observation(&t, 1).unwrap().data(), &[2.5]);
    }
}
