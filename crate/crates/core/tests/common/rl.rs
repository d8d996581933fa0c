//! Reference problems for the selector: a tabular MDP and a scripted environment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dnrselect::diff::{DiffError, Graph, Tensor};
use dnrselect::scene::Vec3;
use dnrselect::select::{rl_loss, td_target, QConfig, QEstimator, QFunction, QTable, SelectionEnv, Transition};

pub const GAMMA: f64 = 0.9;
pub const STATES: usize = 3;
pub const ACTIONS: usize = 2;

/// Deterministic 3-state MDP: `(next, reward, terminal)` for every (state, action).
pub fn mdp(s: usize, a: usize) -> (usize, f64, bool) {
    match (s, a) {
        (0, 0) => (1, 0.0, false),
        (0, 1) => (2, 1.0, false),
        (1, 0) => (2, 2.0, false),
        (1, 1) => (0, 0.0, false),
        (2, 0) => (2, 0.5, true),
        (2, 1) => (0, -1.0, false),
        _ => unreachable!(),
    }
}

/// Value iteration to machine precision.
pub fn value_iteration() -> [[f64; ACTIONS]; STATES] {
    let mut q = [[0.0; ACTIONS]; STATES];
    for _ in 0..2000 {
        let mut next = q;
        for (s, row) in next.iter_mut().enumerate() {
            for (a, v) in row.iter_mut().enumerate() {
                let (n, r, term) = mdp(s, a);
                *v = if term { r } else { r + GAMMA * q[n].iter().cloned().fold(f64::MIN, f64::max) };
            }
        }
        q = next;
    }
    q
}

/// Tabular Q-learning through `rl_loss` / `td_target` with plain gradient
/// steps, cycling over all (state, action) pairs. Returns the largest
/// deviation from the value-iteration fixed point.
pub fn tabular_error(updates: usize, step: f64) -> Result<f64, DiffError> {
    let mut q = QTable::new(STATES, ACTIONS);
    for k in 0..updates {
        let (s, a) = ((k / ACTIONS) % STATES, k % ACTIONS);
        let (next, reward, terminal) = mdp(s, a);
        let tr = Transition {
            state: s,
            action: a,
            reward,
            next,
            terminal,
        };
        let target = q.clone();
        let mut g = Graph::new();
        let l = rl_loss(&mut g, &q, &target, std::slice::from_ref(&tr), GAMMA)?;
        g.backward(l, &mut q.store)?;
        // d(Q - y)^2 / dQ = 2 (Q - y): a step of `step / 2` is the classic update
        let id = q.table;
        let grad = q.store.grad(id).to_vec();
        for (v, gr) in q.store.value_mut(id).data_mut().iter_mut().zip(&grad) {
            *v -= 0.5 * step * gr;
        }
        q.store.zero_grad();
    }
    let vi = value_iteration();
    let mut worst: f64 = 0.0;
    for (s, row) in vi.iter().enumerate() {
        for (a, v) in row.iter().enumerate() {
            worst = worst.max((q.get(s, a) - v).abs());
        }
    }
    Ok(worst)
}

/// Terminal transitions ignore the successor.
pub fn terminal_branch_ok() -> Result<bool, DiffError> {
    let mut q = QTable::new(STATES, ACTIONS);
    q.store.value_mut(q.table).data_mut().iter_mut().for_each(|v| *v = 7.0);
    let mut tr = Transition {
        state: 2,
        action: 0,
        reward: 0.5,
        next: 1,
        terminal: true,
    };
    let terminal = td_target(&tr, GAMMA, &q)?;
    tr.terminal = false;
    let open = td_target(&tr, GAMMA, &q)?;
    Ok(terminal == 0.5 && (open - (0.5 + GAMMA * 7.0)).abs() < 1e-12)
}

/// Scripted environment: reward is the number of selected views, observations are fixed noise.
pub struct ScriptedEnv {
    pub views: usize,
    pub channels: usize,
    pub size: usize,
    pub steps: usize,
}

impl SelectionEnv for ScriptedEnv {
    fn num_views(&self) -> usize {
        self.views
    }

    fn step(&mut self, selected: &[usize]) -> Result<f64, DiffError> {
        self.steps += 1;
        Ok(selected.len() as f64 * 0.1)
    }

    fn observe(&self, latest: Option<usize>) -> Result<Tensor, DiffError> {
        let seed = latest.map_or(0, |v| v as u64 + 1);
        Ok(Tensor::randn(&[self.channels, self.size, self.size], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
    }
}

pub fn ring_eyes(n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            Vec3::new(3.0 * a.cos(), 1.0, 3.0 * a.sin())
        })
        .collect()
}

pub fn small_q(n: usize, channels: usize, seed: u64) -> QFunction {
    let cfg = QConfig {
        embed: 8,
        hidden: 16,
        gamma: GAMMA,
        obs_size: 4,
    };
    QFunction::new(&cfg, &ring_eyes(n), channels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// `rl_loss` over an episode equals the hand-summed squared TD errors of its
/// transitions, and there are exactly `m - 1` of them.
pub fn episode_loss_covers(m: usize, seed: u64) -> Result<(usize, f64), DiffError> {
    let n = 8;
    let q = small_q(n, 4, seed);
    let target = small_q(n, 4, seed + 100);
    let mut env = ScriptedEnv {
        views: n,
        channels: 4,
        size: 4,
        steps: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = dnrselect::select::run_episode(&mut env, &q, m, 0.5, &mut rng)?;
    let mut g = Graph::new();
    let l = rl_loss(&mut g, &q, &target, &ep.transitions, GAMMA)?;
    let mut manual = 0.0;
    for tr in &ep.transitions {
        let y = td_target(tr, GAMMA, &target)?;
        manual += (q.q(&tr.state, tr.action)? - y).powi(2);
    }
    Ok((ep.transitions.len(), (g.value(l).item() - manual).abs()))
}
