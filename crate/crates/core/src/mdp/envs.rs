//! Environment builders: gridworld, chain, the overestimation construction and the
//! zeroing example.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::Mdp;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

    fn apply(self, row: usize, col: usize, n: usize) -> (usize, usize) {
        match self {
            GridAction::Up => (row.saturating_sub(1), col),
            GridAction::Down => ((row + 1).min(n - 1), col),
            GridAction::Left => (row, col.saturating_sub(1)),
            GridAction::Right => (row, (col + 1).min(n - 1)),
        }
    }
}

/// `n x n` grid with four moves, goal at the far corner, reward 1 on entering the goal.
///
/// State index is `row * n + col`; the start is `(0, 0)` or uniform over non-goal cells.
/// Moves into a wall leave the agent in place. `gamma = 0.95`, horizon cap `4 n^2`.
pub fn build_gridworld<S: Scalar>(n: usize, random_start: bool) -> Result<Mdp<S>> {
    if n < 3 {
        return Err(Error::domain("n", format!("gridworld side must be >= 3, got {n}")));
    }
    let goal = n * n - 1;
    let mut b = Mdp::builder(n * n, 4).gamma(S::lit(0.95)).horizon_cap(4 * n * n).terminal(goal);
    if random_start {
        let p = S::one() / S::from_count(n * n - 1);
        for s in 0..goal {
            b = b.initial(s, p);
        }
    } else {
        b = b.initial(0, S::one());
    }
    for s in 0..goal {
        let (row, col) = (s / n, s % n);
        for action in GridAction::ALL {
            let (r, c) = action.apply(row, col, n);
            let next = r * n + c;
            b = b.transition(s, action as usize, next, S::one());
            if next == goal {
                b = b.reward(s, action as usize, S::one());
            }
        }
    }
    b.build()
}

/// Linear chain `0 - 1 - ... - (n-1)` with the last state terminal.
///
/// Action 0 moves left (clamped at 0). Action 1 moves right; below the goal's neighbour
/// it slips and stays put with probability `slip`. Entering the goal from `n-2` pays 1
/// and is deterministic, so every return is `gamma^t <= 1`. `gamma = 0.9`.
pub fn build_chain<S: Scalar>(num_states: usize, slip: f64, horizon: usize) -> Result<Mdp<S>> {
    if num_states < 2 {
        return Err(Error::domain("num_states", "chain needs at least 2 states"));
    }
    if !(0.0..1.0).contains(&slip) {
        return Err(Error::domain("slip", format!("{slip} outside [0, 1)")));
    }
    let goal = num_states - 1;
    let mut b = Mdp::builder(num_states, 2).gamma(S::lit(0.9)).horizon_cap(horizon).initial(0, S::one()).terminal(goal);
    for s in 0..goal {
        b = b.transition(s, 0, s.saturating_sub(1), S::one());
        if s + 1 == goal {
            b = b.transition(s, 1, goal, S::one()).reward(s, 1, S::one());
        } else if slip > 0.0 {
            b = b.transition(s, 1, s + 1, S::lit(1.0 - slip)).transition(s, 1, s, S::lit(slip));
        } else {
            b = b.transition(s, 1, s + 1, S::one());
        }
    }
    b.build()
}

/// Integer parameters of the environment on which the buffer-optimal policy has an
/// arbitrarily large estimated return but an arbitrarily small true return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Construction {
    pub a: u64,
    pub b: u64,
    pub x: u64,
    pub m1: u64,
    pub m2: u64,
    /// Buffer size.
    pub n: u64,
    /// Target overestimate.
    pub big_m: f64,
    /// Target ceiling on the expected true return.
    pub eps: f64,
}

impl Theorem3Construction {
    /// Lexicographically smallest feasible `(b, a, x)`.
    pub fn search(n: u64, big_m: f64, eps: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::domain("n", "buffer size must be >= 1"));
        }
        if !(big_m >= 1.0) {
            return Err(Error::domain("M", format!("{big_m} < 1")));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::domain("eps", format!("{eps} outside (0, 1)")));
        }
        let threshold = (1.0 - eps).powf(1.0 / (n + 1) as f64);
        for b in 2u64.. {
            let Some(a) = (1..b).find(|&a| a as f64 / b as f64 >= threshold) else {
                continue;
            };
            let ratio = a as f64 / b as f64;
            let x_min = big_m * n as f64 / (b as f64 * (1.0 - ratio.powi(n as i32)));
            let x = (x_min.ceil() as u64).max(1);
            return Ok(Self { a, b, x, m1: (b - a) * x, m2: a * x, n, big_m, eps });
        }
        unreachable!("a feasible b exists for every eps in (0, 1)")
    }

    /// `p = M2 / (M1 + M2) = a / b`, exactly.
    pub fn p_exact(&self) -> Ratio<u64> {
        Ratio::new(self.m2, self.m1 + self.m2)
    }

    pub fn p(&self) -> f64 {
        self.m2 as f64 / (self.m1 + self.m2) as f64
    }

    pub fn num_actions(&self) -> usize {
        (self.m1 + self.m2) as usize
    }

    /// Expected true return of the buffer-optimal policy: `1 - p^(n+1)`.
    pub fn expected_true_return(&self) -> f64 {
        1.0 - self.p().powi(self.n as i32 + 1)
    }

    /// Expected estimated return of the buffer-optimal policy: `(1 - p^n) (M1 + M2) / n`.
    pub fn expected_estimate(&self) -> f64 {
        (1.0 - self.p().powi(self.n as i32)) * (self.m1 + self.m2) as f64 / self.n as f64
    }

    pub fn invariants_hold(&self) -> bool {
        let ratio = self.a as f64 / self.b as f64;
        self.a < self.b
            && ratio >= (1.0 - self.eps).powf(1.0 / (self.n + 1) as f64)
            && self.x as f64 >= self.big_m * self.n as f64 / (self.b as f64 * (1.0 - ratio.powi(self.n as i32)))
            && self.m1 == (self.b - self.a) * self.x
            && self.m2 == self.a * self.x
    }
}

/// One decision state `s_0` and `M1 + M2` actions; action `j` moves to terminal `s_{j+1}`
/// and pays 1 for the first `M1` actions, 0 otherwise.
pub fn build_theorem3_env<S: Scalar>(n: u64, big_m: f64, eps: f64) -> Result<(Mdp<S>, Theorem3Construction)> {
    let c = Theorem3Construction::search(n, big_m, eps)?;
    let k = c.num_actions();
    let mut b = Mdp::builder(k + 1, k).initial(0, S::one()).horizon_cap(1);
    for j in 0..k {
        b = b.transition(0, j, j + 1, S::one()).terminal(j + 1);
        if (j as u64) < c.m1 {
            b = b.reward(0, j, S::one());
        }
    }
    Ok((b.build()?, c))
}

/// One decision state, `num_actions` actions, each paying 1 and ending the episode.
pub fn build_zeroing_env<S: Scalar>(num_actions: usize) -> Result<Mdp<S>> {
    if num_actions < 2 {
        return Err(Error::domain("num_actions", "zeroing environment needs >= 2 actions"));
    }
    let mut b = Mdp::builder(2, num_actions).initial(0, S::one()).terminal(1).horizon_cap(1);
    for a in 0..num_actions {
        b = b.transition(0, a, 1, S::one()).reward(0, a, S::one());
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::DEFAULT_ENUMERATION_CAP;
    use crate::policy::{ExplicitPolicy, TabularSoftmaxPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent exhaustive search over the integer inequalities.
    fn brute_force_construction(n: u64, big_m: f64, eps: f64) -> (u64, u64, u64) {
        for b in 2u64..200 {
            for a in 1..b {
                let r = a as f64 / b as f64;
                if r < (1.0 - eps).powf(1.0 / (n as f64 + 1.0)) {
                    continue;
                }
                for x in 1u64..1000 {
                    if x as f64 * b as f64 * (1.0 - r.powi(n as i32)) >= big_m * n as f64 {
                        return (b, a, x);
                    }
                }
            }
        }
        panic!("no construction found")
    }

    #[test]
    fn theorem3_small_case() {
        let (mdp, c) = build_theorem3_env::<f64>(2, 1.0, 0.5).unwrap();
        assert_eq!((c.a, c.b, c.x, c.m1, c.m2), (4, 5, 2, 2, 8));
        assert_eq!(c.p_exact(), Ratio::new(4, 5));
        assert_eq!(c.p(), 0.8);
        assert_eq!(brute_force_construction(2, 1.0, 0.5), (5, 4, 2));
        assert_eq!(mdp.num_actions(), 10);
        assert_eq!(mdp.num_states(), 11);
        assert!(c.invariants_hold());
        assert!((c.expected_true_return() - 0.488).abs() < 1e-12);
        assert!((c.expected_estimate() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn theorem3_matches_brute_force_over_grid() {
        for n in 1..5u64 {
            for &m in &[1.0, 2.5, 7.0] {
                for &eps in &[0.3, 0.5, 0.9] {
                    let c = Theorem3Construction::search(n, m, eps).unwrap();
                    assert_eq!((c.b, c.a, c.x), brute_force_construction(n, m, eps));
                    assert!(c.invariants_hold());
                    assert_eq!(c.p_exact(), Ratio::new(c.a, c.b));
                }
            }
        }
    }

    #[test]
    fn theorem3_rewards_and_uniform_return() {
        let (mdp, c) = build_theorem3_env::<f64>(2, 1.0, 0.5).unwrap();
        for j in 0..c.num_actions() {
            let expected = if (j as u64) < c.m1 { 1.0 } else { 0.0 };
            assert_eq!(mdp.reward(0, j), expected);
        }
        let uniform = ExplicitPolicy::uniform(mdp.num_states(), mdp.num_actions());
        let j = mdp.exact_return(&uniform);
        assert!((j - c.m1 as f64 / (c.m1 + c.m2) as f64).abs() < 1e-12);
        let all = mdp.enumerate_trajectories(5, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all.len(), c.num_actions());
        let t = mdp.sample_trajectory(&uniform, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(t.len(), 1);
        assert!(t.steps[0].reward == 0.0 || t.steps[0].reward == 1.0);
        let expected = (1.0 / c.num_actions() as f64).ln();
        assert!((mdp.trajectory_log_prob(&uniform, &t) - expected).abs() < 1e-12);
    }

    #[test]
    fn theorem3_rejects_bad_parameters() {
        assert!(Theorem3Construction::search(0, 1.0, 0.5).is_err());
        assert!(Theorem3Construction::search(2, 0.5, 0.5).is_err());
        assert!(Theorem3Construction::search(2, 1.0, 1.5).is_err());
    }

    #[test]
    fn gridworld_shape_and_optimal_return() {
        let g5 = build_gridworld::<f64>(5, false).unwrap();
        assert_eq!(g5.num_states(), 25);
        assert_eq!(g5.horizon_cap(), 100);

        let g3 = build_gridworld::<f64>(3, false).unwrap();
        // Right, right, down, down: shortest path of 4 moves.
        let probs: Vec<Vec<f64>> =
            (0..9).map(|s| if s % 3 < 2 { vec![0.0, 0.0, 0.0, 1.0] } else { vec![0.0, 1.0, 0.0, 0.0] }).collect();
        let optimal = ExplicitPolicy::from_rows(&probs).unwrap();
        assert!((g3.exact_return(&optimal) - 0.95f64.powi(3)).abs() < 1e-12);

        let stuck = ExplicitPolicy::from_rows(&vec![vec![1.0, 0.0, 0.0, 0.0]; 9]).unwrap();
        assert_eq!(g3.exact_return(&stuck), 0.0);
    }

    #[test]
    fn gridworld_random_start_excludes_goal() {
        let g = build_gridworld::<f64>(4, true).unwrap();
        assert_eq!(g.initial_dist()[15], 0.0);
        assert!((g.initial_dist()[0] - 1.0 / 15.0).abs() < 1e-15);
        assert!(build_gridworld::<f64>(2, false).is_err());
    }

    #[test]
    fn gridworld_exact_return_matches_monte_carlo() {
        let g = build_gridworld::<f64>(5, false).unwrap();
        let pi = TabularSoftmaxPolicy::uniform(25, 4);
        let exact = g.exact_return(&pi);
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let r = g.sample_trajectory(&pi, &mut rng).discounted_return(g.gamma());
            sum += r;
            sq += r * r;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn zeroing_env_every_policy_returns_one() {
        let mdp = build_zeroing_env::<f64>(2).unwrap();
        assert_eq!(mdp.enumerate_trajectories(1, 10).unwrap().len(), 2);
        let uniform = ExplicitPolicy::uniform(2, 2);
        assert_eq!(mdp.exact_return(&uniform), 1.0);
        let skewed = ExplicitPolicy::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        assert_eq!(mdp.exact_return(&skewed), 1.0);
        for t in mdp.enumerate_trajectories(1, 10).unwrap() {
            assert!((mdp.trajectory_log_prob(&uniform, &t) - 0.5f64.ln()).abs() < 1e-15);
        }
        assert!(build_zeroing_env::<f64>(1).is_err());
    }

    #[test]
    fn chain_returns_bounded() {
        let chain = build_chain::<f64>(3, 0.2, 8).unwrap();
        assert!(chain.max_achievable_return() < 0.9);
        let no_slip = build_chain::<f64>(3, 0.0, 8).unwrap();
        assert_eq!(no_slip.max_achievable_return(), 0.9);
        assert!(build_chain::<f64>(1, 0.0, 4).is_err());
        assert!(build_chain::<f64>(3, 1.0, 4).is_err());
    }

    #[test]
    fn builders_work_in_f32() {
        let g = build_gridworld::<f32>(3, true).unwrap();
        let pi = ExplicitPolicy::<f32>::uniform(9, 4);
        let j = g.exact_return(&pi);
        assert!(j > 0.0 && j <= 1.0);
    }
}
