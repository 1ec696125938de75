//! Bounded 2-D pursuit-evasion simulator with kinematic unicycle agents.
//!
//! A team of slow pursuers chases one faster evader inside a square
//! arena. The episode ends at the first capture (any pursuer-evader
//! distance at or below the capture radius) or when the horizon runs out.
//!
//! Actions for every agent live in `[-2, 2]^2`:
//! `a[0]` maps to a speed command `(a[0]+2)/4 * v_max`, `a[1]` to a yaw
//! rate `a[1]/2 * yaw_rate_max`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Arena, kinematic, and termination constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Half-width of the square arena in meters (4 m x 4 m pool).
    pub half_width: f64,
    pub n_pursuers: usize,
    pub pursuer_vmax: f64,
    pub evader_vmax: f64,
    pub capture_radius: f64,
    pub near_capture_radius: f64,
    pub dt: f64,
    pub horizon: usize,
    pub yaw_rate_max: f64,
    /// Minimum pairwise separation at reset.
    pub min_separation: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            half_width: 2.0,
            n_pursuers: 2,
            pursuer_vmax: 0.2,
            evader_vmax: 0.3,
            capture_radius: 0.3,
            near_capture_radius: 0.5,
            dt: 1.0,
            horizon: 25,
            yaw_rate_max: 1.0,
            min_separation: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), crate::error::Error> {
        let mut problems = Vec::new();
        if !(self.capture_radius > 0.0 && self.capture_radius < self.half_width) {
            problems.push(format!(
                "capture radius {} must lie in (0, {})",
                self.capture_radius, self.half_width
            ));
        }
        if self.pursuer_vmax >= self.evader_vmax {
            problems.push(format!(
                "pursuers ({} m/s) must be slower than the evader ({} m/s)",
                self.pursuer_vmax, self.evader_vmax
            ));
        }
        if !(2..=6).contains(&self.n_pursuers) {
            problems.push(format!("n_pursuers {} outside [2, 6]", self.n_pursuers));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(crate::error::Error::Config(problems.join("; ")))
        }
    }

    pub fn observation_dim(&self) -> usize {
        5 + 4 + 4 * (self.n_pursuers - 1)
    }
}

/// Pose and speed of one agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub speed: f64,
}

impl Pose {
    pub fn velocity(&self) -> (f64, f64) {
        (self.speed * self.psi.cos(), self.speed * self.psi.sin())
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureEvent {
    pub agent: usize,
    pub step: usize,
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pursuers: Vec<Pose>,
    pub evader: Pose,
    pub step: usize,
    pub done: bool,
    pub capture: Option<CaptureEvent>,
}

/// Reward decomposition for one pursuer at one step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub cap: f64,
    pub aux: f64,
    pub safe: f64,
    pub total: f64,
}

/// One agent's local view: own pose, evader features, peer features.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// [x, y, cos psi, sin psi, speed]
    pub self_state: [f64; 5],
    /// [relative x, relative y, evader vx, evader vy]
    pub evader: [f64; 4],
    /// per peer (ascending agent index, self excluded):
    /// [relative x, relative y, peer vx, peer vy]
    pub peers: Vec<[f64; 4]>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        5 + 4 + 4 * self.peers.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.self_state);
        out.extend_from_slice(&self.evader);
        for p in &self.peers {
            out.extend_from_slice(p);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.flatten_into(&mut out);
        out
    }
}

/// The simulator. Stateless apart from its config; `step` is functional
/// so a group of environments can share one initial state by cloning.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub cfg: EnvConfig,
}

impl Simulator {
    pub fn new(cfg: EnvConfig) -> Self {
        Simulator { cfg }
    }

    /// Places all agents uniformly at random with minimum pairwise
    /// separation, random headings, zero speed.
    pub fn reset(&self, rng: &mut ChaCha8Rng) -> EnvState {
        let n = self.cfg.n_pursuers + 1;
        let hw = self.cfg.half_width;
        'attempt: for _ in 0..1000 {
            let mut poses = Vec::with_capacity(n);
            for _ in 0..n {
                poses.push(Pose {
                    x: rng.gen_range(-hw..hw),
                    y: rng.gen_range(-hw..hw),
                    psi: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                    speed: 0.0,
                });
            }
            for i in 0..n {
                for j in i + 1..n {
                    if poses[i].distance_to(&poses[j]) < self.cfg.min_separation {
                        continue 'attempt;
                    }
                }
            }
            let evader = poses.pop().unwrap();
            return EnvState { pursuers: poses, evader, step: 0, done: false, capture: None };
        }
        panic!(
            "reset: could not satisfy min separation {} after 1000 attempts",
            self.cfg.min_separation
        );
    }

    fn advance(&self, pose: &Pose, action: [f64; 2], vmax: f64) -> Pose {
        assert!(
            action[0].is_finite() && action[1].is_finite(),
            "step: non-finite action {action:?}"
        );
        let cfg = &self.cfg;
        let yaw_cmd = action[1] / 2.0 * cfg.yaw_rate_max;
        let dpsi = (yaw_cmd * cfg.dt).clamp(-cfg.yaw_rate_max * cfg.dt, cfg.yaw_rate_max * cfg.dt);
        let psi = wrap_angle(pose.psi + dpsi);
        let speed = ((action[0] + 2.0) / 4.0 * vmax).clamp(0.0, vmax);
        let x = (pose.x + speed * psi.cos() * cfg.dt).clamp(-cfg.half_width, cfg.half_width);
        let y = (pose.y + speed * psi.sin() * cfg.dt).clamp(-cfg.half_width, cfg.half_width);
        Pose { x, y, psi, speed }
    }

    /// Advances every agent simultaneously, then applies capture and
    /// horizon termination and computes per-pursuer rewards at the
    /// post-step positions.
    pub fn step(
        &self,
        state: &EnvState,
        pursuer_actions: &[[f64; 2]],
        evader_action: [f64; 2],
    ) -> (EnvState, Vec<RewardTerms>) {
        assert!(!state.done, "step called on a finished episode (done is monotone)");
        assert_eq!(
            pursuer_actions.len(),
            self.cfg.n_pursuers,
            "step: got {} pursuer actions for {} pursuers",
            pursuer_actions.len(),
            self.cfg.n_pursuers
        );
        let pursuers: Vec<Pose> = state
            .pursuers
            .iter()
            .zip(pursuer_actions)
            .map(|(p, &a)| self.advance(p, a, self.cfg.pursuer_vmax))
            .collect();
        let evader = self.advance(&state.evader, evader_action, self.cfg.evader_vmax);
        let step = state.step + 1;

        let mut capture = None;
        let mut best = f64::INFINITY;
        for (i, p) in pursuers.iter().enumerate() {
            let d = p.distance_to(&evader);
            if d <= self.cfg.capture_radius && d < best {
                best = d;
                capture = Some(CaptureEvent { agent: i, step });
            }
        }
        let done = capture.is_some() || step >= self.cfg.horizon;
        let next = EnvState { pursuers, evader, step, done, capture };
        let rewards = (0..self.cfg.n_pursuers).map(|i| self.reward(&next, i)).collect();
        (next, rewards)
    }

    /// Three-term reward at the post-step state: capture bonus, distance
    /// shaping, boundary penalty.
    pub fn reward(&self, state: &EnvState, agent: usize) -> RewardTerms {
        let p = &state.pursuers[agent];
        let d_ie = p.distance_to(&state.evader);
        let cap = if d_ie <= self.cfg.capture_radius { 12.0 } else { 0.0 };
        let aux = -0.35 * d_ie;
        let safe = -boundary_penalty(p.x.abs().max(p.y.abs()));
        RewardTerms { cap, aux, safe, total: cap + aux + safe }
    }

    /// Local view of agent `i`: own pose, evader relative position plus
    /// absolute velocity, peer relative positions plus absolute
    /// velocities in ascending index order.
    pub fn observe(&self, state: &EnvState, agent: usize) -> Observation {
        let p = &state.pursuers[agent];
        let (evx, evy) = state.evader.velocity();
        let peers = state
            .pursuers
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != agent)
            .map(|(_, q)| {
                let (vx, vy) = q.velocity();
                [q.x - p.x, q.y - p.y, vx, vy]
            })
            .collect();
        Observation {
            self_state: [p.x, p.y, p.psi.cos(), p.psi.sin(), p.speed],
            evader: [state.evader.x - p.x, state.evader.y - p.y, evx, evy],
            peers,
        }
    }

    pub fn observe_all(&self, state: &EnvState) -> Vec<Observation> {
        (0..self.cfg.n_pursuers).map(|i| self.observe(state, i)).collect()
    }
}

/// Piecewise boundary penalty magnitude as a function of the Chebyshev
/// distance from the arena center. Zero below 1.85 m, steep linear ramp
/// up to the wall, and the printed exponential branch at the wall itself
/// (positions are clamped so |d| never exceeds the half-width).
pub fn boundary_penalty(d: f64) -> f64 {
    if d < 1.85 {
        0.0
    } else if d < 2.0 {
        80.0 * (d - 1.85)
    } else {
        (2.0 * d - 4.0).exp().min(12.0)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    while a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// One JSON-lines record of a trajectory dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    /// pursuer index, or `n_pursuers` for the evader
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub speed: f64,
    pub action: [f64; 2],
    pub r_cap: f64,
    pub r_aux: f64,
    pub r_safe: f64,
}
