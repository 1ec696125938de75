//! Evader strategies: a random policy and a scripted potential-field
//! policy that stands in for a learned adversary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{wrap_angle, EnvConfig, EnvState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaderKind {
    Random,
    Potential,
}

impl std::str::FromStr for EvaderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(EvaderKind::Random),
            "potential" => Ok(EvaderKind::Potential),
            other => Err(format!("unknown evader kind {other:?} (expected random|potential)")),
        }
    }
}

/// Strategy selection plus potential-field gains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaderParams {
    pub kind: EvaderKind,
    /// Wall repulsion gain.
    pub wall_gain: f64,
    /// Pursuer repulsion gain.
    pub pursuer_gain: f64,
    /// Repulsion falloff exponent (divides by distance^falloff).
    pub falloff: i32,
    /// Proportional heading gain before yaw-rate saturation.
    pub turn_gain: f64,
}

impl Default for EvaderParams {
    fn default() -> Self {
        EvaderParams {
            kind: EvaderKind::Potential,
            wall_gain: 1.5,
            pursuer_gain: 1.0,
            falloff: 2,
            turn_gain: 2.0,
        }
    }
}

/// Speed fraction uniform in [0.5, 1.0], yaw rate uniform over the full
/// range. Returned in the shared `[-2, 2]^2` action space.
pub fn random_action(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let speed_frac = rng.gen_range(0.5..1.0);
    let yaw_frac = rng.gen_range(-1.0..1.0);
    [speed_frac * 4.0 - 2.0, yaw_frac * 2.0]
}

/// Desired escape direction: inverse-power repulsion from every pursuer
/// plus inward-pointing repulsion from the four walls.
pub fn desired_direction(params: &EvaderParams, cfg: &EnvConfig, state: &EnvState) -> (f64, f64) {
    let e = &state.evader;
    let (mut dx, mut dy) = (0.0, 0.0);
    for p in &state.pursuers {
        let (rx, ry) = (e.x - p.x, e.y - p.y);
        let d = (rx * rx + ry * ry).sqrt();
        if d == 0.0 {
            // coincident positions: fixed +x tie-break
            dx += params.pursuer_gain;
            continue;
        }
        let w = params.pursuer_gain / d.powi(params.falloff);
        dx += rx * w;
        dy += ry * w;
    }
    let hw = cfg.half_width;
    let wall = |margin: f64| {
        let m = margin.max(1e-6);
        params.wall_gain / (m * m)
    };
    dx -= wall(hw - e.x); // wall at +x pushes -x
    dx += wall(hw + e.x);
    dy -= wall(hw - e.y);
    dy += wall(hw + e.y);
    (dx, dy)
}

/// Steers toward the repulsion direction at saturated yaw rate, full
/// speed. Deterministic given the state.
pub fn potential_field_action(params: &EvaderParams, cfg: &EnvConfig, state: &EnvState) -> [f64; 2] {
    let (dx, dy) = desired_direction(params, cfg, state);
    let target = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
    let err = wrap_angle(target - state.evader.psi);
    let yaw = (params.turn_gain * err).clamp(-cfg.yaw_rate_max, cfg.yaw_rate_max);
    [2.0, 2.0 * yaw / cfg.yaw_rate_max]
}

/// Dispatches on the configured strategy.
pub fn evader_action(
    params: &EvaderParams,
    cfg: &EnvConfig,
    state: &EnvState,
    rng: &mut ChaCha8Rng,
) -> [f64; 2] {
    match params.kind {
        EvaderKind::Random => random_action(rng),
        EvaderKind::Potential => potential_field_action(params, cfg, state),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Pose, Simulator};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn state_with(pursuers: Vec<Pose>, evader: Pose) -> EnvState {
        EnvState { pursuers, evader, step: 0, done: false, capture: None }
    }

    #[test]
    fn random_actions_are_deterministic_and_bounded() {
        let a: Vec<[f64; 2]> = (0..32).map(|_| random_action(&mut rng(9))).collect();
        let b: Vec<[f64; 2]> = (0..32).map(|_| random_action(&mut rng(9))).collect();
        assert_eq!(a, b);
        for act in (0..10_000).map(|_| random_action(&mut rng(10))) {
            // speed fraction within [0.5, 1.0]
            let frac = (act[0] + 2.0) / 4.0;
            assert!((0.5..=1.0).contains(&frac));
            assert!(act[1].abs() <= 2.0);
        }
    }

    #[test]
    fn random_yaw_rate_has_zero_mean() {
        let mut r = rng(11);
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| random_action(&mut r)[1] / 2.0).sum::<f64>() / n as f64;
        // Var of U(-1,1) is 1/3; three standard errors
        let se = (1.0f64 / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "yaw mean {mean} exceeds 3 se {se}");
    }

    #[test]
    fn symmetric_pursuers_push_along_bisector() {
        let cfg = EnvConfig::default();
        let st = state_with(
            vec![
                Pose { x: -1.0, y: 0.6, psi: 0.0, speed: 0.0 },
                Pose { x: -1.0, y: -0.6, psi: 0.0, speed: 0.0 },
            ],
            Pose { x: 0.0, y: 0.0, psi: 0.0, speed: 0.0 },
        );
        let (dx, dy) = desired_direction(&EvaderParams::default(), &cfg, &st);
        assert!(dx > 0.0, "should flee along +x, got ({dx}, {dy})");
        assert!(dy.abs() < 1e-12, "y components must cancel by symmetry");
    }

    #[test]
    fn wall_repulsion_points_inward() {
        let cfg = EnvConfig::default();
        let st = state_with(
            vec![
                Pose { x: -1.8, y: -1.8, psi: 0.0, speed: 0.0 },
                Pose { x: -1.8, y: 1.8, psi: 0.0, speed: 0.0 },
            ],
            Pose { x: 0.0, y: 1.95, psi: 0.0, speed: 0.0 },
        );
        let (_, dy) = desired_direction(&EvaderParams::default(), &cfg, &st);
        assert!(dy < 0.0, "wall at +y must push the evader down, got dy={dy}");
    }

    #[test]
    fn single_west_pursuer_yields_roughly_east_escape() {
        let cfg = EnvConfig { n_pursuers: 2, ..EnvConfig::default() };
        // second pursuer far away so the west one dominates
        let st = state_with(
            vec![
                Pose { x: -1.0, y: 0.0, psi: 0.0, speed: 0.0 },
                Pose { x: -1.9, y: -1.9, psi: 0.0, speed: 0.0 },
            ],
            Pose { x: 0.0, y: 0.0, psi: 0.0, speed: 0.0 },
        );
        let (dx, dy) = desired_direction(&EvaderParams::default(), &cfg, &st);
        let angle = dy.atan2(dx).abs();
        assert!(angle < 15.0_f64.to_radians(), "escape {:.1} deg off east", angle.to_degrees());
    }

    #[test]
    fn potential_field_is_deterministic_and_bounded() {
        let cfg = EnvConfig::default();
        let sim = Simulator::new(cfg);
        let st = sim.reset(&mut rng(12));
        let a = potential_field_action(&EvaderParams::default(), &cfg, &st);
        let b = potential_field_action(&EvaderParams::default(), &cfg, &st);
        assert_eq!(a, b);
        assert!(a[0].abs() <= 2.0 && a[1].abs() <= 2.0);
    }

    /// With a stationary pursuer team the evader settles away from the
    /// walls and is never captured over one horizon.
    #[test]
    fn evades_walls_against_stationary_team() {
        let cfg = EnvConfig::default();
        let sim = Simulator::new(cfg);
        let params = EvaderParams::default();
        let mut st = state_with(
            vec![
                Pose { x: -1.2, y: 0.0, psi: 0.0, speed: 0.0 },
                Pose { x: -1.2, y: 0.8, psi: 0.0, speed: 0.0 },
            ],
            Pose { x: 0.5, y: 0.5, psi: 0.0, speed: 0.0 },
        );
        for _ in 0..cfg.horizon {
            let act = potential_field_action(&params, &cfg, &st);
            let (next, _) = sim.step(&st, &[[-2.0, 0.0], [-2.0, 0.0]], act);
            let margin = (cfg.half_width - next.evader.x.abs()).min(cfg.half_width - next.evader.y.abs());
            assert!(margin >= 0.1, "evader ran into a wall (margin {margin})");
            assert!(next.capture.is_none(), "evader captured by stationary team");
            if next.done {
                break;
            }
            st = next;
        }
    }
}
