//! Symbolic state <-> real vector encodings.
//!
//! A frame is `[agent x, agent y, grip, (obj x, obj y, present) * K]` with every
//! entry in [-1, 1]. Cell coordinates map affinely onto [-1, 1]; flags are ±1.
//! Decoding snaps each entry to the nearest admissible value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Cell, WorldConfig, WorldState};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub fn frame_dim(cfg: &WorldConfig) -> usize {
    3 + 3 * cfg.n_objects()
}

pub fn sketch_dim(cfg: &WorldConfig) -> usize {
    3 * cfg.n_objects()
}

pub fn traj_dim(cfg: &WorldConfig) -> usize {
    cfg.horizon * frame_dim(cfg)
}

fn encode_coord(c: f32, extent: i32) -> f32 {
    2.0 * c / (extent - 1) as f32 - 1.0
}

fn decode_coord(v: f32, extent: i32) -> i32 {
    let c = ((v + 1.0) * 0.5 * (extent - 1) as f32).round();
    if c.is_nan() {
        return (extent - 1) / 2;
    }
    (c as i32).clamp(0, extent - 1)
}

fn flag(b: bool) -> f32 {
    if b {
        1.0
    } else {
        -1.0
    }
}

/// Half the distance between adjacent encoded cell values along the finer axis.
pub fn snap_radius(cfg: &WorldConfig) -> f32 {
    1.0 / (cfg.grid_w.max(cfg.grid_h) - 1) as f32
}

/// Encoded distance between adjacent cells along the finer axis.
pub fn cell_gap(cfg: &WorldConfig) -> f32 {
    2.0 * snap_radius(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVec(pub Vec<f32>);

pub fn encode_state(state: &WorldState, cfg: &WorldConfig) -> FrameVec {
    let mut v = Vec::with_capacity(frame_dim(cfg));
    v.push(encode_coord(state.agent.x as f32, cfg.grid_w));
    v.push(encode_coord(state.agent.y as f32, cfg.grid_h));
    v.push(flag(state.held.is_some()));
    for (pos, &present) in state.object_pos.iter().zip(&state.object_present) {
        v.push(encode_coord(pos.x as f32, cfg.grid_w));
        v.push(encode_coord(pos.y as f32, cfg.grid_h));
        v.push(flag(present));
    }
    FrameVec(v)
}

/// Snap a frame vector to the nearest symbolic state. A set grip flag marks
/// the lowest-index present object under the agent as held.
pub fn decode_state(frame: &[f32], cfg: &WorldConfig) -> Result<WorldState, EncodingError> {
    let f = frame_dim(cfg);
    if frame.len() != f {
        return Err(EncodingError::DimensionMismatch {
            expected: f,
            got: frame.len(),
        });
    }
    let agent = Cell::new(decode_coord(frame[0], cfg.grid_w), decode_coord(frame[1], cfg.grid_h));
    let grip = frame[2] >= 0.0;
    let k = cfg.n_objects();
    let mut object_pos = Vec::with_capacity(k);
    let mut object_present = Vec::with_capacity(k);
    for i in 0..k {
        let o = &frame[3 + 3 * i..6 + 3 * i];
        object_pos.push(Cell::new(decode_coord(o[0], cfg.grid_w), decode_coord(o[1], cfg.grid_h)));
        object_present.push(o[2] >= 0.0);
    }
    let mut state = WorldState {
        agent,
        held: None,
        object_pos,
        object_present,
    };
    if grip {
        state.held = state.object_at(agent, None);
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub values: Vec<f32>,
    pub horizon: usize,
}

impl Trajectory {
    pub fn frame(&self, i: usize) -> &[f32] {
        let f = self.values.len() / self.horizon;
        &self.values[i * f..(i + 1) * f]
    }
}

pub fn encode_traj(states: &[WorldState], cfg: &WorldConfig) -> Result<Trajectory, EncodingError> {
    if states.len() != cfg.horizon {
        return Err(EncodingError::DimensionMismatch {
            expected: cfg.horizon,
            got: states.len(),
        });
    }
    let values = states
        .iter()
        .flat_map(|s| encode_state(s, cfg).0)
        .collect();
    Ok(Trajectory {
        values,
        horizon: cfg.horizon,
    })
}

pub fn decode_traj(values: &[f32], cfg: &WorldConfig) -> Result<Vec<WorldState>, EncodingError> {
    let d = traj_dim(cfg);
    if values.len() != d {
        return Err(EncodingError::DimensionMismatch {
            expected: d,
            got: values.len(),
        });
    }
    values
        .chunks(frame_dim(cfg))
        .map(|frame| decode_state(frame, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    GoalImage,
    GoalSketch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalCondition {
    pub kind: GoalKind,
    pub values: Vec<f32>,
}

impl GoalKind {
    pub fn dim(self, cfg: &WorldConfig) -> usize {
        match self {
            GoalKind::GoalImage => frame_dim(cfg),
            GoalKind::GoalSketch => sketch_dim(cfg),
        }
    }
}

/// Center (in fractional cell units) of the half of `[0, extent)` holding `c`.
fn quadrant_center(c: i32, extent: i32) -> f32 {
    let half = extent / 2;
    if c < half {
        (half - 1) as f32 / 2.0
    } else {
        (half + extent - 1) as f32 / 2.0
    }
}

pub fn make_goal(kind: GoalKind, final_state: &WorldState, cfg: &WorldConfig) -> GoalCondition {
    let values = match kind {
        GoalKind::GoalImage => encode_state(final_state, cfg).0,
        GoalKind::GoalSketch => final_state
            .object_pos
            .iter()
            .zip(&final_state.object_present)
            .flat_map(|(pos, &present)| {
                [
                    encode_coord(quadrant_center(pos.x, cfg.grid_w), cfg.grid_w),
                    encode_coord(quadrant_center(pos.y, cfg.grid_h), cfg.grid_h),
                    flag(present),
                ]
            })
            .collect(),
    };
    GoalCondition { kind, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::NamedCell;
    use proptest::prelude::*;

    fn small_world() -> WorldConfig {
        WorldConfig {
            grid_w: 4,
            grid_h: 4,
            horizon: 3,
            objects: vec![
                NamedCell::new("red block", 0, 0),
                NamedCell::new("blue block", 3, 3),
            ],
            containers: vec![NamedCell::new("top drawer", 2, 0)],
            locations: vec![],
            max_episode_steps: 10,
            seed: 0,
        }
    }

    fn all_valid_states(cfg: &WorldConfig) -> Vec<WorldState> {
        let cells: Vec<Cell> = cfg.cells().collect();
        let mut out = Vec::new();
        for &agent in &cells {
            for &a in &cells {
                for &b in &cells {
                    for present in [[true, true], [true, false], [false, true]] {
                        for held in [None, Some(0), Some(1)] {
                            let s = WorldState {
                                agent,
                                held,
                                object_pos: vec![a, b],
                                object_present: present.to_vec(),
                            };
                            if s.is_valid(cfg) {
                                out.push(s);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn affine_endpoints() {
        let cfg = WorldConfig::default();
        let s = cfg.initial_state(Cell::new(0, 0));
        let v = encode_state(&s, &cfg);
        assert_eq!(v.0.len(), 15);
        assert_eq!(&v.0[..3], &[-1.0, -1.0, -1.0]);
        let s = cfg.initial_state(Cell::new(5, 5));
        assert_eq!(&encode_state(&s, &cfg).0[..2], &[1.0, 1.0]);
    }

    #[test]
    fn exhaustive_round_trip_small_world() {
        let cfg = small_world();
        let states = all_valid_states(&cfg);
        assert!(states.len() > 1000);
        for s in &states {
            let v = encode_state(s, &cfg);
            let d = decode_state(&v.0, &cfg).unwrap();
            assert_eq!(&d, s);
            assert_eq!(encode_state(&d, &cfg), v);
        }
    }

    #[test]
    fn zero_vector_decodes_to_center() {
        let cfg = WorldConfig::default();
        let states = decode_traj(&vec![0.0; traj_dim(&cfg)], &cfg).unwrap();
        assert_eq!(states.len(), 8);
        // 0 maps to cell 2.5 on a 6-wide grid; round-half-away-from-zero gives 3.
        let center = Cell::new(3, 3);
        for s in states {
            assert_eq!(s.agent, center);
            assert!(s.object_pos.iter().all(|&c| c == center));
            assert!(s.object_present.iter().all(|&p| p));
            assert_eq!(s.held, Some(0));
        }
    }

    #[test]
    fn traj_dims_and_errors() {
        let cfg = WorldConfig::default();
        assert_eq!(traj_dim(&cfg), 120);
        let s = cfg.initial_state(Cell::new(0, 0));
        assert!(matches!(
            encode_traj(std::slice::from_ref(&s), &cfg),
            Err(EncodingError::DimensionMismatch { expected: 8, got: 1 })
        ));
        let t = encode_traj(&vec![s.clone(); 8], &cfg).unwrap();
        assert_eq!(t.values.len(), 120);
        assert_eq!(decode_traj(&t.values, &cfg).unwrap(), vec![s; 8]);
        assert!(decode_traj(&t.values[1..], &cfg).is_err());
    }

    #[test]
    fn sketch_quadrants() {
        let cfg = WorldConfig::default();
        let mut s = cfg.initial_state(Cell::new(0, 0));
        s.object_pos[0] = Cell::new(5, 5);
        let g = make_goal(GoalKind::GoalSketch, &s, &cfg);
        assert_eq!(g.values.len(), 12);
        let four = encode_coord(4.0, 6);
        assert_eq!(&g.values[..3], &[four, four, 1.0]);
        let img = make_goal(GoalKind::GoalImage, &s, &cfg);
        assert_eq!(img.values.len(), 15);

        let mut t = s.clone();
        t.object_pos[0] = Cell::new(3, 4);
        t.agent = Cell::new(2, 2);
        assert_eq!(make_goal(GoalKind::GoalSketch, &t, &cfg), g);
        assert_ne!(make_goal(GoalKind::GoalImage, &t, &cfg), img);
        let centers = [encode_coord(1.0, 6), four, -1.0, 1.0];
        assert!(g.values.iter().all(|v| centers.contains(v)));
    }

    proptest! {
        #[test]
        fn snap_is_constant_within_half_gap(
            seed in 0usize..5000,
            noise in proptest::collection::vec(-0.999f32..0.999, 8),
        ) {
            let cfg = small_world();
            let states = all_valid_states(&cfg);
            let s = &states[seed % states.len()];
            let mut v = encode_state(s, &cfg).0;
            let r = snap_radius(&cfg);
            for (i, x) in v.iter_mut().enumerate() {
                *x += noise[i % noise.len()] * r;
            }
            prop_assert_eq!(&decode_state(&v, &cfg).unwrap(), s);
            // decode is idempotent
            let d = decode_state(&v, &cfg).unwrap();
            prop_assert_eq!(decode_state(&encode_state(&d, &cfg).0, &cfg).unwrap(), d);
        }
    }
}
