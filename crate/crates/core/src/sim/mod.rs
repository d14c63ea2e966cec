//! Kinematic driving scenes, rollout and scoring.

pub mod geometry;
pub mod rollout;
pub mod scene;
pub mod score;

pub use rollout::{rollout, Pose};
pub use scene::{generate_scene, load_scenes, save_scenes, Agent, Difficulty, EgoState, Obstacle, Scene};
pub use score::{score, score_waypoints, RewardBreakdown, RewardWeights};
