//! Synthetic household episodes: symbolic world, raster scene, task text and
//! reference plan.

mod config;
mod dataset;
mod scene;
mod task;
mod world;

pub use config::{GenConfig, LAYOUT_GRID};
pub use dataset::{read_jsonl, write_jsonl};
pub use scene::{
    mentioned_classes, oracle_segment, palette, rasterize, BoxRecord, Image, Rect, Scene,
    BACKGROUND,
};
pub use task::{
    burnt_clause, dirty_clause, generate_episode, generate_episode_with, location_clause,
    Episode, EpisodeRecord, PlannedSubtask, TaskRecord, TaskSpec,
};
pub use world::{Agent, Flags, Location, ObjectClass, WorldObject, WorldState};
