//! File formats and the synthetic scenario generator.

mod model_file;
mod mot;
mod scenario;

pub use model_file::{load_model, save_model, SavedModel, MODEL_FORMAT};
pub use mot::{
    boxes_by_frame, read_mot, restrict_frames, write_detections, write_loss_csv, write_mot, MotData,
};
pub use scenario::{generate_scenario, Scenario, ScenarioSpec};
