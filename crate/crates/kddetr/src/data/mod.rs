//! Synthetic detection scenes, their on-disk format, and the average
//! precision evaluator every experiment reports against.

mod eval;
mod io;
mod scenes;

pub use eval::{average_precision, detections_from, ApReport, Detection, IOU_THRESHOLDS};
pub use io::{read_dataset, write_dataset, DatasetHeader};
pub use scenes::{generate, generate_one, SceneConfig, SceneSample};

use crate::boxes::BoxCxCyWH;

/// Reference annotations for one scene: parallel class and box sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub classes: Vec<usize>,
    pub boxes: Vec<BoxCxCyWH>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}
