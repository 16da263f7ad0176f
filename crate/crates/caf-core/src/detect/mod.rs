//! A small grid detector on synthetic scenes: enough model to train the
//! attention block end to end and measure whether it helps.

mod decode;
mod loss;
mod model;
mod scene;
mod train;

pub use decode::{decode_predictions, DecodeConfig};
pub use loss::{
    detection_loss, detection_loss_t, encode_targets, Targets, BOX_WEIGHT, CLS_WEIGHT, OBJ_WEIGHT,
};
pub use model::{
    detector_forward, detector_forward_t, DetectorNodes, ToyDetectorParams, BOX_FIELDS,
    IMG_CHANNELS, STEM_WIDTHS,
};
pub use scene::{gen_scene, SceneConfig};
pub use train::{
    evaluate_detector, train, train_on, Dataset, TrainConfig, TrainOutcome, ValPoint,
};
