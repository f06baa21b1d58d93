//! Data files, synthetic providers, weight serialisation and the latency
//! benchmark behind the command-line tool.

pub mod bench;
pub mod infer;
pub mod records;
pub mod synthetic;
pub mod weights;

pub use bench::{bench, bench_scene, linear_fit, median_of_means, BenchConfig, BenchPoint, BenchResult, LinearFit};
pub use infer::{label_predictions, predict_clips};
pub use records::{load_clips, load_predictions, parse_clips, read_records, save_clips, save_predictions, write_records};
pub use synthetic::{
    class_names, generate_dataset, geometric_labels, synthetic_backbone, with_generated_classes, GenConfig,
    SyntheticBackbone, CLASS_NAMES,
};
pub use weights::{decode_weights, encode_weights, load_for_hydra, load_weights, load_weights_for, save_weights};
