//! Annotation ingestion, the class schema, fold splitting, netpbm images
//! and the synthetic corpus.

pub mod index;
pub mod labels;
pub mod pgm;
pub mod schema;
pub mod split;
pub mod synth;

pub use index::{load_index, load_index_file, DatasetIndex, Gender, ImageRecord};
pub use labels::{read_labels, write_labels, Annotation};
pub use pgm::{read_pgm, read_pgm_image, write_pgm, write_ppm, GrayImage};
pub use schema::{ClassSchema, CLASS_NAMES};
pub use split::{kfold_split, FoldAssignment};
pub use synth::{kmeans_anchors, synth_generate, toy_cfg, SynthCorpus, SynthImage};
