//! Synthetic scenes, dataset manifests and the tensor container format.

pub mod container;
pub mod manifest;
pub mod scene;

pub use container::{decode, encode, read_container, write_container, Container, ContainerData, Dtype};
pub use manifest::{
    assign_folds, build_manifest, generate_corpus, manifest_path, validate_dataset, write_corpus, CorpusReport, CorpusSpec,
    DatasetManifest, Sample, SampleRecord, Target, TaskData, TaskKind, ValidationReport, Violation, ViolationKind,
    CLASSIFICATION, GLANDS, LUMEN, NUCLEI, SEGMENTATION, SEG_TASKS, TISSUE,
};
pub use scene::{box_downsample, generate_scene, scene_violations, Profile, Range, Scene, SceneSpec, Tissue, TissueRule};
