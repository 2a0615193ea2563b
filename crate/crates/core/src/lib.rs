//! Geometry-aware video object segmentation toolkit.
//!
//! - [`geometry`]: pinhole projection, rigid poses, frustum overlap.
//! - [`sampler`]: training-frame sampling strategies.
//! - [`merger_net`]: reference Feature Merger with exact derivatives.
//! - [`instance3d`]: lifting tracked masks into merged 3D instances, AP.
//! - [`metrics`]: IoU, Positive IoU, Successful IoU and subset selection.
//! - [`ingest`]: file formats, manifests, synthetic box scenes.
//! - [`pipeline`]: end-to-end lift, merge, vote and evaluate.

pub mod geometry;
pub mod ingest;
pub mod instance3d;
pub mod merger_net;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod scene;

pub use geometry::{
    back_project, frustum_overlap_ratio, BinaryMask, CameraFrame, CameraIntrinsics, CameraPose,
    DepthMap, GeometryError, OverlapRatio, Point3, PointCloud, ReferenceFrame,
};
pub use ingest::{load_scene, save_scene, IngestError, TrackRecord};
pub use instance3d::{
    ApScores, Fragment, InstanceError, InstanceSet, MergeConfig, SuperpointPartition,
};
pub use merger_net::{FeatureMap, GradCheckReport, MergerConfig, MergerError, MergerParams};
pub use metrics::{MaskTrack, MetricsError, SubsetConfig, TrackScores};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError, PipelineOutput};
pub use sampler::{SampleMode, SampleResult, SamplerConfig, SamplerError};
pub use scene::{ObjectId, Scene, SceneFrame};
