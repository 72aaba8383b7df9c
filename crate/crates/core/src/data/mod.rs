//! Procedural shape-world data: symbolic scenes, rendering, the template
//! grammar with a verifying truth checker, manifests and dataset generation.

pub mod gen;
pub mod grammar;
pub mod manifest;
pub mod render;
pub mod scene;

pub use gen::{generate_dataset, DataGenConfig, DataGenSummary, TaskCounts};
pub use grammar::{gen_caption, gen_entail, gen_pairjudge, gen_refexp, EntailLabel};
pub use manifest::{read_manifest, split_of, write_manifest, ManifestRecord, Split};
pub use render::{crop_resize, load_ppm, object_bbox, render_ppm, PixelBox};
pub use scene::{check_fact, gen_scene, refexp_satisfiers, Descriptor, Fact, RefExpr, Scene};
