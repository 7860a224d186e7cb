pub mod appearance;
pub mod brdf;
pub mod envmap;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod scene;
pub mod sh;
pub mod shading;
pub mod synthetic;
pub mod trainer;
