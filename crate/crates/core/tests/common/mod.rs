#![allow(dead_code)]

pub mod coco_reference;
pub mod raster_oracle;
