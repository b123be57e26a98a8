pub mod so3;
pub mod motiondata;
pub mod model;
pub mod evalmetrics;
pub mod training;
