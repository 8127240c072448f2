pub mod autodiff;
pub mod data;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod transforms;
