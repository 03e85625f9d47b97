pub mod check;
pub mod dataset;
pub mod model;
pub mod trading;
