pub mod compile;
pub mod datasets;
pub mod eval;
pub mod generator;
pub mod grad;
pub mod lang;
pub mod pretrain;
pub mod privacy;
pub mod schema;
