pub mod cli;
pub mod ddouble;
pub mod integrator;
pub mod linalg;
pub mod problems;
pub mod stagesolver;
pub mod tableau;
