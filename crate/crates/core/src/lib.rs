pub mod data;
pub mod interp;
pub mod model;
pub mod nucnorm;
pub mod tensor;
pub mod train;
