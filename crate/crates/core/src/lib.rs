pub mod backtrans;
pub mod cli;
pub mod data;
pub mod decode;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
