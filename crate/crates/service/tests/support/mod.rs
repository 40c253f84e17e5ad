pub mod differential;
pub mod usecases;
