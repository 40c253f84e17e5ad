pub mod random;
pub mod reference;
pub mod store_checks;
