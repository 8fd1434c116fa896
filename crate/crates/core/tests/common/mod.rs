pub mod gradcases;
pub mod reference;
