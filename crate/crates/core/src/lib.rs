//! Pyramid-discriminator GAN for face age progression, trained and evaluated
//! on procedurally rendered portraits with known age and identity.

pub mod tensor;
pub mod critics;
pub mod eval;
pub mod faces;
pub mod nn;
pub mod pretrain;
pub mod trainer;
