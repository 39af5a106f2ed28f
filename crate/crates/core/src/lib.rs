pub mod dynamics;
pub mod fmm;
pub mod lambda;
pub mod mahi;
pub mod oracle;
pub mod sum;
pub mod system;
pub mod units;
