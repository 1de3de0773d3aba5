pub mod dynamics;
pub mod env;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod randomization;
pub mod sysid;
pub mod track;
