pub mod gradsuite;
pub mod ste;
