pub mod coherent;
pub mod ensemble;
pub mod error;
pub mod fock;
pub mod linalg;
pub mod model;
pub mod spectrum;
pub mod verify;
pub mod config;
pub mod report;
pub mod runner;
