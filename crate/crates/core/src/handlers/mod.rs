//! Kind-specific executors: REST calls, database statements, filesystem
//! scripts.

pub mod db;
pub mod fs;
pub mod rest;
