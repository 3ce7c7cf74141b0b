//! Configuration, scenario runners and reports behind the `reprog` CLI.

pub mod config;
pub mod lab;
pub mod report;
pub mod scenario;
pub mod selftest;
