//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
