//! Core of a federated mammography grid.

pub mod algorithms;
pub mod dicom;
pub mod federation;
pub mod harness;
pub mod mgql;
pub mod model;
pub mod services;
pub mod store;
