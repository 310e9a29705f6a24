//! Secure vehicular beaconing stack and highway simulator.

pub mod beaconing;
pub mod crypto;
pub mod hook;
pub mod hsm;
pub mod identity;
pub mod config;
pub mod gateway;
pub mod selftest;
pub mod sim;
