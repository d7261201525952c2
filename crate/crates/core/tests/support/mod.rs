//! Oracles and fixtures shared by several test targets.
#![allow(dead_code)]

pub mod blocks;
pub mod dense;
pub mod text;
