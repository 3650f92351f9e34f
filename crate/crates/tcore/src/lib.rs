//! Desk-scale temporal-correspondence video representation learning.
//!
//! Pipeline: sandwich frame sampling -> masked ViT encoding -> latent
//! patch matching against past/future frames -> three-branch
//! self-distillation with an EMA teacher -> semi-supervised label
//! propagation for evaluation. A synthetic moving-shapes generator
//! stands in for large video datasets so every mechanism is testable.

pub mod cli;
pub mod distill;
pub mod encoder;
pub mod eval;
pub mod parallel;
pub mod pmm;
pub mod params;
pub mod sampling;
pub mod tensor;
pub mod trainer;
