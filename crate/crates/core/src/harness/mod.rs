//! Experiment orchestration, the human-evaluation protocol and its service.

pub mod config;
pub mod experiments;
pub mod grid;
pub mod humaneval;
pub mod service;

pub use config::Config;
pub use grid::{run_grid, ExperimentGrid, GridCell, GridReport, ModelSpec};
pub use humaneval::{
    humaneval_report, majority_vote, plan_humaneval, Decision, HumanEvalConfig, HumanEvalPlan, HumanEvalReport,
    HumanVote,
};
