pub mod analysis;
pub mod comms;
pub mod controllers;
pub mod dynamics;
pub mod environment;
pub mod experiment_log;
pub mod fic;
pub mod operator;
pub mod service;
pub mod simulation;
