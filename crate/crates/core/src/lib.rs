pub mod backtest;
pub mod cli;
pub mod config;
pub mod kernels;
pub mod market;
pub mod mkl;
pub mod svm;
pub mod text;
