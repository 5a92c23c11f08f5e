pub mod assembly;
pub mod basis;
pub mod carleman;
pub mod config;
pub mod error;
pub mod forward;
pub mod grid;
pub mod io;
pub mod media;
pub mod pipeline;
pub mod qrm;
pub mod reconstruction;
