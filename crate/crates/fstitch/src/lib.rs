pub mod formats;
pub mod idx;
pub mod manifest;
pub mod remote;
pub mod report;
