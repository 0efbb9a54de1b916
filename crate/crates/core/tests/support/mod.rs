#![allow(dead_code)]

pub mod deploy;
pub mod messages;
pub mod notify;
pub mod oracle;
