pub mod diffserv;
pub mod packet;
pub mod sim;
pub mod net;
pub mod proto;
pub mod config;
pub mod world;
pub mod metrics;
pub mod experiment;
