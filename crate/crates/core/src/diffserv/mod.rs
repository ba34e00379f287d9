//! DiffServ edge conditioning and per-hop behaviour.

mod phb;
mod red;
mod scheduler;
mod sla;
mod token_bucket;

pub use phb::{Dscp, Phb, TrafficClass};
pub use red::{p_a, DropTailQueue, EnqueueOutcome, RedParams, RedQueue};
pub use scheduler::{ClassCounters, EgressQueue, QueueParams};
pub use sla::{classify_and_mark, AddrMatch, Conditioner, FlowMatch, KindMatch, SlaRule, SlaTable};
pub use token_bucket::{Profile, TokenBucket, TokenBucketParams};
