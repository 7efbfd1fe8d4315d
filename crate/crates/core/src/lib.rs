//! Leaderless superblock BFT consensus over a UTXO ledger, with sharded
//! signature verification, a digest-based reliable broadcast, a leader-based
//! baseline and a deterministic discrete-event network simulator.

pub mod adversary;
pub mod binconsensus;
pub mod codec;
pub mod cons1;
pub mod crypto;
pub mod ledger;
pub mod mempool;
pub mod message;
pub mod netsim;
pub mod rbcast;
pub mod records;
pub mod shardverify;
pub mod superblock;
pub mod types;
pub mod workload;
pub mod world;
