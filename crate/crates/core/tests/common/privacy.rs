//! Audit of what the server side can see.

use std::marker::PhantomData;

use fedreid::data::{Batch, Dataset, SampleRecord};
use fedreid::federation::{aggregate_params, AggregationStrategy, Broadcast, ClientUpload, LossStats, Server, WireSafe};
use fedreid::memory::{aggregate_global, GlobalMemory, LocalMemory};
use fedreid::model::ParameterVector;
use fedreid::Result;

struct Probe<T: ?Sized>(PhantomData<T>);

trait NotWire {
    fn wire_safe(&self) -> bool {
        false
    }
}
impl<T: ?Sized> NotWire for Probe<T> {}

trait Wire {
    fn wire_safe(&self) -> bool {
        true
    }
}
impl<T: WireSafe + ?Sized> Wire for &Probe<T> {}

/// True when `$t` implements `WireSafe`, false otherwise, without failing to
/// compile on non-wire types.
macro_rules! wire_safe {
    ($t:ty) => {
        (&&Probe::<$t>(PhantomData)).wire_safe()
    };
}

fn assert_wire<T: WireSafe + ?Sized>() {}
fn w<T: WireSafe>(_: &T) {}

pub const SERVER_SOURCE: &str = include_str!("../../src/federation/server.rs");
pub const MEMORY_SOURCE: &str = include_str!("../../src/memory.rs");

/// Compile-time part: entry point signatures and every upload field must be
/// wire-safe, or this does not build. Exhaustive patterns make a new field a
/// build error until audited.
pub fn entry_points_are_wire_only() {
    let _: fn(&[(ParameterVector, usize)]) -> Result<ParameterVector> = aggregate_params;
    let _: fn(&[LocalMemory], usize) -> Result<GlobalMemory> = aggregate_global;
    let _: fn(&mut Server, &[ClientUpload]) -> Result<()> = Server::aggregate;
    let _: fn(&Server) -> Broadcast = Server::broadcast;
    let _: fn(ParameterVector, Box<dyn AggregationStrategy>) -> Server = Server::new;

    assert_wire::<[(ParameterVector, usize)]>();
    assert_wire::<[LocalMemory]>();
    assert_wire::<[ClientUpload]>();
    assert_wire::<Broadcast>();
    assert_wire::<GlobalMemory>();

    fn upload(u: ClientUpload) {
        let ClientUpload {
            client_id,
            base_version,
            params,
            memory,
            num_samples,
            stats,
        } = u;
        w(&client_id);
        w(&base_version);
        w(&params);
        w(&memory);
        w(&num_samples);
        w(&stats);
    }
    fn stats(s: LossStats) {
        let LossStats {
            batches,
            id,
            cir,
            mrb,
            total,
        } = s;
        w(&batches);
        w(&id);
        w(&cir);
        w(&mrb);
        w(&total);
    }
    let _ = (upload, stats);
}

/// Wire-safety of the types a server could be handed, by name.
pub fn wire_table() -> Vec<(&'static str, bool)> {
    vec![
        ("ParameterVector", wire_safe!(ParameterVector)),
        ("ClientUpload", wire_safe!(ClientUpload)),
        ("Vec<LocalMemory>", wire_safe!(Vec<LocalMemory>)),
        ("Dataset", wire_safe!(Dataset)),
        ("SampleRecord", wire_safe!(SampleRecord)),
        ("Vec<SampleRecord>", wire_safe!(Vec<SampleRecord>)),
        ("Batch", wire_safe!(Batch)),
        ("Vec<f32>", wire_safe!(Vec<f32>)),
        ("(ParameterVector, Dataset)", wire_safe!((ParameterVector, Dataset))),
    ]
}

pub const EXPECTED_WIRE: [&str; 3] = ["ParameterVector", "ClientUpload", "Vec<LocalMemory>"];

/// Non-comment lines of the server and memory sources that name client data.
pub fn source_mentions() -> Vec<String> {
    let mut hits = Vec::new();
    for (name, src) in [("server", SERVER_SOURCE), ("memory", MEMORY_SOURCE)] {
        for line in src.lines().map(str::trim).filter(|l| !l.starts_with("//")) {
            for banned in ["Dataset", "SampleRecord", "pixels", "crate::data", "Batch"] {
                if line.contains(banned) {
                    hits.push(format!("{name}: `{line}` mentions {banned}"));
                }
            }
        }
    }
    hits
}

/// Every audit finding; empty when the boundary holds.
pub fn violations() -> Vec<String> {
    entry_points_are_wire_only();
    let mut out: Vec<String> = wire_table()
        .into_iter()
        .filter(|(name, safe)| *safe != EXPECTED_WIRE.contains(name))
        .map(|(name, safe)| format!("{name} wire-safe = {safe}"))
        .collect();
    out.extend(source_mentions());
    out
}
