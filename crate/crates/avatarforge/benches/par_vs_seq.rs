//! Placeholder; the parallel-vs-sequential comparison lands with the
//! renderer.
fn main() {}
