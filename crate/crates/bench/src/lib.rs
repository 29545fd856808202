//! Criterion benchmarks for the tensor kernels, the decoder forward pass and
//! a LoRA training step. Run with `cargo bench -p instruct-forge-bench`.
