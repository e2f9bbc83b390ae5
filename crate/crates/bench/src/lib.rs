//! Criterion benchmarks for the convolution, bit-packing and integer inference kernels. Run with `cargo bench -p qunet-bench`.
