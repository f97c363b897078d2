//! Criterion benchmarks for the convolution kernels, the DCT transforms and
//! a full training step of the MNIST desk model; see `benches/`.
