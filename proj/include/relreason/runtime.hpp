#pragma once

namespace relreason {

/// Keeps large activation buffers on the heap instead of fresh mmap/munmap
/// pairs every step. No-op outside glibc.
void tune_allocator();

}  // namespace relreason
