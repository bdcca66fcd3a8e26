#pragma once

namespace vlmo::util {

// Keeps large freed blocks in the heap instead of returning them to the OS.
// Training reallocates same-sized activation buffers every step, and
// re-faulting them costs more than the arithmetic at toy scale.
void tune_allocator();

}  // namespace vlmo::util
