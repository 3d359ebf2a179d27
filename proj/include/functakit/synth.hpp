#pragma once

#include <cstdint>
#include <vector>

#include "functakit/common.hpp"

namespace functakit {

// Deterministic toy images: a smooth oriented color gradient with a few
// soft-edged shapes (disks and boxes) painted on top. Values in [0,1],
// channels x side^2, row-major pixel order.
MatXf synth_image(int side, int channels, uint64_t seed);
std::vector<MatXf> synth_dataset(int side, int channels, int count, uint64_t seed);

}  // namespace functakit
