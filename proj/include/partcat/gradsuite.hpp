#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "partcat/gradcheck.hpp"
#include "partcat/losses.hpp"

namespace partcat {

inline constexpr double kGradTolerance = 1e-4;

struct GradientCase {
    std::string name;
    GradCheckReport report;
    std::size_t inputs = 0;  // scalars probed
};

/// Random binary masks over an H x W grid for `vocab`, consistent across levels.
/// Roughly a sixth of the pixels carry zero weight.
GroundTruth random_ground_truth(const Vocabulary& vocab, std::size_t height, std::size_t width, std::uint64_t seed);

/// Central-difference checks in double precision for every loss; the last case
/// runs total_loss through a full forward pass on a 4x4 grid.
std::vector<GradientCase> loss_gradient_suite(std::uint64_t seed);

}  // namespace partcat
