#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deq/linalg.hpp"

namespace deq {

struct Dataset {
  std::vector<Vector> features;
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;
  std::uint64_t seed = 0;

  std::size_t size() const { return features.size(); }
  Eigen::Index input_dim() const { return features.empty() ? 0 : features.front().size(); }

  /// Throws InvalidInput when features/labels disagree or a label is out of range.
  void validate() const;
};

/// Angular extent of each spiral arm, in turns.
inline constexpr double kSpiralTurns = 1.25;
/// Arms start at this radius; radius grows linearly to 1.
inline constexpr double kSpiralInnerRadius = 0.1;

/// Two interleaved planar spirals, q = 2, d_x = 2. Sample i has class i % 2 and
/// lies at radius r and angle 2*pi*turns*r + class*pi, plus N(0, noise^2)
/// jitter per coordinate.
Dataset make_two_spirals(std::size_t n, double noise, std::uint64_t seed);

/// Reads "x0,...,x{d-1},label" CSV. When num_classes <= 0 it is inferred as
/// max label + 1.
Dataset load_dataset_csv(const std::string& path, int num_classes = 0);

void save_dataset_csv(const Dataset& data, const std::string& path);

}  // namespace deq
