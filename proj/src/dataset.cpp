#include "deq/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "deq/errors.hpp"

namespace deq {

void Dataset::validate() const {
  if (features.size() != labels.size()) {
    throw InvalidInput("Dataset: " + std::to_string(features.size()) + " feature rows but " +
                       std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw InvalidInput("Dataset: label " + std::to_string(labels[i]) + " at row " +
                         std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (features[i].size() != input_dim()) throw InvalidInput("Dataset: ragged feature rows");
  }
}

Dataset make_two_spirals(std::size_t n, double noise, std::uint64_t seed) {
  if (n % 2 != 0) throw InvalidInput("make_two_spirals: n must be even, got " + std::to_string(n));
  if (!(noise >= 0)) throw InvalidInput("make_two_spirals: noise must be non-negative");

  Dataset data;
  data.name = "two_spirals";
  data.seed = seed;
  data.num_classes = 2;
  data.features.reserve(n);
  data.labels.reserve(n);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double r = kSpiralInnerRadius + (1.0 - kSpiralInnerRadius) * unit(rng);
    const double angle = 2.0 * std::numbers::pi * kSpiralTurns * r + label * std::numbers::pi;
    Vector x(2);
    x << r * std::cos(angle), r * std::sin(angle);
    if (noise > 0) {
      x(0) += noise * jitter(rng);
      x(1) += noise * jitter(rng);
    }
    data.features.push_back(std::move(x));
    data.labels.push_back(label);
  }
  return data;
}

Dataset load_dataset_csv(const std::string& path, int num_classes) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset file '" + path + "'", 0);

  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file", line_no);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header.back() != "label") {
    throw ParseError(path + ":1: header must be x0,...,x{d-1},label", line_no);
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "x" + std::to_string(j)) {
      throw ParseError(path + ":1: expected column 'x" + std::to_string(j) + "', got '" + header[j] + "'",
                       line_no);
    }
  }

  Dataset data;
  data.name = path;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != d + 1) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(d + 1) +
                           " fields, got " + std::to_string(cells.size()),
                       line_no);
    }
    Vector x(static_cast<Eigen::Index>(d));
    for (std::size_t j = 0; j <= d; ++j) {
      std::size_t used = 0;
      double value = 0;
      try {
        value = std::stod(cells[j], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cells[j].size() || cells[j].empty() || !std::isfinite(value)) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": non-numeric field '" + cells[j] + "'",
                         line_no);
      }
      if (j < d) {
        x(static_cast<Eigen::Index>(j)) = value;
      } else {
        if (value != std::floor(value) || value < 0) {
          throw ParseError(path + ":" + std::to_string(line_no) + ": label must be a non-negative integer",
                           line_no);
        }
        const int label = static_cast<int>(value);
        if (num_classes > 0 && label >= num_classes) {
          throw InvalidInput(path + ":" + std::to_string(line_no) + ": label " + std::to_string(label) +
                             " >= number of classes " + std::to_string(num_classes));
        }
        max_label = std::max(max_label, label);
        data.labels.push_back(label);
      }
    }
    data.features.push_back(std::move(x));
  }
  data.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  data.validate();
  return data;
}

void save_dataset_csv(const Dataset& data, const std::string& path) {
  data.validate();
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write dataset file '" + path + "'");
  const Eigen::Index d = data.input_dim();
  for (Eigen::Index j = 0; j < d; ++j) out << 'x' << j << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", data.features[i](j));
      out << buf << ',';
    }
    out << data.labels[i] << '\n';
  }
}

}  // namespace deq
