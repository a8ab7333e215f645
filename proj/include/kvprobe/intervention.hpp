#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace kvprobe {

// Per-layer unit directions for one concept.
struct SteeringVector {
  std::string concept_name;
  std::map<int, std::vector<float>> per_layer;
  std::uint64_t train_seed = 0;
  int pair_count = 0;

  int dim() const { return per_layer.empty() ? 0 : static_cast<int>(per_layer.begin()->second.size()); }
};

// Half-open range of absolute token positions.
struct PositionRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool contains(std::size_t p) const { return p >= begin && p < end; }
  bool empty() const { return end <= begin; }
};

// The intervention contract: at the output of each planned block, for every position
// in `span`, the residual stream gets `coefficient * direction[layer]` added.
struct InjectionPlan {
  std::string concept_name;
  std::map<int, std::vector<float>> directions;
  PositionRange span;
  double coefficient = 0.0;

  // Throws InvalidArgument unless `layers` is a subset of the vector's layers.
  static InjectionPlan build(const SteeringVector& vector, const std::set<int>& layers, PositionRange span,
                             double coefficient);
};

// Middle third of a depth-L stack: blocks [floor(L/3), floor(2L/3)] inclusive.
std::set<int> middle_third_layers(int n_layers);

}  // namespace kvprobe
