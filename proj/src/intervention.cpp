#include "kvprobe/intervention.hpp"

#include "kvprobe/error.hpp"

namespace kvprobe {

InjectionPlan InjectionPlan::build(const SteeringVector& vector, const std::set<int>& layers, PositionRange span,
                                   double coefficient) {
  InjectionPlan plan;
  plan.concept_name = vector.concept_name;
  plan.span = span;
  plan.coefficient = coefficient;
  for (int layer : layers) {
    auto it = vector.per_layer.find(layer);
    if (it == vector.per_layer.end())
      throw InvalidArgument("steering vector '" + vector.concept_name + "' has no direction for layer " +
                            std::to_string(layer));
    plan.directions.emplace(layer, it->second);
  }
  return plan;
}

std::set<int> middle_third_layers(int n_layers) {
  if (n_layers < 3) throw InvalidArgument("middle-third selection needs at least 3 layers");
  std::set<int> layers;
  for (int l = n_layers / 3; l <= (2 * n_layers) / 3; ++l) layers.insert(l);
  return layers;
}

}  // namespace kvprobe
