#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "riskkit/moments.hpp"
#include "riskkit/wrapper.hpp"

namespace riskkit {

enum class Arrangement { series, parallel };
enum class CombinationRule { weighted_variance_sum, mixture_of_normals, report_separately };

std::string_view to_string(Arrangement a);
std::string_view to_string(CombinationRule r);
CombinationRule parse_combination_rule(std::string_view name);

struct CompositionPlan {
  std::vector<MetricConfig> members;
  Arrangement arrangement = Arrangement::parallel;
  // Unset: mixture_of_normals when the composed output exposes (mu, sigma)
  // components, otherwise weighted_variance_sum with equal weights.
  std::optional<CombinationRule> rule;
  std::vector<double> weights;

  void validate() const;
  // Metric configuration handed to wrap(): a series pair becomes one nested
  // ensemble, or stays side by side on the shared backbone for dropout.
  std::vector<MetricConfig> metric_configs() const;
  // Keys of the composed model's RiskOutput::risks.
  std::vector<std::string> risk_ids() const;
  nlohmann::json to_json() const;
  static CompositionPlan from_json(const nlohmann::json& j);
};

RiskAwareModel compose(const SequentialModel& model, const CompositionPlan& plan, const WrapOptions& options = {});

// Back-propagates every weighted term separately, accumulates the gradients
// on the shared parameters, then takes one optimizer step.
LossBreakdown joint_train_step(RiskAwareModel& model, const Examples& batch, std::uint64_t seed,
                               const OptimizerConfig& optimizer = {});

struct CombinedRisk {
  CombinationRule rule = CombinationRule::weighted_variance_sum;
  Tensor mean;      // mixture mean (mixture_of_normals only)
  Tensor variance;  // combined variance (not set for report_separately)
  std::map<std::string, Tensor> separate;
};

CombinedRisk combine_scores(const CompositionPlan& plan, const RiskOutput& output);

}  // namespace riskkit
