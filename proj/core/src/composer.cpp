#include "riskkit/composer.hpp"

#include <set>

#include "riskkit/errors.hpp"

namespace riskkit {

std::string_view to_string(Arrangement a) { return a == Arrangement::series ? "series" : "parallel"; }

std::string_view to_string(CombinationRule r) {
  switch (r) {
    case CombinationRule::weighted_variance_sum:
      return "weighted_variance_sum";
    case CombinationRule::mixture_of_normals:
      return "mixture_of_normals";
    case CombinationRule::report_separately:
      return "report_separately";
  }
  return "unknown";
}

CombinationRule parse_combination_rule(std::string_view name) {
  if (name == "weighted_variance_sum") return CombinationRule::weighted_variance_sum;
  if (name == "mixture_of_normals") return CombinationRule::mixture_of_normals;
  if (name == "report_separately") return CombinationRule::report_separately;
  throw ConfigError("unknown combination rule '" + std::string(name) + "'");
}

void CompositionPlan::validate() const {
  if (members.empty()) throw ConfigError("composition plan has no members");
  for (const auto& m : members) m.validate();
  if (arrangement == Arrangement::series) {
    if (members.size() != 2) throw ConfigError("series composition takes exactly two metrics (outer, inner)");
    const auto& outer = members[0];
    const auto& inner = members[1];
    const bool outer_ok = outer.kind == MetricKind::ensemble || outer.kind == MetricKind::dropout;
    const bool inner_ok = inner.kind == MetricKind::mve || inner.kind == MetricKind::vae;
    if (!outer_ok || !inner_ok || (outer.kind == MetricKind::ensemble && !outer.ensemble.inner.empty())) {
      throw IncompatibleMetricError("cannot nest '" + inner.id() + "' inside '" + outer.id() +
                                    "': series needs ensemble or dropout outside mve or vae");
    }
  } else {
    std::set<MetricKind> seen;
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (!seen.insert(members[i].kind).second) {
        for (std::size_t k = 0; k < i; ++k) {
          if (members[k].kind == members[i].kind) {
            throw IncompatibleMetricError("metrics '" + members[k].id() + "' and '" + members[i].id() +
                                          "' conflict: same metric twice");
          }
        }
      }
    }
  }
  if (!weights.empty()) {
    if (weights.size() != risk_ids().size()) {
      throw ConfigError("composition weights: expected " + std::to_string(risk_ids().size()) + " values");
    }
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ConfigError("composition weights must be nonnegative");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("composition weights: at least one must be positive");
  }
}

std::vector<MetricConfig> CompositionPlan::metric_configs() const {
  if (arrangement == Arrangement::series && members.size() == 2 && members[0].kind == MetricKind::ensemble) {
    MetricConfig outer = members[0];
    outer.ensemble.inner = {members[1]};
    return {outer};
  }
  return members;
}

std::vector<std::string> CompositionPlan::risk_ids() const {
  std::vector<std::string> out;
  for (const auto& m : metric_configs()) out.push_back(m.id());
  return out;
}

nlohmann::json CompositionPlan::to_json() const {
  nlohmann::json ms = nlohmann::json::array();
  for (const auto& m : members) ms.push_back(m.to_json());
  nlohmann::json j{{"members", std::move(ms)}, {"arrangement", to_string(arrangement)}, {"weights", weights}};
  j["rule"] = rule ? nlohmann::json(to_string(*rule)) : nlohmann::json(nullptr);
  return j;
}

CompositionPlan CompositionPlan::from_json(const nlohmann::json& j) {
  CompositionPlan p;
  try {
    for (const auto& m : j.at("members")) p.members.push_back(MetricConfig::from_json(m));
    const std::string arrangement = j.value("arrangement", "parallel");
    if (arrangement != "series" && arrangement != "parallel") {
      throw ConfigError("unknown arrangement '" + arrangement + "'");
    }
    p.arrangement = arrangement == "series" ? Arrangement::series : Arrangement::parallel;
    if (j.contains("rule") && !j.at("rule").is_null()) p.rule = parse_combination_rule(j.at("rule").get<std::string>());
    p.weights = j.value("weights", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed composition plan: ") + e.what());
  }
  p.validate();
  return p;
}

RiskAwareModel compose(const SequentialModel& model, const CompositionPlan& plan, const WrapOptions& options) {
  plan.validate();
  RiskAwareModel g = wrap(model, plan.metric_configs(), options);
  g.annotations["composition"] = plan.to_json();
  return g;
}

LossBreakdown joint_train_step(RiskAwareModel& model, const Examples& batch, std::uint64_t seed,
                               const OptimizerConfig& optimizer) {
  return model.train_step(batch.x, batch.y, seed, optimizer);
}

CombinedRisk combine_scores(const CompositionPlan& plan, const RiskOutput& output) {
  const auto ids = plan.risk_ids();
  for (const auto& id : ids) {
    if (!output.risks.count(id)) throw ConfigError("combine_scores: missing scores for member '" + id + "'");
  }
  CombinedRisk out;
  out.rule = plan.rule.value_or(output.components ? CombinationRule::mixture_of_normals
                                                  : CombinationRule::weighted_variance_sum);
  switch (out.rule) {
    case CombinationRule::report_separately:
      for (const auto& id : ids) out.separate[id] = output.risks.at(id);
      break;
    case CombinationRule::mixture_of_normals: {
      if (!output.components) {
        throw ConfigError("mixture_of_normals needs members that expose (mu, sigma)");
      }
      const Moments m = mixture_of_normals(output.components->means, output.components->sigmas);
      out.mean = m.mean;
      out.variance = m.variance;
      break;
    }
    case CombinationRule::weighted_variance_sum: {
      std::vector<Tensor> variances;
      bool same_shape = true;
      for (const auto& id : ids) {
        Tensor r = output.risks.at(id);
        if (id == "mve") r = square(r).detach();
        if (!variances.empty() && r.shape() != variances.front().shape()) same_shape = false;
        variances.push_back(r);
      }
      if (!same_shape) {
        for (auto& v : variances) v = risk_summary(v);
      }
      const std::vector<double> weights = plan.weights.empty() ? std::vector<double>(ids.size(), 1.0) : plan.weights;
      out.variance = weighted_variance_sum(variances, weights);
      break;
    }
  }
  return out;
}

}  // namespace riskkit
