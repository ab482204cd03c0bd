#include "freqhead/head.hpp"

#include <algorithm>

namespace freqhead {

std::string_view to_string(Variant v) {
  return v == Variant::causal ? "causal" : "masked";
}

Variant variant_from_string(std::string_view s) {
  if (s == "causal") return Variant::causal;
  if (s == "masked") return Variant::masked;
  throw Error("unknown model variant: " + std::string(s));
}

InterventionSpec InterventionSpec::clamped() const {
  if (std::isnan(lambda_ln)) throw Error("intervention: lambda_ln is NaN");
  InterventionSpec out = *this;
  out.lambda_ln = std::clamp(lambda_ln, 0.0, 1.0);
  return out;
}

void to_json(nlohmann::json& j, const InterventionSpec& iv) {
  j = nlohmann::json{{"lambda_ln", iv.lambda_ln},
                     {"use_b_fc", iv.use_b_fc},
                     {"use_b_last", iv.use_b_last}};
}

void from_json(const nlohmann::json& j, InterventionSpec& iv) {
  iv = InterventionSpec{};
  if (j.contains("lambda_ln")) iv.lambda_ln = j.at("lambda_ln").get<double>();
  if (j.contains("use_b_fc")) iv.use_b_fc = j.at("use_b_fc").get<bool>();
  if (j.contains("use_b_last")) iv.use_b_last = j.at("use_b_last").get<bool>();
  iv = iv.clamped();
}

}  // namespace freqhead
