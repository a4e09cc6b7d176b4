#include "cdlab/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "cdlab/errors.hpp"
#include "cdlab/io.hpp"
#include "cdlab/ops.hpp"

namespace cdlab {

double disentangle_score(double intervened_acc, double preserved_acc) {
  return 0.5 * (intervened_acc + preserved_acc);
}

long display_round(double value) { return static_cast<long>(std::floor(value + 0.5)); }

SideAccuracy score_sides(const std::vector<TokenId>& predictions,
                         const std::vector<InterventionExample>& records) {
  if (predictions.size() != records.size()) {
    throw ContractError("score_sides: " + std::to_string(predictions.size()) +
                        " predictions for " + std::to_string(records.size()) + " records");
  }
  std::size_t n_int = 0, hit_int = 0, n_pre = 0, hit_pre = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const bool hit = predictions[i] == records[i].label;
    if (records[i].changes_output()) {
      ++n_int;
      hit_int += hit;
    } else {
      ++n_pre;
      hit_pre += hit;
    }
  }
  if (n_int == 0 || n_pre == 0) {
    throw ContractError("score_sides: need both intervened and preserved records (got " +
                        std::to_string(n_int) + " and " + std::to_string(n_pre) + ")");
  }
  return {100.0 * static_cast<double>(hit_int) / static_cast<double>(n_int),
          100.0 * static_cast<double>(hit_pre) / static_cast<double>(n_pre)};
}

SideAccuracy evaluate_selection(const InterventionBackend& backend, const FeatureSpace& space,
                                const Selection& selection,
                                const std::vector<InterventionExample>& records, Attribute target,
                                const InterchangeOptions& options) {
  if (selection.size() != space.feature_dim()) {
    throw ContractError("evaluate_selection: selection of " + std::to_string(selection.size()) +
                        " for " + std::to_string(space.feature_dim()) + " features");
  }
  const auto recs = filter_target(records, target);
  if (recs.empty()) throw ContractError("evaluate_selection: empty split");
  return score_sides(predict(backend, space.bind(), selection_gate(selection), recs, options), recs);
}

Partition partition_from_activity(const std::vector<bool>& active, const Selection& selection) {
  if (active.size() != selection.size() || active.empty()) {
    throw ContractError("partition: activity of " + std::to_string(active.size()) +
                        " vs selection of " + std::to_string(selection.size()));
  }
  std::size_t inactive = 0, selected = 0;
  for (std::size_t i = 0; i < active.size(); ++i) {
    if (selection[i]) {
      ++selected;
    } else if (!active[i]) {
      ++inactive;
    }
  }
  const double n = static_cast<double>(active.size());
  Partition p;
  p.inactive = static_cast<double>(inactive) / n;
  p.intervened = static_cast<double>(selected) / n;
  p.active_nonintervened = static_cast<double>(active.size() - inactive - selected) / n;
  return p;
}

std::vector<bool> feature_activity(const InterventionBackend& backend, const FeatureSpace& space,
                                   const std::vector<InterventionExample>& records) {
  std::set<std::pair<TokenId, Attribute>> prompts;
  for (const auto& r : records) {
    prompts.emplace(r.base_city, r.queried);
    prompts.emplace(r.source_city, r.queried);
  }
  std::vector<bool> active(space.feature_dim(), false);
  NoGradGuard no_grad;
  auto map = space.bind();
  for (const auto& [city, a] : prompts) {
    auto f = map.to_features(backend.hidden(city, a));
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (std::abs(f[i]) > kActiveThreshold) active[i] = true;
    }
  }
  return active;
}

Partition sparsity_partition(const InterventionBackend& backend, const FeatureSpace& space,
                             const Selection& selection,
                             const std::vector<InterventionExample>& records) {
  return partition_from_activity(feature_activity(backend, space, records), selection);
}

std::vector<std::pair<TokenId, Attribute>> base_prompts(
    const std::vector<InterventionExample>& records) {
  std::set<std::pair<TokenId, Attribute>> seen;
  std::vector<std::pair<TokenId, Attribute>> out;
  for (const auto& r : records) {
    if (seen.emplace(r.base_city, r.queried).second) out.emplace_back(r.base_city, r.queried);
  }
  return out;
}

ReconReport reconstruction_report(const InterventionBackend& backend, const FeatureSpace& space,
                                  const std::vector<std::pair<TokenId, Attribute>>& prompts,
                                  const InterchangeOptions& options) {
  if (prompts.empty()) throw ContractError("reconstruction_report: no prompts");
  NoGradGuard no_grad;
  const auto d = backend.d_model();
  std::vector<double> rows;
  for (const auto& [city, a] : prompts) {
    auto h = backend.hidden(city, a);
    rows.insert(rows.end(), h.values().begin(), h.values().end());
  }
  Tensor H({prompts.size(), d}, std::move(rows));
  auto map = space.bind();
  auto Hhat = map.from_features(map.to_features(H));
  ReconReport rep;
  rep.n_prompts = prompts.size();
  rep.loss = ops::mse(H, Hhat).item();
  auto patched = options.error_restoration ? H : Hhat;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto [city, a] = prompts[i];
    auto logits = backend.patched_logits(city, a, ops::select_row(patched, i));
    hits += argmax(logits) == backend.answer(city, a);
  }
  rep.knowledge = 100.0 * static_cast<double>(hits) / static_cast<double>(prompts.size());
  return rep;
}

double empty_intervention_baseline(const InterventionBackend& backend, const FeatureSpace& space,
                                   const std::vector<InterventionExample>& records,
                                   Attribute target, const InterchangeOptions& options) {
  Selection none(space.feature_dim(), false);
  return evaluate_selection(backend, space, none, records, target, options).disentangle();
}

EvalReport evaluate_cell(const InterventionBackend& backend, const FeatureSpace& space,
                         const Selection& selection, const std::vector<InterventionExample>& test,
                         Attribute target, std::size_t layer, const InterchangeOptions& options) {
  EvalReport r;
  r.layer = layer;
  r.space = space.name();
  r.target = target;
  const auto sides = evaluate_selection(backend, space, selection, test, target, options);
  r.intervened_acc = sides.intervened;
  r.preserved_acc = sides.preserved;
  r.disentangle = sides.disentangle();
  const auto p = sparsity_partition(backend, space, selection, test);
  r.inactive_frac = p.inactive;
  r.intervened_frac = p.intervened;
  r.active_nonintervened_frac = p.active_nonintervened;
  const auto rec = reconstruction_report(backend, space, base_prompts(test), options);
  r.recon_loss = rec.loss;
  r.recon_knowledge = rec.knowledge;
  r.empty_baseline = empty_intervention_baseline(backend, space, test, target, options);
  r.n_records = filter_target(test, target).size();
  return r;
}

std::string reports_to_jsonl(const std::vector<EvalReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["layer"] = r.layer;
    j["space"] = r.space;
    j["target"] = std::string(attribute_name(r.target));
    j["intervened_acc"] = r.intervened_acc;
    j["preserved_acc"] = r.preserved_acc;
    j["disentangle"] = r.disentangle;
    j["inactive_frac"] = r.inactive_frac;
    j["intervened_frac"] = r.intervened_frac;
    j["active_nonintervened_frac"] = r.active_nonintervened_frac;
    j["recon_loss"] = r.recon_loss;
    j["recon_knowledge"] = r.recon_knowledge;
    j["empty_baseline"] = r.empty_baseline;
    j["n_records"] = r.n_records;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<EvalReport> reports_from_jsonl(const std::string& text) {
  std::vector<EvalReport> out;
  std::size_t lineno = 0;
  for (const auto& line : split_lines(text)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      EvalReport r;
      r.layer = j.at("layer").get<std::size_t>();
      r.space = j.at("space").get<std::string>();
      r.target = parse_attribute(j.at("target").get<std::string>());
      r.intervened_acc = j.at("intervened_acc").get<double>();
      r.preserved_acc = j.at("preserved_acc").get<double>();
      r.disentangle = j.at("disentangle").get<double>();
      r.inactive_frac = j.at("inactive_frac").get<double>();
      r.intervened_frac = j.at("intervened_frac").get<double>();
      r.active_nonintervened_frac = j.at("active_nonintervened_frac").get<double>();
      r.recon_loss = j.at("recon_loss").get<double>();
      r.recon_knowledge = j.at("recon_knowledge").get<double>();
      r.empty_baseline = j.at("empty_baseline").get<double>();
      r.n_records = j.at("n_records").get<std::size_t>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("reports line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string sweep_tsv(const std::vector<EvalReport>& reports, const std::vector<SweepCell>& absent) {
  struct Row {
    std::string disentangle, baseline;
  };
  std::map<std::tuple<std::size_t, std::string, std::string>, Row> rows;
  for (const auto& r : reports) {
    rows[{r.layer, r.space, std::string(attribute_name(r.target))}] = {
        format_double(r.disentangle), format_double(r.empty_baseline)};
  }
  for (const auto& c : absent) {
    rows.try_emplace({c.layer, c.space, std::string(attribute_name(c.target))},
                     Row{"absent", "absent"});
  }
  std::string out = "layer\tspace\tattr\tdisentangle\tbaseline\n";
  for (const auto& [key, row] : rows) {
    out += std::to_string(std::get<0>(key)) + "\t" + std::get<1>(key) + "\t" + std::get<2>(key) +
           "\t" + row.disentangle + "\t" + row.baseline + "\n";
  }
  return out;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  return left ? s + std::string(width - s.size(), ' ') : std::string(width - s.size(), ' ') + s;
}

}  // namespace

std::string render_layer_table(const std::vector<EvalReport>& reports, std::size_t layer,
                               const std::vector<std::string>& space_order) {
  std::map<std::pair<std::string, Attribute>, const EvalReport*> cell;
  for (const auto& r : reports) {
    if (r.layer == layer) cell[{r.space, r.target}] = &r;
  }
  std::ostringstream out;
  constexpr std::size_t kLabel = 25, kCol = 14;
  out << "Layer " << layer << "\n";
  for (auto target : kAttributes) {
    const bool country = target == Attribute::Country;
    out << "\n" << (country ? "Country-Intervened Continent-Preserved"
                            : "Continent-Intervened Country-Preserved")
        << "\n";
    out << pad("", kLabel, true);
    for (const auto& s : space_order) out << pad(s, kCol);
    out << "\n";
    auto row = [&](const std::string& label, auto value) {
      out << pad(label, kLabel, true);
      for (const auto& s : space_order) {
        auto it = cell.find({s, target});
        out << pad(it == cell.end() ? "-" : value(*it->second), kCol);
      }
      out << "\n";
    };
    auto pct = [](double v) { return std::to_string(display_round(v)); };
    row("Continent Accuracy", [&](const EvalReport& r) {
      return pct(country ? r.preserved_acc : r.intervened_acc);
    });
    row("Country Accuracy", [&](const EvalReport& r) {
      return pct(country ? r.intervened_acc : r.preserved_acc);
    });
    row("Disentangle Score", [&](const EvalReport& r) { return pct(r.disentangle); });
    row("Inactive Features", [](const EvalReport& r) { return fixed(r.inactive_frac, 3); });
    row("Non-Intervened Features",
        [](const EvalReport& r) { return fixed(r.active_nonintervened_frac, 3); });
    row("Intervened Features", [](const EvalReport& r) { return fixed(r.intervened_frac, 3); });
    row("Reconstruction Loss", [](const EvalReport& r) { return fixed(r.recon_loss, 3); });
    row("Reconstructed Knowledge", [&](const EvalReport& r) { return pct(r.recon_knowledge); });
    row("Empty Baseline", [&](const EvalReport& r) { return pct(r.empty_baseline); });
  }
  return out.str();
}

}  // namespace cdlab
