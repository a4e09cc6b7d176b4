#include "cdlab/dbm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "cdlab/checkpoint.hpp"
#include "cdlab/errors.hpp"
#include "cdlab/io.hpp"
#include "cdlab/ops.hpp"
#include "cdlab/optim.hpp"
#include "cdlab/rng.hpp"

namespace cdlab {

double MaskParams::temperature(std::size_t epoch) const {
  if (epochs <= 1) return t_end;
  const double frac = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  // weighted form so the last epoch lands exactly on t_end
  return t_start * (1.0 - frac) + t_end * frac;
}

Tensor MaskParams::gate(double temperature) const {
  return ops::sigmoid(ops::scale(m, 1.0 / temperature));
}

Tensor interpolate(const Tensor& f_b, const Tensor& f_s, const Tensor& m, double temperature) {
  if (f_b.shape() != f_s.shape()) {
    throw DimensionError("interpolate: f_b " + shape_str(f_b.shape()) + " vs f_s " +
                         shape_str(f_s.shape()));
  }
  if (m.numel() != f_b.cols()) {
    throw DimensionError("interpolate: mask of " + std::to_string(m.numel()) + " for " +
                         std::to_string(f_b.cols()) + " features");
  }
  if (!(temperature > 0.0)) throw ContractError("interpolate: temperature must be positive");
  return ops::lerp_gate(f_b, f_s, ops::sigmoid(ops::scale(m, 1.0 / temperature)));
}

Selection binarize(const Tensor& m) {
  Selection s(m.numel());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = m[i] > 0.0;
  return s;
}

double snapped_fraction(const MaskParams& mask, double temperature, double lo) {
  NoGradGuard no_grad;
  auto g = mask.gate(temperature);
  std::size_t n = 0;
  for (double v : g.values()) n += (v <= lo || v >= 1.0 - lo);
  return static_cast<double>(n) / static_cast<double>(g.numel());
}

Tensor intervention_loss(const InterventionBackend& backend, const FeatureMap& map,
                         const Tensor& gate, const std::vector<InterventionExample>& batch,
                         const InterchangeOptions& options) {
  if (batch.empty()) throw ContractError("intervention_loss: empty batch");
  auto h = mix_hidden(map, stack_hidden(backend, batch, false), stack_hidden(backend, batch, true),
                      gate, options);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto logits = backend.patched_logits(batch[i].base_city, batch[i].queried, ops::select_row(h, i));
    total = ops::add(total, ops::softmax_cross_entropy(logits, batch[i].label));
  }
  return ops::scale(total, 1.0 / static_cast<double>(batch.size()));
}

MaskResult train_mask(const InterventionBackend& backend, FeatureSpace& space,
                      const std::vector<InterventionExample>& train,
                      const std::vector<InterventionExample>& val, const DbmTrainConfig& config,
                      const std::function<void(const MaskCurvePoint&)>& on_epoch) {
  if (config.batch == 0 || config.epochs == 0) {
    throw ConfigError("train_mask: batch and epochs must be positive");
  }
  if (!(config.t_start > config.t_end) || !(config.t_end > 0.0)) {
    throw ConfigError("train_mask: need t_start > t_end > 0");
  }
  if (config.joint_das && space.kind() != SpaceKind::Das) {
    throw ConfigError("train_mask: joint_das requires a DAS space, got " + space.name());
  }
  const auto records = filter_target(train, config.target);
  if (records.empty()) throw ContractError("train_mask: no training records for the target");
  const auto val_records = filter_target(val, config.target);

  MaskResult result;
  auto& mask = result.mask;
  mask.m = Tensor::filled({space.feature_dim()}, config.mask_init, true);
  mask.t_start = config.t_start;
  mask.t_end = config.t_end;
  mask.epochs = config.epochs;

  Adam mask_opt({mask.m}, {config.lr, 0.9, 0.999, 1e-8});
  std::optional<Adam> das_opt;
  if (config.joint_das) {
    space.orth().A.set_requires_grad(true);
    das_opt.emplace(std::vector<Tensor>{space.orth().A}, AdamConfig{config.das_lr, 0.9, 0.999, 1e-8});
  }

  Rng rng(config.seed);
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  std::vector<InterventionExample> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double T = mask.temperature(epoch);
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const auto end = std::min(order.size(), start + config.batch);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(records[order[i]]);
      auto map = space.bind();
      auto loss = intervention_loss(backend, map, mask.gate(T), batch, config.interchange);
      const double v = loss.item();
      ++step;
      if (!std::isfinite(v)) {
        throw TrainingError("train_mask: non-finite loss at step " + std::to_string(step) +
                            " (epoch " + std::to_string(epoch) + ")");
      }
      backward(loss);
      mask_opt.step();
      if (das_opt) das_opt->step();
      total += v * static_cast<double>(batch.size());
    }
    MaskCurvePoint pt;
    pt.epoch = epoch;
    pt.temperature = T;
    pt.train_loss = total / static_cast<double>(records.size());
    pt.snapped = snapped_fraction(mask, T);
    const auto sel = binarize(mask);
    pt.selected = static_cast<double>(std::count(sel.begin(), sel.end(), true)) /
                  static_cast<double>(sel.size());
    if (val_records.empty()) {
      pt.val_accuracy = std::numeric_limits<double>::quiet_NaN();
    } else {
      pt.val_accuracy =
          label_accuracy(predict(backend, space.bind(), selection_gate(sel), val_records,
                                 config.interchange),
                         val_records);
    }
    result.curve.push_back(pt);
    if (on_epoch) on_epoch(pt);
  }
  mask.m.set_requires_grad(false);
  if (config.joint_das) space.orth().A.set_requires_grad(false);
  return result;
}

std::string mask_index_text(const Selection& selection, const std::string& header) {
  std::ostringstream out;
  std::istringstream lines(header);
  for (std::string line; std::getline(lines, line);) out << "# " << line << "\n";
  std::size_t n = 0;
  for (bool b : selection) n += b;
  out << "# selected " << n << " of " << selection.size() << "\n";
  for (std::size_t i = 0; i < selection.size(); ++i) {
    if (selection[i]) out << i << "\n";
  }
  return out.str();
}

void write_mask(const std::filesystem::path& path, const MaskParams& mask, const MetaList& meta,
                const OrthParam* das) {
  Checkpoint c;
  c.kind = "mask";
  for (const auto& [k, v] : meta) c.set(k, v);
  c.set("t_start", format_double(mask.t_start));
  c.set("t_end", format_double(mask.t_end));
  c.set("epochs", std::to_string(mask.epochs));
  c.records.emplace_back("m", mask.m.detach());
  if (das) c.records.emplace_back("das_A", das->A.detach());
  write_checkpoint(path, c);
}

LoadedMask read_mask(const std::filesystem::path& path) {
  auto c = read_checkpoint(path);
  if (c.kind != "mask") throw FormatError(path.string() + ": expected mask, found " + c.kind);
  LoadedMask out;
  out.mask.m = c.tensor("m").clone();
  out.mask.t_start = std::stod(c.get("t_start"));
  out.mask.t_end = std::stod(c.get("t_end"));
  out.mask.epochs = std::stoul(c.get("epochs"));
  for (const auto& [k, v] : c.meta) {
    if (k != "t_start" && k != "t_end" && k != "epochs") out.meta.emplace_back(k, v);
  }
  for (const auto& [name, t] : c.records) {
    if (name == "das_A") out.das = OrthParam{t.clone()};
  }
  return out;
}

}  // namespace cdlab
