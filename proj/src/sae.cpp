#include "cdlab/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdlab/checkpoint.hpp"
#include "cdlab/errors.hpp"
#include "cdlab/io.hpp"
#include "cdlab/ops.hpp"
#include "cdlab/optim.hpp"
#include "cdlab/rng.hpp"

namespace cdlab {

std::string_view variant_name(SaeVariant v) {
  switch (v) {
    case SaeVariant::Standard: return "standard";
    case SaeVariant::TopK: return "topk";
    case SaeVariant::E2E: return "e2e";
    case SaeVariant::E2EDs: return "e2e_ds";
  }
  return "?";
}

SaeVariant parse_variant(std::string_view name) {
  for (auto v : {SaeVariant::Standard, SaeVariant::TopK, SaeVariant::E2E, SaeVariant::E2EDs}) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown SAE variant '" + std::string(name) +
                    "' (expected standard, topk, e2e or e2e_ds)");
}

bool is_end_to_end(SaeVariant v) { return v == SaeVariant::E2E || v == SaeVariant::E2EDs; }

namespace {

bool is_vector(const Tensor& t) { return t.ndim() == 1; }

Tensor as_rows(const Tensor& t) { return is_vector(t) ? ops::reshape(t, {1, t.numel()}) : t; }

}  // namespace

Tensor Sae::encode(const Tensor& x) const {
  const auto d = d_model();
  if (x.cols() != d) {
    throw DimensionError("SAE encode: input " + shape_str(x.shape()) + " for d_model " +
                         std::to_string(d));
  }
  auto xbar = ops::sub_row(as_rows(x), b_x);
  auto f = ops::relu(ops::add_row(ops::matmul(xbar, ops::transpose(W_e)), b_e));
  if (variant == SaeVariant::TopK) f = ops::topk_keep(f, k);
  return is_vector(x) ? ops::reshape(f, {dict_size()}) : f;
}

Tensor Sae::decode(const Tensor& f) const {
  if (f.cols() != dict_size()) {
    throw DimensionError("SAE decode: input " + shape_str(f.shape()) + " for dictionary of " +
                         std::to_string(dict_size()));
  }
  auto x = ops::add_row(ops::matmul(as_rows(f), ops::transpose(W_d)), b_d);
  return is_vector(f) ? ops::reshape(x, {d_model()}) : x;
}

void Sae::set_trainable(bool on) {
  for (auto& p : parameters()) p.set_requires_grad(on);
}

void Sae::normalize_decoder() {
  const auto d = d_model(), D = dict_size();
  auto w = W_d.mutable_data();
  for (std::size_t j = 0; j < D; ++j) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) n2 += w[i * D + j] * w[i * D + j];
    if (n2 <= 0.0) continue;
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t i = 0; i < d; ++i) w[i * D + j] *= inv;
  }
}

void Sae::save(const std::filesystem::path& path) const {
  Checkpoint c;
  c.kind = "sae";
  c.set("variant", std::string(variant_name(variant)));
  c.set("k", std::to_string(k));
  c.set("lambda", format_double(lambda));
  c.set("layer", std::to_string(layer));
  c.records = {{"W_e", W_e.detach()}, {"b_e", b_e.detach()}, {"W_d", W_d.detach()},
               {"b_d", b_d.detach()}, {"b_x", b_x.detach()}};
  write_checkpoint(path, c);
}

Sae Sae::load(const std::filesystem::path& path) {
  auto c = read_checkpoint(path);
  if (c.kind != "sae") throw FormatError(path.string() + ": expected sae, found " + c.kind);
  Sae s;
  s.variant = parse_variant(c.get("variant"));
  s.k = std::stoul(c.get("k"));
  s.lambda = std::stod(c.get("lambda"));
  s.layer = std::stoul(c.get("layer"));
  s.W_e = c.tensor("W_e").clone();
  s.b_e = c.tensor("b_e").clone();
  s.W_d = c.tensor("W_d").clone();
  s.b_d = c.tensor("b_d").clone();
  s.b_x = c.tensor("b_x").clone();
  const auto D = s.W_e.rows(), d = s.W_e.cols();
  if (s.W_d.shape() != Shape{d, D} || s.b_e.numel() != D || s.b_d.numel() != d ||
      s.b_x.numel() != d) {
    throw FormatError(path.string() + ": inconsistent SAE parameter shapes");
  }
  return s;
}

Sae init_sae(std::size_t d_model, std::size_t dict_size, SaeVariant variant, std::size_t k,
             double lambda, std::uint64_t seed, const Tensor* data_mean) {
  if (dict_size <= d_model) {
    throw ConfigError("SAE dictionary size " + std::to_string(dict_size) +
                      " must exceed d_model " + std::to_string(d_model));
  }
  if (variant == SaeVariant::TopK && (k < 1 || k > dict_size)) {
    throw ConfigError("top-k SAE needs 1 <= k <= " + std::to_string(dict_size) + ", got " +
                      std::to_string(k));
  }
  Rng rng(seed);
  Sae s;
  s.variant = variant;
  s.k = variant == SaeVariant::TopK ? k : 0;
  s.lambda = lambda;
  std::vector<double> wd(d_model * dict_size);
  for (auto& v : wd) v = rng.normal();
  s.W_d = Tensor({d_model, dict_size}, std::move(wd));
  s.normalize_decoder();
  std::vector<double> we(dict_size * d_model);
  const auto& w = s.W_d.values();
  for (std::size_t i = 0; i < d_model; ++i) {
    for (std::size_t j = 0; j < dict_size; ++j) we[j * d_model + i] = w[i * dict_size + j];
  }
  s.W_e = Tensor({dict_size, d_model}, std::move(we));
  s.b_e = Tensor::zeros({dict_size});
  s.b_d = data_mean ? data_mean->clone() : Tensor::zeros({d_model});
  s.b_x = data_mean ? data_mean->clone() : Tensor::zeros({d_model});
  return s;
}

ActivationCorpus build_activation_corpus(const ToyLM& model, const World& world,
                                         std::size_t layer) {
  if (layer >= model.config().n_layers) {
    throw ConfigError("layer " + std::to_string(layer) + " outside model with " +
                      std::to_string(model.config().n_layers) + " layers");
  }
  ActivationCorpus c;
  c.layer = layer;
  std::vector<double> rows;
  auto add_site = [&](std::size_t cache, std::size_t pos) {
    c.sites.emplace_back(cache, pos);
    auto h = c.caches[cache].hidden(layer, pos);
    rows.insert(rows.end(), h.values().begin(), h.values().end());
  };
  for (auto a : kAttributes) {
    bool first = true;
    for (const auto& f : world.facts) {
      const auto prompt = build_prompt(world.vocab, f.city).get(a);
      c.caches.push_back(model.prepare(prompt));
      const auto idx = c.caches.size() - 1;
      if (first) {
        for (auto p : exemplar_positions(world.vocab, prompt)) add_site(idx, p);
        first = false;
      }
      add_site(idx, query_position(prompt));
    }
  }
  const auto d = model.config().d_model;
  const auto n = rows.size() / d;
  c.activations = Tensor({n, d}, std::move(rows));
  return c;
}

ActivationCorpus matrix_corpus(Tensor activations) {
  if (activations.ndim() != 2) {
    throw DimensionError("activation corpus must be a matrix, got " +
                         shape_str(activations.shape()));
  }
  ActivationCorpus c;
  c.activations = std::move(activations);
  return c;
}

SaeLoss sae_loss(const Sae& sae, const ToyLM* model, const ActivationCorpus& corpus,
                 std::span<const std::size_t> rows, const SaeLossOptions& options) {
  if (rows.empty()) throw ContractError("sae_loss: empty batch");
  Tensor x;
  {
    NoGradGuard no_grad;
    x = ops::gather_rows(corpus.activations, rows);
  }
  auto f = sae.encode(x);
  auto xhat = sae.decode(f);
  SaeLoss out;
  out.mse = ops::mse(x, xhat);
  out.sparsity = sae.variant == SaeVariant::TopK ? Tensor::scalar(0.0)
                                                 : ops::scale(ops::l1_norm(f), sae.lambda);
  out.kl = Tensor::scalar(0.0);
  out.downstream = Tensor::scalar(0.0);
  out.total = ops::add(out.mse, out.sparsity);
  if (!is_end_to_end(sae.variant)) return out;

  if (!model || !corpus.has_sites()) {
    throw ConfigError("end-to-end SAE loss needs the model and prompt sites");
  }
  const auto L = model->config().n_layers;
  const bool ds = sae.variant == SaeVariant::E2EDs;
  if (ds && corpus.layer + 1 >= L) {
    throw ConfigError("e2e_ds SAE at layer " + std::to_string(corpus.layer) +
                      " has no downstream layers");
  }
  const double w = 1.0 / static_cast<double>(rows.size());
  Tensor kl_acc = Tensor::scalar(0.0), ds_acc = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto [ci, pos] = corpus.sites[rows[i]];
    const auto& cache = corpus.caches[ci];
    auto run = model->run_patched(cache, {corpus.layer, pos}, ops::select_row(xhat, i), ds);
    auto orig = cache.logits;
    auto kl = options.kl_reverse ? ops::kl_divergence(run.logits, orig)
                                 : ops::kl_divergence(orig, run.logits);
    kl_acc = ops::add(kl_acc, kl);
    if (ds) {
      Tensor acc = Tensor::scalar(0.0);
      for (std::size_t j = 0; j < run.downstream.size(); ++j) {
        Tensor ref;
        {
          NoGradGuard no_grad;
          ref = cache.hidden(corpus.layer + 1 + j, pos);
        }
        auto e = ops::mse(ref, run.downstream[j]);
        acc = ops::add(acc, e);
      }
      acc = ops::scale(acc, 1.0 / static_cast<double>(run.downstream.size()));
      ds_acc = ops::add(ds_acc, acc);
    }
  }
  out.kl = ops::scale(kl_acc, w);
  out.total = ops::add(out.total, out.kl);
  if (ds) {
    out.downstream = ops::scale(ds_acc, w);
    out.total = ops::add(out.total, out.downstream);
  }
  return out;
}

namespace {

// Removes the component of each decoder column's gradient along the column,
// so the step moves atoms tangentially to the unit sphere.
void project_decoder_grad(Sae& sae) {
  if (!sae.W_d.has_grad()) return;
  const auto d = sae.d_model(), D = sae.dict_size();
  auto& g = sae.W_d.node()->grad_buffer();
  const auto& w = sae.W_d.values();
  for (std::size_t j = 0; j < D; ++j) {
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += g[i * D + j] * w[i * D + j];
    for (std::size_t i = 0; i < d; ++i) g[i * D + j] -= dot * w[i * D + j];
  }
}

Tensor column_mean(const Tensor& x) {
  const auto n = x.rows(), d = x.cols();
  std::vector<double> m(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) m[c] += x.values()[r * d + c];
  }
  for (auto& v : m) v /= static_cast<double>(n);
  return Tensor::vector(std::move(m));
}

}  // namespace

Sae train_sae(const SaeTrainConfig& config, const ActivationCorpus& corpus, const ToyLM* model,
              SaeTrainLog* log) {
  if (corpus.size() == 0) throw ContractError("train_sae: empty activation corpus");
  if (config.batch == 0) throw ConfigError("train_sae: batch must be positive");
  if (is_end_to_end(config.variant)) {
    if (!model || !corpus.has_sites()) {
      throw ConfigError("train_sae: variant " + std::string(variant_name(config.variant)) +
                        " needs the language model and a prompt-backed corpus");
    }
    if (config.variant == SaeVariant::E2EDs && corpus.layer + 1 >= model->config().n_layers) {
      throw ConfigError("train_sae: e2e_ds at the last layer (" + std::to_string(corpus.layer) +
                        ") has no downstream layers");
    }
  }
  const auto d = corpus.activations.cols();
  const auto mean = column_mean(corpus.activations);
  Sae sae = init_sae(d, config.dict_mult * d, config.variant, config.k, config.lambda, config.seed,
                     &mean);
  sae.layer = corpus.layer;
  const SaeLossOptions opts{config.kl_reverse};

  std::vector<std::size_t> all(corpus.size());
  std::iota(all.begin(), all.end(), 0);
  {
    NoGradGuard no_grad;
    const double init = sae_loss(sae, model, corpus, all, opts).total.item();
    if (log) log->initial_loss = init;
  }

  sae.set_trainable(true);
  Adam adam(sae.parameters(), {config.lr, 0.9, 0.999, 1e-8});
  Rng rng(config.seed ^ 0x5ae5ae5aeULL);
  std::vector<std::size_t> order = all;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const auto end = std::min(order.size(), start + config.batch);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      auto loss = sae_loss(sae, model, corpus, rows, opts).total;
      const double v = loss.item();
      ++step;
      if (!std::isfinite(v)) {
        throw TrainingError("train_sae: non-finite loss at step " + std::to_string(step) +
                            " (epoch " + std::to_string(epoch) + ")");
      }
      backward(loss);
      project_decoder_grad(sae);
      adam.step();
      sae.normalize_decoder();
      total += v * static_cast<double>(end - start);
    }
    if (log) log->epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  sae.set_trainable(false);
  return sae;
}

}  // namespace cdlab
